//! Plain SGD with optional global-norm gradient clipping.

use super::{ParamGroup, Tensor2};
use crate::error::{Error, Result};

/// Step configuration. Clipping at L2 norm 5.0 is on by default.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl SgdConfig {
    pub fn new(lr: f64) -> Self {
        SgdConfig {
            lr,
            clip_norm: Some(5.0),
        }
    }
}

/// One descent step: theta -= lr * g, with g rescaled when the global L2
/// norm over all non-frozen groups exceeds `clip_norm`. Frozen groups are
/// left bitwise untouched.
pub fn sgd_step(
    groups: &mut [&mut ParamGroup],
    grads: &[Vec<Tensor2>],
    cfg: &SgdConfig,
) -> Result<()> {
    if groups.len() != grads.len() {
        return Err(Error::dimension(
            "sgd_step",
            format!("{} gradient groups", groups.len()),
            grads.len(),
        ));
    }
    let mut sq = 0.0;
    for (group, ggrads) in groups.iter().zip(grads.iter()) {
        if group.frozen {
            continue;
        }
        if ggrads.len() != group.tensors.len() {
            return Err(Error::dimension(
                &format!("sgd_step group '{}'", group.name),
                format!("{} tensors", group.tensors.len()),
                ggrads.len(),
            ));
        }
        for (t, g) in group.tensors.iter().zip(ggrads.iter()) {
            if t.shape() != g.shape() {
                return Err(Error::dimension(
                    &format!("sgd_step group '{}'", group.name),
                    format!("{:?}", t.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Evaluation("sgd_step: non-finite gradient".into()));
    }
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for (group, ggrads) in groups.iter_mut().zip(grads.iter()) {
        if group.frozen {
            continue;
        }
        for (t, g) in group.tensors.iter_mut().zip(ggrads.iter()) {
            for (p, &gv) in t.data_mut().iter_mut().zip(g.data().iter()) {
                *p -= cfg.lr * scale * gv;
            }
        }
    }
    Ok(())
}
