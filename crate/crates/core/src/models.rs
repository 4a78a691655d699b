//! Base model, classifier and partition head.
//!
//! The base model is a small ReLU MLP over precomputed embeddings; the
//! classifier and the partition head are single affine layers on top of
//! its output. The three parameter groups carry independent freeze flags
//! so the training loop can alternate which part of the stack learns.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{
    affine_backward, affine_forward, relu, relu_backward, softmax_rows, ParamGroup, Tensor2,
};
use crate::rng::{self, tag};

/// Label index convention, fixed across the crate: 0 = non-rumor,
/// 1 = rumor. Demographic parity is measured on P(prediction = 1).
pub const POSITIVE_LABEL: u8 = 1;

/// Architecture of the stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Hidden widths of the base model. Empty plus rep_dim == feature_dim
    /// makes the base model the identity.
    pub hidden_widths: Vec<usize>,
    pub rep_dim: usize,
    pub k: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.rep_dim == 0 {
            return Err(Error::Config(
                "model config: feature_dim and rep_dim must be >= 1".into(),
            ));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("model config: hidden width 0".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!(
                "model config: k must be >= 2, got {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Affine layer shapes of the base model, in order.
    fn phi_layer_dims(&self) -> Vec<(usize, usize)> {
        if self.hidden_widths.is_empty() && self.rep_dim == self.feature_dim {
            return Vec::new();
        }
        let mut dims = Vec::new();
        let mut prev = self.feature_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.rep_dim));
        dims
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters of the full stack: base model `phi`, `classifier` and
/// `partition_head`, each an independently freezable group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub config_hash: String,
    pub phi: ParamGroup,
    pub classifier: ParamGroup,
    pub partition_head: ParamGroup,
}

/// Glorot-uniform initialization: weights ~ U(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init_bundle(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = rng::substream(seed, tag::INIT);
    let mut init_affine = |fan_in: usize, fan_out: usize| -> (Tensor2, Tensor2) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Tensor2::zeros(fan_in, fan_out);
        for v in w.data_mut() {
            *v = rand::Rng::random_range(&mut rng, -a..a);
        }
        (w, Tensor2::zeros(1, fan_out))
    };
    let mut phi_tensors = Vec::new();
    for (fi, fo) in config.phi_layer_dims() {
        let (w, b) = init_affine(fi, fo);
        phi_tensors.push(w);
        phi_tensors.push(b);
    }
    let (cw, cb) = init_affine(config.rep_dim, 2);
    let (pw, pb) = init_affine(config.rep_dim, config.k);
    Ok(ModelBundle {
        config: config.clone(),
        config_hash: config.config_hash(),
        phi: ParamGroup::new("phi", phi_tensors),
        classifier: ParamGroup::new("classifier", vec![cw, cb]),
        partition_head: ParamGroup::new("partition_head", vec![pw, pb]),
    })
}

/// Cached intermediates of one base-model forward pass, consumed by
/// `phi_backward`.
#[derive(Debug, Clone)]
pub struct PhiCache {
    /// Input to each affine layer.
    layer_inputs: Vec<Tensor2>,
    /// Pre-activation output of each non-final layer (for the ReLU mask).
    pre_activations: Vec<Tensor2>,
}

impl ModelBundle {
    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.config.feature_dim {
            return Err(Error::dimension(
                "extract",
                format!("{} feature columns", self.config.feature_dim),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        Ok(())
    }

    fn check_rep(&self, z: &Tensor2, context: &str) -> Result<()> {
        if z.cols() != self.config.rep_dim {
            return Err(Error::dimension(
                context,
                format!("{} representation columns", self.config.rep_dim),
                format!("{}x{}", z.rows(), z.cols()),
            ));
        }
        Ok(())
    }

    /// Z = phi(X).
    pub fn extract(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.extract_cached(x)?.0)
    }

    /// Forward pass keeping the intermediates needed for backprop.
    pub fn extract_cached(&self, x: &Tensor2) -> Result<(Tensor2, PhiCache)> {
        self.check_input(x)?;
        let dims = self.config.phi_layer_dims();
        let mut cache = PhiCache {
            layer_inputs: Vec::with_capacity(dims.len()),
            pre_activations: Vec::new(),
        };
        let mut cur = x.clone();
        for li in 0..dims.len() {
            let w = &self.phi.tensors[2 * li];
            let b = &self.phi.tensors[2 * li + 1];
            cache.layer_inputs.push(cur.clone());
            let pre = affine_forward(w, b, &cur)?;
            if li + 1 < dims.len() {
                cache.pre_activations.push(pre.clone());
                cur = relu(&pre);
            } else {
                cur = pre;
            }
        }
        Ok((cur, cache))
    }

    /// Gradients of phi's parameters given dL/dZ, in tensor order.
    pub fn phi_backward(&self, cache: &PhiCache, d_z: &Tensor2) -> Result<Vec<Tensor2>> {
        let n_layers = cache.layer_inputs.len();
        let mut grads = vec![Tensor2::zeros(0, 0); 2 * n_layers];
        let mut d_out = d_z.clone();
        for li in (0..n_layers).rev() {
            let w = &self.phi.tensors[2 * li];
            let x = &cache.layer_inputs[li];
            let (dw, db, dx) = affine_backward(w, x, &d_out)?;
            grads[2 * li] = dw;
            grads[2 * li + 1] = db;
            if li > 0 {
                d_out = relu_backward(&cache.pre_activations[li - 1], &dx)?;
            }
        }
        Ok(grads)
    }

    /// Classifier logits, batch x 2.
    pub fn classify(&self, z: &Tensor2) -> Result<Tensor2> {
        self.check_rep(z, "classify")?;
        affine_forward(&self.classifier.tensors[0], &self.classifier.tensors[1], z)
    }

    /// Gradients of the classifier and of Z given dL/dlogits.
    pub fn classifier_backward(
        &self,
        z: &Tensor2,
        d_logits: &Tensor2,
    ) -> Result<(Vec<Tensor2>, Tensor2)> {
        let (dw, db, dz) = affine_backward(&self.classifier.tensors[0], z, d_logits)?;
        Ok((vec![dw, db], dz))
    }

    /// Raw subset scores of the partition head, batch x k.
    pub fn partition_logits(&self, z: &Tensor2) -> Result<Tensor2> {
        self.check_rep(z, "partition_logits")?;
        affine_forward(
            &self.partition_head.tensors[0],
            &self.partition_head.tensors[1],
            z,
        )
    }

    /// Gradients of the partition head and of Z given dL/dlogits.
    pub fn partition_head_backward(
        &self,
        z: &Tensor2,
        d_logits: &Tensor2,
    ) -> Result<(Vec<Tensor2>, Tensor2)> {
        let (dw, db, dz) = affine_backward(&self.partition_head.tensors[0], z, d_logits)?;
        Ok((vec![dw, db], dz))
    }

    /// Soft subset assignment: softmax over partition logits.
    pub fn soft_assignment(&self, z: &Tensor2) -> Result<Tensor2> {
        softmax_rows(&self.partition_logits(z)?)
    }

    pub fn set_frozen(&mut self, phi: bool, classifier: bool, partition_head: bool) {
        self.phi.frozen = phi;
        self.classifier.frozen = classifier;
        self.partition_head.frozen = partition_head;
    }

    /// All parameter groups in checkpoint order.
    pub fn groups(&self) -> [&ParamGroup; 3] {
        [&self.phi, &self.classifier, &self.partition_head]
    }
}

/// Predicted labels from classifier logits: argmax, ties to label 0.
pub fn predict_labels(logits: &Tensor2) -> Vec<u8> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            if row[1] > row[0] {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Hard subset assignment from partition logits: per-row argmax, ties to
/// the lowest index.
pub fn hard_assignment(logits: &Tensor2) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, gradient_relative_error};

    fn cfg(feature_dim: usize, hidden: Vec<usize>, rep: usize, k: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            hidden_widths: hidden,
            rep_dim: rep,
            k,
        }
    }

    #[test]
    fn identity_config_extract_is_identity() {
        let bundle = init_bundle(&cfg(3, vec![], 3, 2), 1).unwrap();
        assert!(bundle.phi.tensors.is_empty());
        let x = Tensor2::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let z = bundle.extract(&x).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn zero_weights_give_zero_representation() {
        let mut bundle = init_bundle(&cfg(3, vec![4], 2, 2), 1).unwrap();
        for t in &mut bundle.phi.tensors {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let z = bundle.extract(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = cfg(5, vec![7], 4, 3);
        let a = init_bundle(&c, 42).unwrap();
        let b = init_bundle(&c, 42).unwrap();
        assert_eq!(a, b);
        let other = init_bundle(&c, 43).unwrap();
        assert_ne!(a, other);
        // bias zero, weights within the Glorot bound
        let bound0 = (6.0_f64 / 12.0).sqrt();
        assert!(a.phi.tensors[0].data().iter().all(|v| v.abs() <= bound0));
        assert!(a.phi.tensors[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_hand_case_and_tie_rule() {
        let mut bundle = init_bundle(&cfg(1, vec![], 1, 2), 1).unwrap();
        bundle.classifier.tensors[0] = Tensor2::from_rows(&[vec![1.0, -1.0]]).unwrap();
        bundle.classifier.tensors[1] = Tensor2::zeros(1, 2);
        let z = Tensor2::from_rows(&[vec![2.0]]).unwrap();
        let logits = bundle.classify(&z).unwrap();
        assert_eq!(logits.data(), &[2.0, -2.0]);
        assert_eq!(predict_labels(&logits), vec![0]);
        // tie -> 0
        assert_eq!(
            predict_labels(&Tensor2::from_rows(&[vec![0.0, 0.0]]).unwrap()),
            vec![0]
        );
    }

    #[test]
    fn permuting_rows_permutes_logits() {
        let bundle = init_bundle(&cfg(3, vec![4], 2, 2), 9).unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, 0.0, -1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let xp = Tensor2::from_rows(&[vec![2.0, 2.0, 2.0], vec![1.0, 0.0, -1.0]]).unwrap();
        let l = bundle.classify(&bundle.extract(&x).unwrap()).unwrap();
        let lp = bundle.classify(&bundle.extract(&xp).unwrap()).unwrap();
        assert_eq!(l.row(0), lp.row(1));
        assert_eq!(l.row(1), lp.row(0));
    }

    #[test]
    fn zero_partition_head_gives_uniform_soft_assignment() {
        let mut bundle = init_bundle(&cfg(2, vec![], 2, 4), 3).unwrap();
        for t in &mut bundle.partition_head.tensors {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let z = Tensor2::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let p = bundle.soft_assignment(&z).unwrap();
        for &v in p.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hard_assignment_argmax_and_tie_rules() {
        let l = Tensor2::from_rows(&[vec![0.2, 0.9], vec![0.5, 0.5]]).unwrap();
        assert_eq!(hard_assignment(&l), vec![1, 0]);
    }

    #[test]
    fn extract_gradients_match_finite_differences() {
        let bundle = init_bundle(&cfg(4, vec![5], 3, 2), 11).unwrap();
        let x = {
            let mut rng = crate::rng::substream(5, 99);
            let mut t = Tensor2::zeros(3, 4);
            for v in t.data_mut() {
                *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
            t
        };
        // objective: sum of squares of Z
        let (z, cache) = bundle.extract_cached(&x).unwrap();
        let mut d_z = z.clone();
        for v in d_z.data_mut() {
            *v *= 2.0;
        }
        let analytic = bundle.phi_backward(&cache, &d_z).unwrap();
        let numeric = finite_diff_grad(
            |params| {
                let mut b = bundle.clone();
                b.phi = params[0].clone();
                let z = b.extract(&x)?;
                Ok(z.data().iter().map(|v| v * v).sum())
            },
            &[bundle.phi.clone()],
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(numeric[0].iter()) {
            let err = gradient_relative_error(a.data(), n.data());
            assert!(err <= 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn frozen_phi_means_constant_extraction_under_head_updates() {
        use crate::numerics::{sgd_step, SgdConfig};
        let mut bundle = init_bundle(&cfg(3, vec![4], 2, 2), 21).unwrap();
        bundle.set_frozen(true, true, false);
        let x = Tensor2::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let z_before = bundle.extract(&x).unwrap();
        let grads = vec![
            bundle
                .partition_head
                .tensors
                .iter()
                .map(|t| {
                    let mut g = t.clone();
                    for v in g.data_mut() {
                        *v = 1.0;
                    }
                    g
                })
                .collect::<Vec<_>>(),
        ];
        sgd_step(
            &mut [&mut bundle.partition_head],
            &grads,
            &SgdConfig::new(0.1),
        )
        .unwrap();
        let z_after = bundle.extract(&x).unwrap();
        assert_eq!(z_before, z_after);
    }
}
