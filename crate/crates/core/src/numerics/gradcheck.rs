//! Central finite differences over parameter groups and raw tensors.
//!
//! Test oracle for every analytic gradient in the crate; independent of
//! the backward passes it checks.

use super::{ParamGroup, Tensor2};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar objective w.r.t. every scalar
/// in `params`. Returns one gradient tensor per parameter tensor, in the
/// same group/tensor order.
pub fn finite_diff_grad<F>(
    mut objective: F,
    params: &[ParamGroup],
    epsilon: f64,
) -> Result<Vec<Vec<Tensor2>>>
where
    F: FnMut(&[ParamGroup]) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "finite_diff_grad: epsilon must be > 0, got {epsilon}"
        )));
    }
    let mut work: Vec<ParamGroup> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for gi in 0..params.len() {
        let mut group_grads = Vec::with_capacity(params[gi].tensors.len());
        for ti in 0..params[gi].tensors.len() {
            let (rows, cols) = params[gi].tensors[ti].shape();
            let mut g = Tensor2::zeros(rows, cols);
            for i in 0..rows * cols {
                let orig = work[gi].tensors[ti].data()[i];
                work[gi].tensors[ti].data_mut()[i] = orig + epsilon;
                let plus = check_finite(objective(&work)?)?;
                work[gi].tensors[ti].data_mut()[i] = orig - epsilon;
                let minus = check_finite(objective(&work)?)?;
                work[gi].tensors[ti].data_mut()[i] = orig;
                g.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
            }
            group_grads.push(g);
        }
        grads.push(group_grads);
    }
    Ok(grads)
}

/// Central-difference gradient w.r.t. a single input tensor.
pub fn finite_diff_grad_tensor<F>(mut objective: F, x: &Tensor2, epsilon: f64) -> Result<Tensor2>
where
    F: FnMut(&Tensor2) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "finite_diff_grad_tensor: epsilon must be > 0, got {epsilon}"
        )));
    }
    let mut work = x.clone();
    let mut g = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + epsilon;
        let plus = check_finite(objective(&work)?)?;
        work.data_mut()[i] = orig - epsilon;
        let minus = check_finite(objective(&work)?)?;
        work.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(g)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!(
            "objective returned non-finite value {v}"
        )))
    }
}

/// Relative error between an analytic and a numerical gradient:
/// ||a - n|| / max(||a|| + ||n||, floor). Zero when both are zero.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom < 1e-12 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // objective = theta^2 at theta = 3 -> derivative 6
        let group = ParamGroup::new("theta", vec![Tensor2::from_vec(1, 1, vec![3.0]).unwrap()]);
        let grads = finite_diff_grad(
            |p| Ok(p[0].tensors[0].data()[0].powi(2)),
            &[group],
            1e-5,
        )
        .unwrap();
        assert!((grads[0][0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_objective_gives_zero_gradient() {
        let group = ParamGroup::new(
            "p",
            vec![Tensor2::from_vec(2, 2, vec![0.1, -0.4, 2.0, 7.0]).unwrap()],
        );
        let grads = finite_diff_grad(|_| Ok(42.0), &[group], 1e-5).unwrap();
        for g in grads[0][0].data() {
            assert!(g.abs() < 1e-9);
        }
    }

    #[test]
    fn linear_objective_gives_ones() {
        let group = ParamGroup::new(
            "p",
            vec![Tensor2::from_vec(1, 3, vec![0.3, -1.2, 5.5]).unwrap()],
        );
        let grads = finite_diff_grad(
            |p| Ok(p[0].tensors[0].data().iter().sum()),
            &[group],
            1e-5,
        )
        .unwrap();
        for g in grads[0][0].data() {
            assert!((g - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let group = ParamGroup::new("p", vec![Tensor2::from_vec(1, 1, vec![0.0]).unwrap()]);
        let r = finite_diff_grad(|_| Ok(f64::NAN), &[group], 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
