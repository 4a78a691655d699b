//! Minimal deterministic differentiable kernel.
//!
//! Dense row-major f64 matrices, affine layers, activations and the
//! reductions the loss layer needs, each with an analytic backward pass.
//! Everything here is a pure function of its inputs; no internal state.

mod gradcheck;
mod sgd;

pub use gradcheck::{finite_diff_grad, finite_diff_grad_tensor, gradient_relative_error};
pub use sgd::{sgd_step, SgdConfig};

use crate::error::{Error, Result};

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "Tensor2::from_vec",
                format!("{} values for {}x{}", rows * cols, rows, cols),
                data.len(),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Data("Tensor2::from_rows: no rows".into()));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::dimension(
                    "Tensor2::from_rows",
                    format!("row length {c}"),
                    format!("row {i} has length {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2 { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Named group of parameter tensors with a freeze flag.
///
/// Frozen groups receive zero-magnitude updates from any optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<Tensor2>,
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: &str, tensors: Vec<Tensor2>) -> Self {
        ParamGroup {
            name: name.to_string(),
            tensors,
            frozen: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }
}

/// Y = X . W + b, with b broadcast over rows.
///
/// W is (in, out), b is (1, out), X is (batch, in).
pub fn affine_forward(w: &Tensor2, b: &Tensor2, x: &Tensor2) -> Result<Tensor2> {
    if x.cols != w.rows {
        return Err(Error::dimension(
            "affine_forward",
            format!("X cols = W rows, X is {}x{}", x.rows, x.cols),
            format!("W is {}x{}", w.rows, w.cols),
        ));
    }
    if b.rows != 1 || b.cols != w.cols {
        return Err(Error::dimension(
            "affine_forward",
            format!("bias 1x{}", w.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Tensor2::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        let xr = x.row(r);
        let or = out.row_mut(r);
        or.copy_from_slice(b.row(0));
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = w.row(i);
            for (o, &wv) in or.iter_mut().zip(wr.iter()) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Backward pass of `affine_forward`: returns (dW, db, dX).
pub fn affine_backward(
    w: &Tensor2,
    x: &Tensor2,
    d_out: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    if d_out.rows != x.rows || d_out.cols != w.cols {
        return Err(Error::dimension(
            "affine_backward",
            format!("{}x{}", x.rows, w.cols),
            format!("{}x{}", d_out.rows, d_out.cols),
        ));
    }
    let mut dw = Tensor2::zeros(w.rows, w.cols);
    let mut db = Tensor2::zeros(1, w.cols);
    let mut dx = Tensor2::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let gr = d_out.row(r);
        let xr = x.row(r);
        for (dbv, &gv) in db.row_mut(0).iter_mut().zip(gr.iter()) {
            *dbv += gv;
        }
        for i in 0..x.cols {
            let xv = xr[i];
            let dwr = dw.row_mut(i);
            let mut acc = 0.0;
            let wr = w.row(i);
            for c in 0..w.cols {
                dwr[c] += xv * gr[c];
                acc += gr[c] * wr[c];
            }
            dx.set(r, i, acc);
        }
    }
    Ok((dw, db, dx))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Result<Tensor2> {
    if !x.is_finite() {
        return Err(Error::Evaluation("softmax_rows input not finite".into()));
    }
    let mut out = Tensor2::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let xr = x.row(r);
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let or = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Backward pass of `softmax_rows`: given P = softmax(X) and dL/dP, returns dL/dX.
pub fn softmax_backward(p: &Tensor2, d_p: &Tensor2) -> Result<Tensor2> {
    if p.shape() != d_p.shape() {
        return Err(Error::dimension(
            "softmax_backward",
            format!("{:?}", p.shape()),
            format!("{:?}", d_p.shape()),
        ));
    }
    let mut dx = Tensor2::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let pr = p.row(r);
        let gr = d_p.row(r);
        let dot: f64 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        let dr = dx.row_mut(r);
        for c in 0..p.cols {
            dr[c] = pr[c] * (gr[c] - dot);
        }
    }
    Ok(dx)
}

/// Normalize each row to unit L2 norm; rows with norm below `eps` pass through.
pub fn l2_normalize_rows(x: &Tensor2, eps: f64) -> Result<Tensor2> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("l2_normalize_rows: eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n >= eps {
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
    }
    Ok(out)
}

/// Element-wise max(0, x).
pub fn relu(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward pass of `relu`: masks d_out where the pre-activation was <= 0.
pub fn relu_backward(pre: &Tensor2, d_out: &Tensor2) -> Result<Tensor2> {
    if pre.shape() != d_out.shape() {
        return Err(Error::dimension(
            "relu_backward",
            format!("{:?}", pre.shape()),
            format!("{:?}", d_out.shape()),
        ));
    }
    let mut dx = d_out.clone();
    for (d, &p) in dx.data_mut().iter_mut().zip(pre.data().iter()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(dx)
}

/// Population variance (divide by n). Empty input gives 0.
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity() {
        let w = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = t(&[vec![0.0, 0.0]]);
        let x = t(&[vec![3.0, 4.0]]);
        let y = affine_forward(&w, &b, &x).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_case() {
        let w = t(&[vec![1.0], vec![1.0]]);
        let b = t(&[vec![1.0]]);
        let x = t(&[vec![2.0, 3.0]]);
        let y = affine_forward(&w, &b, &x).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn affine_zero_weight_broadcasts_bias() {
        let w = Tensor2::zeros(3, 2);
        let b = t(&[vec![5.0, 5.0]]);
        let x = t(&[vec![1.0, -2.0, 0.5], vec![9.0, 9.0, 9.0]]);
        let y = affine_forward(&w, &b, &x).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &[5.0, 5.0]);
        }
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let w = Tensor2::zeros(3, 2);
        let b = t(&[vec![0.0, 0.0]]);
        let x = t(&[vec![1.0, 2.0]]);
        let err = affine_forward(&w, &b, &x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x2") && msg.contains("3x2"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let s = softmax_rows(&t(&[vec![0.0, 0.0]])).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        let s = softmax_rows(&t(&[vec![1000.0, 1000.0]])).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_hand_case() {
        let s = softmax_rows(&t(&[vec![0.0, 3.0_f64.ln()]])).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[vec![0.3, -7.0, 2.2], vec![123.0, 122.0, 125.0]]);
        let s = softmax_rows(&x).unwrap();
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_hand_case() {
        let n = l2_normalize_rows(&t(&[vec![3.0, 4.0]]), 1e-12).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_degenerate_row_passthrough() {
        let n = l2_normalize_rows(&t(&[vec![0.0, 0.0]]), 1e-12).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_idempotent_on_unit_rows() {
        let x = t(&[vec![0.6, 0.8]]);
        let n = l2_normalize_rows(&x, 1e-12).unwrap();
        for (a, b) in n.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let w = t(&[vec![0.3, -0.7], vec![1.1, 0.2], vec![-0.4, 0.9]]);
        let b = t(&[vec![0.1, -0.2]]);
        let x = t(&[vec![1.0, 2.0, -1.0], vec![0.5, -0.3, 0.8]]);
        // objective: sum of squares of outputs
        let obj = |w_: &Tensor2, b_: &Tensor2, x_: &Tensor2| -> f64 {
            let y = affine_forward(w_, b_, x_).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>()
        };
        let y = affine_forward(&w, &b, &x).unwrap();
        let mut d_out = y.clone();
        for v in d_out.data_mut() {
            *v *= 2.0;
        }
        let (dw, db, dx) = affine_backward(&w, &x, &d_out).unwrap();
        let eps = 1e-6;
        for i in 0..w.data().len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let num = (obj(&wp, &b, &x) - obj(&wm, &b, &x)) / (2.0 * eps);
            assert!((num - dw.data()[i]).abs() < 1e-6, "dW[{i}]");
        }
        for i in 0..b.data().len() {
            let mut bp = b.clone();
            bp.data_mut()[i] += eps;
            let mut bm = b.clone();
            bm.data_mut()[i] -= eps;
            let num = (obj(&w, &bp, &x) - obj(&w, &bm, &x)) / (2.0 * eps);
            assert!((num - db.data()[i]).abs() < 1e-6, "db[{i}]");
        }
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (obj(&w, &b, &xp) - obj(&w, &b, &xm)) / (2.0 * eps);
            assert!((num - dx.data()[i]).abs() < 1e-6, "dx[{i}]");
        }
    }

    #[test]
    fn population_variance_of_constant_is_zero() {
        assert_eq!(population_variance(&[2.5, 2.5, 2.5]), 0.0);
        assert_eq!(population_variance(&[]), 0.0);
        // hand case: [0, 2] -> mean 1, var 1
        assert!((population_variance(&[0.0, 2.0]) - 1.0).abs() < 1e-15);
    }
}
