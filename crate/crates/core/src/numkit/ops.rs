//! Elementwise nonlinearities and row-wise softmax.

use super::Matrix;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `dz_ij = p_ij (dp_ij − Σ_k dp_ik p_ik)`.
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Matrix {
    assert_eq!(probs.shape(), grad_probs.shape());
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - dot);
        }
    }
    out
}

/// Elementwise `max(x, slope·x)` for `slope` in `[0, 1]`.
pub fn leaky_relu(m: &Matrix, slope: f64) -> Matrix {
    debug_assert!(slope >= 0.0);
    m.map(|x| if x > 0.0 { x } else { slope * x })
}

/// Derivative of [`leaky_relu`] at each entry. At exactly zero the slope is used.
pub fn leaky_relu_grad(pre: &Matrix, slope: f64) -> Matrix {
    pre.map(|x| if x > 0.0 { 1.0 } else { slope })
}
