//! Loss terms of the joint objective and their analytic gradients.
//!
//! Classifier responses are softmax probabilities over all `L_T` classes.
//! Balance terms return gradients with respect to those probabilities; use
//! [`softmax_backward`](crate::numkit::softmax_backward) to reach the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{softmax_rows, Matrix};

/// Full classifier `Ŵ`, one bias-free row per class. Rows `0..known_count`
/// are the known classes; `known_count == rows` is the closed-set case.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub known_count: usize,
}

impl ClassifierHead {
    pub fn new(weights: Matrix, known_count: usize) -> Result<Self> {
        if known_count > weights.rows() {
            return Err(Error::Validation(format!(
                "head has {} rows but {known_count} known classes",
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            known_count,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_b: f64,
    pub lambda_g: f64,
    /// Gate threshold on `⟨p_s, p_t⟩`.
    pub tau: f64,
    /// Target unknown-class mass of the limited balance term.
    pub w: f64,
    /// Floor applied before logs and reciprocals.
    pub epsilon: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_d,
            self.lambda_b,
            self.lambda_g,
            self.tau,
            self.w,
            self.epsilon,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("loss weights must be finite".into()));
        }
        if self.lambda_d < 0.0 || self.lambda_b < 0.0 || self.lambda_g < 0.0 {
            return Err(Error::Validation(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(self.w > 0.0 && self.w < 1.0) {
            return Err(Error::Validation(format!("w = {} not in (0, 1)", self.w)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Validation("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `F · Ŵᵀ`.
pub fn logits(features: &Matrix, head: &ClassifierHead) -> Result<Matrix> {
    features.matmul_nt(&head.weights).map_err(|_| {
        Error::dims(
            "classifier_responses",
            format!(
                "features have {} columns, head has {}",
                features.cols(),
                head.dim()
            ),
        )
    })
}

/// `softmax(F · Ŵᵀ)` row-wise.
pub fn classifier_responses(features: &Matrix, head: &ClassifierHead) -> Result<Matrix> {
    Ok(softmax_rows(&logits(features, head)?))
}

#[derive(Clone, Debug)]
pub struct SgmdLoss {
    pub value: f64,
    pub grad_source: Matrix,
    pub grad_target: Matrix,
    /// Number of pairs whose gate is open.
    pub gated: usize,
}

/// Gated matching discrepancy over aligned pairs:
/// `(1/n) Σ_i ½‖f_i^s − f_i^t‖² · 𝟙(⟨p_i^s, p_i^t⟩ > τ)`.
///
/// The gate is a constant for differentiation; no gradient reaches `ps`/`pt`.
pub fn sgmd_loss(fs: &Matrix, ft: &Matrix, ps: &Matrix, pt: &Matrix, tau: f64) -> Result<SgmdLoss> {
    if fs.shape() != ft.shape() || ps.shape() != pt.shape() || fs.rows() != ps.rows() {
        return Err(Error::dims(
            "sgmd_loss",
            format!(
                "features {:?}/{:?}, responses {:?}/{:?}",
                fs.shape(),
                ft.shape(),
                ps.shape(),
                pt.shape()
            ),
        ));
    }
    let n = fs.rows();
    let mut grad_source = Matrix::zeros(n, fs.cols());
    let mut grad_target = Matrix::zeros(n, fs.cols());
    if n == 0 {
        return Ok(SgmdLoss {
            value: 0.0,
            grad_source,
            grad_target,
            gated: 0,
        });
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut gated = 0;
    for i in 0..n {
        let sim: f64 = ps.row(i).iter().zip(pt.row(i)).map(|(a, b)| a * b).sum();
        if sim <= tau {
            continue;
        }
        gated += 1;
        let (a, b) = (fs.row(i), ft.row(i));
        let mut d2 = 0.0;
        for j in 0..fs.cols() {
            let diff = a[j] - b[j];
            d2 += diff * diff;
            grad_source.set(i, j, diff * scale);
            grad_target.set(i, j, -diff * scale);
        }
        value += 0.5 * d2;
    }
    Ok(SgmdLoss {
        value: value * scale,
        grad_source,
        grad_target,
        gated,
    })
}

/// Per-instance probability mass on classes `known_count..`.
pub fn unknown_mass(pt: &Matrix, known_count: usize) -> Vec<f64> {
    (0..pt.rows())
        .map(|i| pt.row(i)[known_count..].iter().sum())
        .collect()
}

/// Shared shape of the two balance terms: a per-instance function of the
/// clamped unknown mass, averaged over the batch.
fn balance_by_mass(
    pt: &Matrix,
    known_count: usize,
    eps: f64,
    f: impl Fn(f64) -> (f64, f64),
) -> (f64, Matrix) {
    let n = pt.rows();
    let mut grad = Matrix::zeros(n, pt.cols());
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (i, r) in unknown_mass(pt, known_count).into_iter().enumerate() {
        let clamped = r.max(eps);
        let (value, d_r) = f(clamped);
        total += value;
        if r > eps {
            let g = d_r / n as f64;
            grad.row_mut(i)[known_count..]
                .iter_mut()
                .for_each(|v| *v = g);
        }
    }
    (total / n as f64, grad)
}

/// Mean of `−log max(R_i, eps)`. Gradient is with respect to `pt`.
pub fn balance_loss_vanilla(pt: &Matrix, known_count: usize, eps: f64) -> (f64, Matrix) {
    balance_by_mass(pt, known_count, eps, |r| (-r.ln(), -1.0 / r))
}

/// Value and `dL/dR` of `R + w²/R`.
pub fn limited_balance(r: f64, w: f64) -> (f64, f64) {
    (r + w * w / r, 1.0 - w * w / (r * r))
}

/// Mean of `R_i + w²/R_i` with `R_i` the clamped unknown mass.
/// Gradient is with respect to `pt`.
pub fn limited_balance_loss(pt: &Matrix, known_count: usize, w: f64, eps: f64) -> (f64, Matrix) {
    balance_by_mass(pt, known_count, eps, |r| limited_balance(r, w))
}

/// Mean `−log max(p_{i,y_i}, 1e-12)`. Gradient is with respect to `ps`.
pub fn cls_loss(ps: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    const FLOOR: f64 = 1e-12;
    check_labels(ps, labels, "cls_loss")?;
    let n = ps.rows();
    let mut grad = Matrix::zeros(n, ps.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = ps.get(i, y);
        total -= p.max(FLOOR).ln();
        if p > FLOOR {
            grad.set(i, y, -1.0 / (p * n as f64));
        }
    }
    Ok((total / n as f64, grad))
}

/// Cross-entropy computed from logits with a log-sum-exp, returning the
/// gradient with respect to the logits. Same objective as [`cls_loss`] on
/// `softmax(logits)` without the probability floor.
pub fn cross_entropy_logits(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels, "cross_entropy_logits")?;
    let n = logits.rows();
    let probs = softmax_rows(logits);
    let mut grad = probs.clone();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        grad.set(i, y, grad.get(i, y) - 1.0);
    }
    let scale = 1.0 / n as f64;
    Ok((total * scale, grad.scale(scale)))
}

fn check_labels(m: &Matrix, labels: &[usize], op: &'static str) -> Result<()> {
    if labels.len() != m.rows() {
        return Err(Error::dims(
            op,
            format!("{} labels for {} rows", labels.len(), m.rows()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m.cols()) {
        return Err(Error::Validation(format!(
            "label {y} out of range for {} classes",
            m.cols()
        )));
    }
    Ok(())
}

/// Scalar values of the four terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cls: f64,
    pub sgmd: f64,
    pub balance: f64,
    pub gcn: f64,
}

/// Anything gradients can be accumulated into.
pub trait Accumulate: Sized {
    fn zeros_like(&self) -> Self;
    fn add_scaled(&mut self, alpha: f64, other: &Self);
}

impl Accumulate for Matrix {
    fn zeros_like(&self) -> Self {
        Matrix::zeros(self.rows(), self.cols())
    }

    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        Matrix::add_scaled(self, alpha, other).expect("gradient shapes agree");
    }
}

/// `L_cls + λ_d L_d + λ_b L_b + λ_g L_gcn`, with gradients merged using the
/// same weights in that fixed order.
pub fn total_loss<G: Accumulate>(values: LossValues, grads: [&G; 4], lw: &LossWeights) -> (f64, G) {
    let weights = [1.0, lw.lambda_d, lw.lambda_b, lw.lambda_g];
    let scalars = [values.cls, values.sgmd, values.balance, values.gcn];
    let mut merged = grads[0].zeros_like();
    let mut total = 0.0;
    for ((w, v), g) in weights.iter().zip(scalars).zip(grads) {
        total += w * v;
        merged.add_scaled(*w, g);
    }
    (total, merged)
}
