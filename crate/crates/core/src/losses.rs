//! Training losses and the gradient-surgery combination rule.
//!
//! * Quantile regression with a Huber penalty on joint return samples.
//! * Empirical barrier values from per-step ally deaths, computed backwards:
//!   `B(s_t) = deaths_t + γ_B · B(s_{t+1})`, zero after the terminal step.
//! * Barrier invariance penalty `max(B̂(s') − (1 − λ_B) B̂(s), 0)` summed over
//!   consecutive visited states and divided by the number of visited states.
//! * Projection-based combination of the return and barrier gradients when
//!   they point in conflicting directions.

use thiserror::Error;

use crate::diffcore::{huber, DiffError, GradientVector, Tape, Tensor, Var};
use crate::mixnet::JointQuantileBatch;

/// Huber threshold used throughout training.
pub const DEFAULT_KAPPA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("{name} = {value} is outside its valid range")]
    Range { name: &'static str, value: f64 },
    #[error("barrier invariance needs at least two states, got {0}")]
    TooShort(usize),
}

fn check_open_unit(name: &'static str, value: f64) -> Result<(), LossError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(LossError::Range { name, value })
    }
}

/// Asymmetric weight `|τ − 1{δ < 0}|`.
fn quantile_weight(tau: f64, delta: f64) -> f64 {
    (tau - if delta < 0.0 { 1.0 } else { 0.0 }).abs()
}

/// `(1/(K·K′)) Σ_{k,k′} |τ_k − 1{δ<0}| · Huber_κ(δ)/κ` with
/// `δ = target[k′] − pred[k]`.
pub fn huber_quantile_loss(pred: &JointQuantileBatch, target: &[f64], kappa: f64) -> Result<f64, LossError> {
    if pred.values.is_empty() {
        return Err(LossError::Empty("prediction batch"));
    }
    if target.is_empty() {
        return Err(LossError::Empty("target batch"));
    }
    if pred.taus.len() != pred.values.len() {
        return Err(LossError::Length { left: pred.taus.len(), right: pred.values.len() });
    }
    if !(kappa > 0.0) {
        return Err(LossError::Range { name: "kappa", value: kappa });
    }
    let mut total = 0.0;
    for (&tau, &p) in pred.taus.iter().zip(&pred.values) {
        for &t in target {
            let delta = t - p;
            total += quantile_weight(tau, delta) * huber(delta, kappa) / kappa;
        }
    }
    Ok(total / (pred.values.len() * target.len()) as f64)
}

/// Tape form of [`huber_quantile_loss`] averaged over rows.
///
/// `pred` is `[R, K]` with levels `taus`, `targets` is `[R, K′]`. Each row
/// contributes with weight `row_weights[r]` (0 masks padding); the result is
/// normalized by `K·K′·Σ row_weights`.
pub fn huber_quantile_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    taus: &[f64],
    targets: &Tensor,
    row_weights: &[f64],
    kappa: f64,
) -> Result<Var, LossError> {
    let (rows, k) = (tape.value(pred).rows(), tape.value(pred).cols());
    let kt = targets.cols();
    if taus.len() != k {
        return Err(LossError::Length { left: taus.len(), right: k });
    }
    if targets.rows() != rows || row_weights.len() != rows {
        return Err(LossError::Length { left: rows, right: targets.rows().min(row_weights.len()) });
    }
    if k == 0 || kt == 0 || rows == 0 {
        return Err(LossError::Empty("quantile batch"));
    }
    let norm: f64 = row_weights.iter().sum::<f64>() * (k * kt) as f64;
    if !(norm > 0.0) {
        return Err(LossError::Empty("unmasked rows"));
    }
    // pairwise residuals as [R·K, K′]
    let pred_col = tape.reshape(pred, rows * k, 1)?;
    let tgt = Tensor::from_fn(rows * k, kt, |r, j| targets.get(r / k, j));
    let tgt_v = tape.constant(tgt);
    let delta = tape.sub(tgt_v, pred_col)?;
    let dv = tape.value(delta).clone();
    let weights = Tensor::from_fn(rows * k, kt, |r, j| {
        row_weights[r / k] * quantile_weight(taus[r % k], dv.get(r, j)) / (kappa * norm)
    });
    let h = tape.huber(delta, kappa)?;
    let w = tape.constant(weights);
    let weighted = tape.mul(h, w)?;
    Ok(tape.sum_all(weighted))
}

/// Backward recursion `out[t] = deaths[t] + γ_B · out[t+1]`, boundary 0.
pub fn empirical_barrier(deaths: &[usize], gamma_b: f64) -> Result<Vec<f64>, LossError> {
    if deaths.is_empty() {
        return Err(LossError::Empty("death sequence"));
    }
    check_open_unit("gamma_b", gamma_b)?;
    let mut out = vec![0.0; deaths.len()];
    let mut next = 0.0;
    for t in (0..deaths.len()).rev() {
        next = deaths[t] as f64 + gamma_b * next;
        out[t] = next;
    }
    Ok(out)
}

/// `(1/|S|) Σ_t max(B̂[t+1] − (1 − λ_B)·B̂[t], 0)` over a visited-state sequence.
pub fn barrier_invariance_loss(predicted: &[f64], lambda_b: f64) -> Result<f64, LossError> {
    if predicted.len() < 2 {
        return Err(LossError::TooShort(predicted.len()));
    }
    check_open_unit("lambda_b", lambda_b)?;
    let total: f64 = predicted.windows(2).map(|w| (w[1] - (1.0 - lambda_b) * w[0]).max(0.0)).sum();
    Ok(total / predicted.len() as f64)
}

/// Tape form of [`barrier_invariance_loss`]; `predicted` is `[T, 1]`.
pub fn barrier_invariance_on_tape(tape: &mut Tape, predicted: Var, lambda_b: f64) -> Result<Var, LossError> {
    let t = tape.value(predicted).rows();
    if t < 2 {
        return Err(LossError::TooShort(t));
    }
    check_open_unit("lambda_b", lambda_b)?;
    let decay = 1.0 - lambda_b;
    // row r of the operator picks B̂[r+1] − decay·B̂[r]
    let op = Tensor::from_fn(t - 1, t, |r, c| {
        if c == r + 1 {
            1.0
        } else if c == r {
            -decay
        } else {
            0.0
        }
    });
    let op = tape.constant(op);
    let diff = tape.matmul(op, predicted)?;
    let hinge = tape.relu(diff);
    let s = tape.sum_all(hinge);
    Ok(tape.scale(s, 1.0 / t as f64))
}

/// Mean squared error between predicted and empirical barrier values.
pub fn barrier_regression_loss(predicted: &[f64], empirical: &[f64]) -> Result<f64, LossError> {
    if predicted.len() != empirical.len() {
        return Err(LossError::Length { left: predicted.len(), right: empirical.len() });
    }
    if predicted.is_empty() {
        return Err(LossError::Empty("barrier sequence"));
    }
    let sse: f64 = predicted.iter().zip(empirical).map(|(p, e)| (p - e) * (p - e)).sum();
    Ok(sse / predicted.len() as f64)
}

/// Tape form of [`barrier_regression_loss`]; `predicted` is `[T, 1]`.
pub fn barrier_regression_on_tape(tape: &mut Tape, predicted: Var, empirical: &[f64]) -> Result<Var, LossError> {
    let t = tape.value(predicted).rows();
    if t != empirical.len() {
        return Err(LossError::Length { left: t, right: empirical.len() });
    }
    if t == 0 {
        return Err(LossError::Empty("barrier sequence"));
    }
    let target = tape.constant(Tensor::column(empirical.to_vec()));
    let d = tape.sub(predicted, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Weights for the two gradient-combination branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CombineWeights {
    pub beta_q: f64,
    pub beta_b: f64,
    pub beta_q_plus: f64,
    pub beta_b_plus: f64,
}

impl Default for CombineWeights {
    fn default() -> Self {
        Self { beta_q: 0.5, beta_b: 0.5, beta_q_plus: 0.5, beta_b_plus: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub g_q: GradientVector,
    pub g_b: GradientVector,
    pub weights: CombineWeights,
}

impl GradientPair {
    /// Cosine of the angle between the two gradients; `None` if either is zero.
    pub fn cos_theta(&self) -> Option<f64> {
        let nq = self.g_q.norm();
        let nb = self.g_b.norm();
        (nq > 0.0 && nb > 0.0).then(|| (self.g_q.dot(&self.g_b) / (nq * nb)).clamp(-1.0, 1.0))
    }

    pub fn conflicting(&self) -> bool {
        self.g_q.dot(&self.g_b) < 0.0
    }
}

/// Result of [`pcgrad_combine`].
#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub gradient: GradientVector,
    /// True when the angle between the gradients exceeded 90°.
    pub conflict: bool,
}

/// `g_a` projected onto the normal plane of `g_b`.
pub fn project_out(g_a: &GradientVector, g_b: &GradientVector) -> GradientVector {
    let mut out = g_a.clone();
    let nb = g_b.norm_sq();
    if nb > 0.0 {
        out.add_scaled(-g_a.dot(g_b) / nb, g_b);
    }
    out
}

/// Combines the return and barrier gradients.
///
/// Conflicting (`g_Q·g_B < 0`): `β_Q⁺·g_Q⁺ + β_B⁺·g_B⁺`, each gradient
/// projected onto the other's normal plane. Otherwise `β_Q·g_Q + β_B·g_B`.
/// A zero gradient on either side yields the weighted other one.
pub fn pcgrad_combine(pair: &GradientPair) -> Result<Combined, LossError> {
    let (g_q, g_b, w) = (&pair.g_q, &pair.g_b, pair.weights);
    if g_q.len() != g_b.len() {
        return Err(LossError::Length { left: g_q.len(), right: g_b.len() });
    }
    if g_b.is_zero() {
        return Ok(Combined { gradient: g_q.scaled(w.beta_q), conflict: false });
    }
    if g_q.is_zero() {
        return Ok(Combined { gradient: g_b.scaled(w.beta_b), conflict: false });
    }
    if pair.conflicting() {
        let q_plus = project_out(g_q, g_b);
        let b_plus = project_out(g_b, g_q);
        let mut g = q_plus.scaled(w.beta_q_plus);
        g.add_scaled(w.beta_b_plus, &b_plus);
        Ok(Combined { gradient: g, conflict: true })
    } else {
        let mut g = g_q.scaled(w.beta_q);
        g.add_scaled(w.beta_b, g_b);
        Ok(Combined { gradient: g, conflict: false })
    }
}

/// Per-update loss bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_q: f64,
    pub l_b: f64,
    pub grad_norm: f64,
    pub conflict: bool,
}
