//! Centralized mixer.
//!
//! Joint return samples are assembled from the agents' local utilities as
//!
//! ```text
//! Z_joint[k] = Σᵢ Vᵢ + Σᵢ λᵢ·Aᵢ + Σᵢ (Zᵢ[k] − Qᵢ)
//! ```
//!
//! where the first two sums form the mean path and the last one is the
//! zero-mean shape path. `λᵢ = softplus(·) + λ_min` stays strictly positive, so
//! per-agent greedy actions maximize the joint mean.
//!
//! A barrier head on the shared state encoder predicts the barrier value of a
//! state for the safety loss.

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};

/// Floor added to every mixing weight.
pub const LAMBDA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("agent {agent} supplies {got} samples, expected {expected}")]
    SampleCount { agent: usize, expected: usize, got: usize },
    #[error("mixer inputs disagree on agent count")]
    AgentCount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerConfig {
    pub state_len: usize,
    /// Width of the per-agent summary concatenated to the state.
    pub summary_len: usize,
    /// Per-agent feature length (observation input).
    pub agent_feature_len: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub embed_dim: usize,
    pub lambda_hidden: usize,
}

/// Joint return samples at shared levels.
#[derive(Clone, Debug, PartialEq)]
pub struct JointQuantileBatch {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
}

impl JointQuantileBatch {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct MixerNet {
    pub config: MixerConfig,
    enc_w: ParamId,
    enc_b: ParamId,
    lam_w1: ParamId,
    lam_b1: ParamId,
    lam_w2: ParamId,
    lam_b2: ParamId,
    bar_w: ParamId,
    bar_b: ParamId,
}

impl MixerNet {
    pub fn new<R: Rng>(config: MixerConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let enc_in = config.state_len + config.summary_len;
        let e = config.embed_dim;
        let lam_in = e + config.agent_feature_len + config.n_actions;
        let m = config.lambda_hidden;
        let enc_w = store.register_uniform("mixer.enc_w", enc_in, e, 1.0 / (enc_in as f64).sqrt(), rng);
        let enc_b = store.register_zeros("mixer.enc_b", 1, e);
        let lam_w1 = store.register_uniform("mixer.lam_w1", lam_in, m, 1.0 / (lam_in as f64).sqrt(), rng);
        let lam_b1 = store.register_zeros("mixer.lam_b1", 1, m);
        let lam_w2 = store.register_uniform("mixer.lam_w2", m, 1, 1.0 / (m as f64).sqrt(), rng);
        let lam_b2 = store.register_zeros("mixer.lam_b2", 1, 1);
        let bar_w = store.register_uniform("mixer.bar_w", e, 1, 1.0 / (e as f64).sqrt(), rng);
        let bar_b = store.register_zeros("mixer.bar_b", 1, 1);
        Self { config, enc_w, enc_b, lam_w1, lam_b1, lam_w2, lam_b2, bar_w, bar_b }
    }

    /// Every mixer parameter, for tests that zero or perturb them.
    pub fn params(&self) -> [ParamId; 8] {
        [self.enc_w, self.enc_b, self.lam_w1, self.lam_b1, self.lam_w2, self.lam_b2, self.bar_w, self.bar_b]
    }

    /// Shared encoder over `[state, summary]`, `[B, embed_dim]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, state: Var, summary: Var) -> Result<Var, DiffError> {
        let x = tape.concat_cols(&[state, summary])?;
        let w = tape.param(store, self.enc_w);
        let b = tape.param(store, self.enc_b);
        let h = tape.matmul(x, w)?;
        let h = tape.add(h, b)?;
        Ok(tape.relu(h))
    }

    /// Positive mixing weights, one per agent row. `encoded` is `[B, E]`;
    /// `features` and `actions_onehot` are `[B·n, ·]` in (row, agent) order.
    pub fn lambda_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: Var,
        features: Var,
        actions_onehot: Var,
    ) -> Result<Var, DiffError> {
        let rep = tape.repeat_rows(encoded, self.config.n_agents)?;
        let x = tape.concat_cols(&[rep, features, actions_onehot])?;
        let w1 = tape.param(store, self.lam_w1);
        let b1 = tape.param(store, self.lam_b1);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let w2 = tape.param(store, self.lam_w2);
        let b2 = tape.param(store, self.lam_b2);
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, b2)?;
        let sp = tape.softplus(o);
        Ok(tape.add_scalar(sp, LAMBDA_MIN))
    }

    /// Predicted barrier value per row of `encoded`, `[B, 1]`.
    pub fn predict_barrier(&self, tape: &mut Tape, store: &ParamStore, encoded: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, self.bar_w);
        let b = tape.param(store, self.bar_b);
        let o = tape.matmul(encoded, w)?;
        tape.add(o, b)
    }

    /// Off-tape barrier prediction for a single state.
    pub fn barrier_value(&self, store: &ParamStore, state: &[f64], summary: &[f64]) -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(state.to_vec()));
        let h = tape.constant(Tensor::row(summary.to_vec()));
        let e = self.encode(&mut tape, store, s, h)?;
        let b = self.predict_barrier(&mut tape, store, e)?;
        Ok(tape.value(b).item())
    }

    /// Off-tape mixing weights for one state and joint action.
    pub fn lambda_values(
        &self,
        store: &ParamStore,
        state: &[f64],
        summary: &[f64],
        features: &[Vec<f64>],
        actions: &[usize],
    ) -> Result<Vec<f64>, MixError> {
        let n = self.config.n_agents;
        if features.len() != n || actions.len() != n {
            return Err(MixError::AgentCount);
        }
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(state.to_vec()));
        let h = tape.constant(Tensor::row(summary.to_vec()));
        let e = self.encode(&mut tape, store, s, h)?;
        let f = tape.constant(Tensor::matrix(n, self.config.agent_feature_len, features.concat())?);
        let u = tape.constant(one_hot(actions, self.config.n_actions));
        let l = self.lambda_weights(&mut tape, store, e, f, u)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Joint samples on the tape.
    ///
    /// `q` is `[B·n, U]` and `z` is `[B·n·K, U]` from the policy, `lambda` is
    /// `[B·n, 1]`, `legal_mask` holds 0 for legal and a large negative value
    /// for illegal actions. Returns `[B, K]`.
    #[allow(clippy::too_many_arguments)]
    pub fn mix_on_tape(
        &self,
        tape: &mut Tape,
        q: Var,
        z: Var,
        lambda: Var,
        legal_mask: Var,
        actions: &[usize],
        k: usize,
    ) -> Result<Var, DiffError> {
        let n = self.config.n_agents;
        let rows = tape.value(q).rows();
        let b = rows / n;
        let masked = tape.add(q, legal_mask)?;
        let v = tape.max_axis(masked, crate::diffcore::Axis::Cols);
        let q_taken = tape.gather(q, actions)?;
        let adv = tape.sub(q_taken, v)?;
        let weighted = tape.mul(lambda, adv)?;
        let mean_terms = tape.add(v, weighted)?;
        let mean_terms = tape.reshape(mean_terms, b, n)?;
        let mean_path = tape.sum_axis(mean_terms, crate::diffcore::Axis::Cols);

        let rep_actions: Vec<usize> = actions.iter().flat_map(|&a| std::iter::repeat(a).take(k)).collect();
        let z_taken = tape.gather(z, &rep_actions)?;
        let q_rep = tape.repeat_rows(q_taken, k)?;
        let shape = tape.sub(z_taken, q_rep)?;
        let shape = tape.reshape(shape, b, n * k)?;
        let summer = tape.constant(Tensor::from_fn(n * k, k, |r, c| if r % k == c { 1.0 } else { 0.0 }));
        let shape = tape.matmul(shape, summer)?;
        tape.add(shape, mean_path)
    }
}

pub fn one_hot(actions: &[usize], n_actions: usize) -> Tensor {
    Tensor::from_fn(actions.len(), n_actions, |r, c| if actions[r] == c { 1.0 } else { 0.0 })
}

/// Off-tape mixing of chosen-action samples:
/// `out[k] = Σᵢ vᵢ + Σᵢ λᵢ·aᵢ + Σᵢ (zᵢ[k] − qᵢ)`.
pub fn mix_joint_distribution(
    v: &[f64],
    a: &[f64],
    lambda: &[f64],
    z: &[Vec<f64>],
    q: &[f64],
    taus: &[f64],
) -> Result<JointQuantileBatch, MixError> {
    let n = v.len();
    if a.len() != n || lambda.len() != n || z.len() != n || q.len() != n {
        return Err(MixError::AgentCount);
    }
    let k = taus.len();
    for (agent, zi) in z.iter().enumerate() {
        if zi.len() != k {
            return Err(MixError::SampleCount { agent, expected: k, got: zi.len() });
        }
    }
    let mean_path: f64 = (0..n).map(|i| v[i] + lambda[i] * a[i]).sum();
    let values = (0..k).map(|j| mean_path + (0..n).map(|i| z[i][j] - q[i]).sum::<f64>()).collect();
    Ok(JointQuantileBatch { taus: taus.to_vec(), values })
}
