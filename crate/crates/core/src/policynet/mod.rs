//! Per-agent quantile return network.
//!
//! Data flow for one agent at one step:
//!
//! 1. A hypernetwork maps the previous step's return quantiles to the input
//!    layer's weight matrix; a ReLU keeps every generated weight non-negative.
//! 2. The observation (with the agent one-hot appended) passes through that
//!    generated layer and a gated recurrent cell.
//! 3. Quantile levels are embedded with a cosine basis and multiplied into the
//!    recurrent state; a linear head yields one sample per action and level.
//!
//! All agents share one parameter set.

pub mod checkpoint;

use std::f64::consts::PI;

use rand::Rng;
use thiserror::Error;

use crate::battlegrid::Observation;
use crate::diffcore::{argmax, DiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("quantile level {0} is outside (0, 1)")]
    BadTau(f64),
    #[error("no legal action available")]
    NoLegalAction,
    #[error("observation has length {got}, expected {expected}")]
    ObsLength { expected: usize, got: usize },
    #[error("epsilon {0} is outside [0, 1]")]
    BadEpsilon(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    /// Environment observation length, without the agent one-hot.
    pub env_obs_len: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    /// Width of the hypernetwork-generated input layer.
    pub hidden_dim: usize,
    pub rnn_hidden_dim: usize,
    /// Size of the cosine basis for quantile levels.
    pub embed_dim: usize,
    /// Length of the previous-return summary fed to the hypernetwork.
    pub n_quantiles: usize,
}

impl PolicyConfig {
    pub fn input_len(&self) -> usize {
        self.env_obs_len + self.n_agents
    }
}

/// Sampled returns of one agent: `values[k][u]` is the sample at level
/// `taus[k]` for action `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileBatch {
    pub taus: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl QuantileBatch {
    pub fn n_actions(&self) -> usize {
        self.values.first().map_or(0, |r| r.len())
    }

    /// Mean over levels per action.
    pub fn q_values(&self) -> Vec<f64> {
        let k = self.values.len() as f64;
        (0..self.n_actions()).map(|u| self.values.iter().map(|r| r[u]).sum::<f64>() / k).collect()
    }

    /// Samples for one action, in level order.
    pub fn action_samples(&self, action: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[action]).collect()
    }
}

/// Recurrent activation; zero at the start of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

/// Draws `k` sorted quantile levels strictly inside (0, 1).
pub fn sample_taus<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut taus: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * (1.0 - 2e-9) + 1e-9).collect();
    taus.sort_by(f64::total_cmp);
    taus
}

/// Observation with the agent one-hot appended.
pub fn agent_input(obs: &Observation, agent: usize, n_agents: usize) -> Vec<f64> {
    let mut v = obs.0.clone();
    v.extend((0..n_agents).map(|i| if i == agent { 1.0 } else { 0.0 }));
    v
}

/// Tape handles produced by one forward step over a batch of `B` rows.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[B·K, U]`, rows ordered (row, level).
    pub z: Var,
    /// `[B, U]`, mean of `z` over levels.
    pub q: Var,
    /// `[B, rnn_hidden_dim]`
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    hyper_w: ParamId,
    hyper_b: ParamId,
    in_b: ParamId,
    gru_wx: ParamId,
    gru_wh: ParamId,
    gru_bx: ParamId,
    gru_bh: ParamId,
    phi_w: ParamId,
    phi_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl PolicyNet {
    pub fn new<R: Rng>(config: PolicyConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let inp = config.input_len();
        let hid = config.hidden_dim;
        let rnn = config.rnn_hidden_dim;
        let d = config.embed_dim;
        let k = config.n_quantiles;
        let s_in = 1.0 / (inp as f64).sqrt();
        let s_rnn = 1.0 / (rnn as f64).sqrt();
        let hyper_w = store.register_uniform("policy.hyper_w", k, hid * inp, 0.1 * s_in, rng);
        let hyper_b = store.register_uniform("policy.hyper_b", 1, hid * inp, s_in, rng);
        let in_b = store.register_uniform("policy.in_b", 1, hid, s_in, rng);
        let gru_wx = store.register_uniform("policy.gru_wx", hid, 3 * rnn, 1.0 / (hid as f64).sqrt(), rng);
        let gru_wh = store.register_uniform("policy.gru_wh", rnn, 3 * rnn, s_rnn, rng);
        let gru_bx = store.register_uniform("policy.gru_bx", 1, 3 * rnn, s_rnn, rng);
        let gru_bh = store.register_uniform("policy.gru_bh", 1, 3 * rnn, s_rnn, rng);
        let phi_w = store.register_uniform("policy.phi_w", d, rnn, 1.0 / (d as f64).sqrt(), rng);
        let phi_b = store.register_uniform("policy.phi_b", 1, rnn, 1.0 / (d as f64).sqrt(), rng);
        let out_w = store.register_uniform("policy.out_w", rnn, config.n_actions, s_rnn, rng);
        let out_b = store.register_zeros("policy.out_b", 1, config.n_actions);
        Self { config, hyper_w, hyper_b, in_b, gru_wx, gru_wh, gru_bx, gru_bh, phi_w, phi_b, out_w, out_b }
    }

    pub fn hyper_params(&self) -> (ParamId, ParamId) {
        (self.hyper_w, self.hyper_b)
    }

    /// Generated input-layer weights, one row-major `hidden × input` matrix
    /// per row of `prev` (`[B, n_quantiles]`).
    pub fn hyper_input_weights(&self, tape: &mut Tape, store: &ParamStore, prev: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, self.hyper_w);
        let b = tape.param(store, self.hyper_b);
        let pre = tape.matmul(prev, w)?;
        let pre = tape.add(pre, b)?;
        Ok(tape.relu(pre))
    }

    /// Cosine embedding `relu(Σᵢ cos(π i τ) wᵢ + b)` of each level, `[K, rnn]`.
    pub fn embed_taus(&self, tape: &mut Tape, store: &ParamStore, taus: &[f64]) -> Result<Var, PolicyError> {
        if let Some(&t) = taus.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
            return Err(PolicyError::BadTau(t));
        }
        let d = self.config.embed_dim;
        let basis = Tensor::from_fn(taus.len(), d, |k, i| (PI * i as f64 * taus[k]).cos());
        let basis = tape.constant(basis);
        let w = tape.param(store, self.phi_w);
        let b = tape.param(store, self.phi_b);
        let pre = tape.matmul(basis, w)?;
        let pre = tape.add(pre, b)?;
        Ok(tape.relu(pre))
    }

    /// One recurrent step for `B` rows, sharing `phi` (from
    /// [`PolicyNet::embed_taus`]) across rows.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
        hidden: Var,
        prev: Var,
        phi: Var,
    ) -> Result<StepOutput, DiffError> {
        let rnn = self.config.rnn_hidden_dim;
        let rows = tape.value(obs).rows();
        let k = tape.value(phi).rows();

        let w_in = self.hyper_input_weights(tape, store, prev)?;
        let x = tape.batch_matvec(w_in, obs)?;
        let in_b = tape.param(store, self.in_b);
        let x = tape.add(x, in_b)?;
        let x = tape.relu(x);

        let wx = tape.param(store, self.gru_wx);
        let wh = tape.param(store, self.gru_wh);
        let bx = tape.param(store, self.gru_bx);
        let bh = tape.param(store, self.gru_bh);
        let gx = tape.matmul(x, wx)?;
        let gx = tape.add(gx, bx)?;
        let gh = tape.matmul(hidden, wh)?;
        let gh = tape.add(gh, bh)?;
        let gx_rz = tape.slice_cols(gx, 0, 2 * rnn)?;
        let gh_rz = tape.slice_cols(gh, 0, 2 * rnn)?;
        let rz = tape.add(gx_rz, gh_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, rnn)?;
        let z = tape.slice_cols(rz, rnn, 2 * rnn)?;
        let gx_n = tape.slice_cols(gx, 2 * rnn, 3 * rnn)?;
        let gh_n = tape.slice_cols(gh, 2 * rnn, 3 * rnn)?;
        let rn = tape.mul(r, gh_n)?;
        let n = tape.add(gx_n, rn)?;
        let n = tape.tanh(n);
        // h' = n + z ⊙ (h - n)
        let diff = tape.sub(hidden, n)?;
        let zd = tape.mul(z, diff)?;
        let h_next = tape.add(n, zd)?;

        let h_rep = tape.repeat_rows(h_next, k)?;
        let phi_rep = tape.tile_rows(phi, rows)?;
        let feat = tape.mul(h_rep, phi_rep)?;
        let ow = tape.param(store, self.out_w);
        let ob = tape.param(store, self.out_b);
        let zq = tape.matmul(feat, ow)?;
        let zq = tape.add(zq, ob)?;
        let q = tape.mean_row_groups(zq, k)?;
        Ok(StepOutput { z: zq, q, hidden: h_next })
    }

    /// Evaluates one agent off-tape: returns its quantile samples and the
    /// advanced hidden state.
    pub fn quantile_values(
        &self,
        store: &ParamStore,
        input: &[f64],
        hidden: &HiddenState,
        prev: &[f64],
        taus: &[f64],
    ) -> Result<(QuantileBatch, HiddenState), PolicyError> {
        let (mut batches, mut hiddens) =
            self.quantile_values_batch(store, &[input.to_vec()], &[hidden.clone()], &[prev.to_vec()], taus)?;
        Ok((batches.remove(0), hiddens.remove(0)))
    }

    /// Batched off-tape evaluation for several agents sharing `taus`.
    pub fn quantile_values_batch(
        &self,
        store: &ParamStore,
        inputs: &[Vec<f64>],
        hiddens: &[HiddenState],
        prevs: &[Vec<f64>],
        taus: &[f64],
    ) -> Result<(Vec<QuantileBatch>, Vec<HiddenState>), PolicyError> {
        let b = inputs.len();
        let inp = self.config.input_len();
        if let Some(bad) = inputs.iter().find(|v| v.len() != inp) {
            return Err(PolicyError::ObsLength { expected: inp, got: bad.len() });
        }
        let mut tape = Tape::new();
        let obs = tape.constant(Tensor::matrix(b, inp, inputs.concat())?);
        let rnn = self.config.rnn_hidden_dim;
        let hid = tape.constant(Tensor::matrix(b, rnn, hiddens.iter().flat_map(|h| h.0.clone()).collect())?);
        let kq = self.config.n_quantiles;
        let prev = tape.constant(Tensor::matrix(b, kq, prevs.concat())?);
        let phi = self.embed_taus(&mut tape, store, taus)?;
        let out = self.step(&mut tape, store, obs, hid, prev, phi)?;
        let z = tape.value(out.z);
        let k = taus.len();
        let batches = (0..b)
            .map(|r| QuantileBatch {
                taus: taus.to_vec(),
                values: (0..k).map(|j| z.row_slice(r * k + j).to_vec()).collect(),
            })
            .collect();
        let h = tape.value(out.hidden);
        let next = (0..b).map(|r| HiddenState(h.row_slice(r).to_vec())).collect();
        Ok((batches, next))
    }
}

/// Greedy action over legal entries of `q`; lowest index wins ties.
pub fn greedy_action(q: &[f64], legal: &[bool]) -> Result<usize, PolicyError> {
    let masked: Vec<f64> =
        q.iter().zip(legal).map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY }).collect();
    if !legal.iter().any(|&ok| ok) {
        return Err(PolicyError::NoLegalAction);
    }
    Ok(argmax(&masked))
}

/// Dueling split of local utilities: `V = max over legal Q` and
/// `A(u) = Q(u) - V`, so `A <= 0` on legal actions with `A = 0` at the argmax.
pub fn dueling_split(q: &[f64], legal: &[bool]) -> Result<(f64, Vec<f64>), PolicyError> {
    let best = greedy_action(q, legal)?;
    let v = q[best];
    Ok((v, q.iter().map(|&x| x - v).collect()))
}

/// Epsilon-greedy choice: uniform over legal actions with probability
/// `epsilon`, greedy on mean quantile value otherwise.
pub fn select_action<R: Rng>(
    batch: &QuantileBatch,
    legal: &[bool],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize, PolicyError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(PolicyError::BadEpsilon(epsilon));
    }
    let choices: Vec<usize> = legal.iter().enumerate().filter(|(_, &ok)| ok).map(|(i, _)| i).collect();
    if choices.is_empty() {
        return Err(PolicyError::NoLegalAction);
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(choices[rng.gen_range(0..choices.len())]);
    }
    greedy_action(&batch.q_values(), legal)
}

impl PolicyNet {
    /// Runs one step for one agent and picks an action.
    #[allow(clippy::too_many_arguments)]
    pub fn act<R: Rng>(
        &self,
        store: &ParamStore,
        input: &[f64],
        hidden: &HiddenState,
        prev: &[f64],
        legal: &[bool],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<(usize, HiddenState, QuantileBatch), PolicyError> {
        let taus = sample_taus(self.config.n_quantiles, rng);
        let (batch, next) = self.quantile_values(store, input, hidden, prev, &taus)?;
        let a = select_action(&batch, legal, epsilon, rng)?;
        Ok((a, next, batch))
    }
}
