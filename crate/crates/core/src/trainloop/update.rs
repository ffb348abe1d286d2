use rand::Rng;

use super::{Episode, Learner, TrainConfig, TrainError};
use crate::battlegrid::NOOP;
use crate::diffcore::{argmax, GradientVector, ParamStore, Tape, Tensor, Var};
use crate::losses::{
    barrier_invariance_on_tape, barrier_regression_on_tape, empirical_barrier, huber_quantile_loss_on_tape,
    pcgrad_combine, CombineWeights, GradientPair, LossReport,
};
use crate::mixnet::one_hot;
use crate::policynet::{agent_input, sample_taus};

use super::adam::Adam;

/// Penalty added to illegal actions before taking the max.
const ILLEGAL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Actions {
    Taken,
    Greedy,
}

struct Unrolled {
    /// `[B, K]` joint samples per step.
    joint: Vec<Var>,
    /// `[B, 1]` barrier predictions per step.
    barrier: Vec<Var>,
}

/// Runs the recurrent policy (and optionally the mixer and barrier head) over
/// a padded batch of episodes on `tape`.
#[allow(clippy::too_many_arguments)]
fn unroll(
    learner: &Learner,
    store: &ParamStore,
    tape: &mut Tape,
    episodes: &[&Episode],
    taus: &[f64],
    actions: Actions,
    mix: bool,
    barrier: bool,
) -> Result<Unrolled, TrainError> {
    let pc = &learner.policy.config;
    let n = pc.n_agents;
    let u = pc.n_actions;
    let inp = pc.input_len();
    let k = taus.len();
    let b = episodes.len();
    let rows = b * n;
    let state_len = learner.mixer.config.state_len;
    let t_max = episodes.iter().map(|e| e.len()).max().unwrap_or(0);

    let phi = learner.policy.embed_taus(tape, store, taus)?;
    let mut hidden = tape.constant(Tensor::zeros(rows, pc.rnn_hidden_dim));
    let mut prev = tape.constant(Tensor::zeros(rows, pc.n_quantiles));
    let mut out = Unrolled { joint: Vec::with_capacity(t_max), barrier: Vec::with_capacity(t_max) };

    for t in 0..t_max {
        let mut inputs = Vec::with_capacity(rows * inp);
        let mut mask = Vec::with_capacity(rows * u);
        let mut taken = Vec::with_capacity(rows);
        let mut states = Vec::with_capacity(b * state_len);
        for ep in episodes {
            match ep.transitions.get(t) {
                Some(tr) => {
                    for i in 0..n {
                        inputs.extend(agent_input(&tr.observations[i], i, n));
                        mask.extend(tr.legal[i].iter().map(|&ok| if ok { 0.0 } else { ILLEGAL }));
                        taken.push(tr.actions[i]);
                    }
                    states.extend_from_slice(&tr.state);
                }
                None => {
                    for i in 0..n {
                        inputs.extend((0..inp).map(|j| if j == inp - n + i { 1.0 } else { 0.0 }));
                        mask.extend((0..u).map(|a| if a == NOOP { 0.0 } else { ILLEGAL }));
                        taken.push(NOOP);
                    }
                    states.extend(std::iter::repeat(0.0).take(state_len));
                }
            }
        }
        let obs = tape.constant(Tensor::matrix(rows, inp, inputs)?);
        let step = learner.policy.step(tape, store, obs, hidden, prev, phi)?;
        hidden = step.hidden;

        let fed: Vec<usize> = taken.iter().flat_map(|&a| std::iter::repeat(a).take(k)).collect();
        let picked = tape.gather(step.z, &fed)?;
        prev = tape.reshape(picked, rows, k)?;

        if !(mix || barrier) {
            continue;
        }
        let summary = tape.mean_row_groups(step.hidden, n)?;
        let state = tape.constant(Tensor::matrix(b, state_len, states)?);
        let encoded = learner.mixer.encode(tape, store, state, summary)?;
        if barrier {
            out.barrier.push(learner.mixer.predict_barrier(tape, store, encoded)?);
        }
        if mix {
            let chosen = match actions {
                Actions::Taken => taken,
                Actions::Greedy => {
                    let q = tape.value(step.q);
                    (0..rows)
                        .map(|r| {
                            let masked: Vec<f64> =
                                q.row_slice(r).iter().zip(&mask[r * u..(r + 1) * u]).map(|(a, m)| a + m).collect();
                            argmax(&masked)
                        })
                        .collect()
                }
            };
            let onehot = tape.constant(one_hot(&chosen, u));
            let lambda = learner.mixer.lambda_weights(tape, store, encoded, obs, onehot)?;
            let legal_mask = tape.constant(Tensor::matrix(rows, u, mask)?);
            out.joint.push(learner.mixer.mix_on_tape(tape, step.q, step.z, lambda, legal_mask, &chosen, k)?);
        }
    }
    Ok(out)
}

/// Index-wise λ-returns over quantile samples.
///
/// `bootstrap[t]` holds the target samples `Z̄_{t+1}` for `t < T − 1`; the
/// last step is terminal, so `G_{T−1}[k] = r_{T−1}`.
pub fn lambda_returns(
    rewards: &[f64],
    bootstrap: &[Vec<f64>],
    k: usize,
    gamma: f64,
    td_lambda: f64,
) -> Vec<Vec<f64>> {
    let t_len = rewards.len();
    assert_eq!(bootstrap.len() + 1, t_len.max(1), "one bootstrap row per non-terminal step");
    let mut out = vec![vec![0.0; k]; t_len];
    if t_len == 0 {
        return out;
    }
    out[t_len - 1] = vec![rewards[t_len - 1]; k];
    for t in (0..t_len - 1).rev() {
        for j in 0..k {
            let next = (1.0 - td_lambda) * bootstrap[t][j] + td_lambda * out[t + 1][j];
            out[t][j] = rewards[t] + gamma * next;
        }
    }
    out
}

/// Target quantile samples per episode and step, from the target networks at
/// the greedy next action.
pub fn compute_td_targets(
    learner: &Learner,
    batch: &[&Episode],
    taus: &[f64],
    gamma: f64,
    td_lambda: f64,
) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let un = unroll(learner, &learner.target, &mut tape, batch, taus, Actions::Greedy, true, false)?;
    let k = taus.len();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(bi, ep)| {
            let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
            let bootstrap: Vec<Vec<f64>> =
                (1..ep.len()).map(|t| tape.value(un.joint[t]).row_slice(bi).to_vec()).collect();
            lambda_returns(&rewards, &bootstrap, k, gamma, td_lambda)
        })
        .collect())
}

/// Quantile regression loss of the online joint samples on `batch` against
/// precomputed `targets` (per episode, per step, `K` samples).
#[allow(clippy::too_many_arguments)]
pub fn return_loss_on_tape(
    learner: &Learner,
    store: &ParamStore,
    tape: &mut Tape,
    batch: &[&Episode],
    taus: &[f64],
    targets: &[Vec<Vec<f64>>],
    config: &TrainConfig,
) -> Result<Var, TrainError> {
    if batch.is_empty() || batch.iter().any(|e| e.is_empty()) {
        return Err(TrainError::EmptyBatch);
    }
    let k = taus.len();
    let un = unroll(learner, store, tape, batch, taus, Actions::Taken, true, false)?;
    let t_max = un.joint.len();
    let b = batch.len();
    let pred = tape.concat_rows(&un.joint)?;
    let mut weights = Vec::with_capacity(t_max * b);
    let mut flat_targets = Vec::with_capacity(t_max * b * k);
    for t in 0..t_max {
        for (bi, ep) in batch.iter().enumerate() {
            if t < ep.len() {
                weights.push(1.0);
                flat_targets.extend_from_slice(&targets[bi][t]);
            } else {
                weights.push(0.0);
                flat_targets.extend(std::iter::repeat(0.0).take(k));
            }
        }
    }
    let target_t = Tensor::matrix(t_max * b, k, flat_targets)?;
    let loss = if config.distributional {
        huber_quantile_loss_on_tape(tape, pred, taus, &target_t, &weights, config.kappa)?
    } else {
        let mean_pred = tape.mean_axis(pred, crate::diffcore::Axis::Cols);
        let mean_t = Tensor::from_fn(t_max * b, 1, |r, _| target_t.row_slice(r).iter().sum::<f64>() / k as f64);
        huber_quantile_loss_on_tape(tape, mean_pred, &[0.5], &mean_t, &weights, config.kappa)?
    };
    Ok(loss)
}

/// Barrier invariance plus regression loss of the barrier head along one
/// episode.
pub fn barrier_loss_on_tape(
    learner: &Learner,
    store: &ParamStore,
    tape: &mut Tape,
    episode: &Episode,
    taus: &[f64],
    config: &TrainConfig,
) -> Result<Var, TrainError> {
    if episode.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let un = unroll(learner, store, tape, &[episode], taus, Actions::Taken, false, true)?;
    let predicted = tape.concat_rows(&un.barrier)?;
    let empirical = empirical_barrier(&episode.deaths(), config.gamma_b)?;
    let reg = barrier_regression_on_tape(tape, predicted, &empirical)?;
    if episode.len() < 2 {
        return Ok(reg);
    }
    let inv = barrier_invariance_on_tape(tape, predicted, config.lambda_b)?;
    Ok(tape.add(inv, reg)?)
}

/// Separate loss gradients before combination.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub l_q: f64,
    pub l_b: f64,
    pub g_q: GradientVector,
    pub g_b: GradientVector,
    /// Total deaths of the on-policy rollout.
    pub barrier_value: f64,
    /// Whether the constraint was active (`V^B > ω` with the barrier enabled).
    pub active: bool,
}

/// Return-distribution loss on the replay batch and, when the on-policy
/// rollout violates the threshold, the barrier loss.
pub fn loss_gradients<R: Rng>(
    learner: &Learner,
    batch: &[&Episode],
    on_policy: &Episode,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossGradients, TrainError> {
    if batch.is_empty() || batch.iter().any(|e| e.is_empty()) || on_policy.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let k = learner.policy.config.n_quantiles;
    let taus = sample_taus(k, rng);
    let target_taus = sample_taus(k, rng);
    let targets = compute_td_targets(learner, batch, &target_taus, config.gamma, config.td_lambda)?;

    let mut tape = Tape::new();
    let loss_q = return_loss_on_tape(learner, &learner.store, &mut tape, batch, &taus, &targets, config)?;
    let l_q = tape.value(loss_q).item();
    let g_q = tape.backward(loss_q, &learner.store)?;

    let barrier_value = on_policy.total_deaths() as f64;
    let omega = config.omega_for(learner.policy.config.n_agents);
    let active = config.barrier && barrier_value > omega;
    let (l_b, g_b) = if active {
        let mut btape = Tape::new();
        let loss_b = barrier_loss_on_tape(learner, &learner.store, &mut btape, on_policy, &taus, config)?;
        (btape.value(loss_b).item(), btape.backward(loss_b, &learner.store)?)
    } else {
        (0.0, GradientVector::zeros(learner.store.numel()))
    };
    Ok(LossGradients { l_q, l_b, g_q, g_b, barrier_value, active })
}

/// One optimization step: separate gradients, gradient surgery, Adam update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng>(
    learner: &mut Learner,
    adam: &mut Adam,
    batch: &[&Episode],
    on_policy: &Episode,
    config: &TrainConfig,
    rng: &mut R,
    batch_id: u64,
) -> Result<LossReport, TrainError> {
    let grads = loss_gradients(learner, batch, on_policy, config, rng)?;
    let dump = |what: &str| TrainError::NonFinite {
        batch_id,
        detail: format!(
            "{what}; episode seeds {:?}; on-policy seed {}",
            batch.iter().map(|e| e.seed).collect::<Vec<_>>(),
            on_policy.seed
        ),
    };
    if !grads.l_q.is_finite() || !grads.l_b.is_finite() {
        return Err(dump(&format!("loss l_q={} l_b={}", grads.l_q, grads.l_b)));
    }
    if !grads.g_q.all_finite() || !grads.g_b.all_finite() {
        return Err(dump("gradient"));
    }
    let pair = GradientPair { g_q: grads.g_q, g_b: grads.g_b, weights: config.combine_weights() };
    let combined = pcgrad_combine(&pair)?;
    adam.step(&mut learner.store, &combined.gradient)?;
    Ok(LossReport { l_q: grads.l_q, l_b: grads.l_b, grad_norm: combined.gradient.norm(), conflict: combined.conflict })
}

impl TrainConfig {
    pub fn combine_weights(&self) -> CombineWeights {
        CombineWeights {
            beta_q: self.beta_q,
            beta_b: self.beta_b,
            beta_q_plus: self.beta_q_plus,
            beta_b_plus: self.beta_b_plus,
        }
    }
}
