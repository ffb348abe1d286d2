//! Random-configuration gradient checks for the networks and losses.

use marlbar::diffcore::{ParamStore, Tape, Tensor, Var};
use marlbar::losses::{
    barrier_invariance_on_tape, barrier_regression_on_tape, huber_quantile_loss_on_tape,
};
use marlbar::mixnet::{one_hot, MixerConfig, MixerNet};
use marlbar::policynet::{sample_taus, PolicyConfig, PolicyNet};
use marlbar::trainloop::{barrier_loss_on_tape, compute_td_targets, return_loss_on_tape, Learner};
use marlbar::TrainConfig;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fd_check, random_episodes, tiny_env, uniform_vec, FdStats};

pub const STEP: f64 = 1e-5;

/// `Σ c ⊙ x` for a fresh random constant `c`.
fn project<R: Rng>(tape: &mut Tape, x: Var, rng: &mut R) -> Var {
    let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
    let w = tape.constant(Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0)));
    let p = tape.mul(x, w).expect("same shape");
    tape.sum_all(p)
}

/// Three recurrent steps with the quantile samples of a fixed action fed
/// back into the hypernetwork.
pub fn policy_case(rng: &mut ChaCha8Rng) -> FdStats {
    let config = PolicyConfig {
        env_obs_len: rng.gen_range(2..=5),
        n_agents: rng.gen_range(1..=3),
        n_actions: rng.gen_range(2..=4),
        hidden_dim: rng.gen_range(2..=4),
        rnn_hidden_dim: rng.gen_range(2..=4),
        embed_dim: rng.gen_range(2..=4),
        n_quantiles: rng.gen_range(2..=4),
    };
    let mut store = ParamStore::new();
    let net = PolicyNet::new(config.clone(), &mut store, rng);
    let rows = rng.gen_range(1..=3);
    let k = config.n_quantiles;
    let inp = config.input_len();
    let taus = sample_taus(k, rng);
    let obs: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(rows, inp, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let h0 = Tensor::from_fn(rows, config.rnn_hidden_dim, |_, _| rng.gen_range(-0.5..0.5));
    let p0 = Tensor::from_fn(rows, k, |_, _| rng.gen_range(-1.0..1.0));
    let fed: Vec<usize> = (0..rows * k).map(|r| (r / k) % config.n_actions).collect();
    let proj_seed: u64 = rng.gen();
    fd_check(&store, STEP, None, |p, tape| {
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let phi = net.embed_taus(tape, p, &taus).expect("valid taus");
        let mut hidden = tape.constant(h0.clone());
        let mut prev = tape.constant(p0.clone());
        let mut total = tape.scalar(0.0);
        for o in &obs {
            let x = tape.constant(o.clone());
            let out = net.step(tape, p, x, hidden, prev, phi)?;
            let term = project(tape, out.z, &mut prng);
            total = tape.add(total, term)?;
            let picked = tape.gather(out.z, &fed)?;
            prev = tape.reshape(picked, rows, k)?;
            hidden = out.hidden;
        }
        let term = project(tape, hidden, &mut prng);
        tape.add(total, term)
    })
}

/// Mixer and barrier head, differentiated through their inputs as well.
pub fn mixer_case(rng: &mut ChaCha8Rng) -> FdStats {
    let n = rng.gen_range(1..=3);
    let u = rng.gen_range(2..=4);
    let config = MixerConfig {
        state_len: rng.gen_range(1..=4),
        summary_len: rng.gen_range(1..=3),
        agent_feature_len: rng.gen_range(1..=4),
        n_agents: n,
        n_actions: u,
        embed_dim: rng.gen_range(2..=4),
        lambda_hidden: rng.gen_range(2..=4),
    };
    let mut store = ParamStore::new();
    let mixer = MixerNet::new(config.clone(), &mut store, rng);
    let b = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=4);
    let rows = b * n;
    let z = store.register_uniform("in.z", rows * k, u, 2.0, rng);
    let state = store.register_uniform("in.state", b, config.state_len, 1.0, rng);
    let summary = store.register_uniform("in.summary", b, config.summary_len, 1.0, rng);
    let features = store.register_uniform("in.features", rows, config.agent_feature_len, 1.0, rng);
    let mut mask = Vec::with_capacity(rows * u);
    let mut actions = Vec::with_capacity(rows);
    for _ in 0..rows {
        let legal: Vec<bool> = (0..u).map(|_| rng.gen_bool(0.7)).collect();
        let ok: Vec<usize> = (0..u).filter(|&a| legal[a]).collect();
        let ok = if ok.is_empty() { vec![0] } else { ok };
        actions.push(ok[rng.gen_range(0..ok.len())]);
        mask.extend((0..u).map(|a| if ok.contains(&a) { 0.0 } else { -1e9 }));
    }
    let mask = Tensor::matrix(rows, u, mask).expect("mask shape");
    let proj_seed: u64 = rng.gen();
    fd_check(&store, STEP, None, |p, tape| {
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let zv = tape.param(p, z);
        let q = tape.mean_row_groups(zv, k)?;
        let s = tape.param(p, state);
        let h = tape.param(p, summary);
        let f = tape.param(p, features);
        let enc = mixer.encode(tape, p, s, h)?;
        let onehot = tape.constant(one_hot(&actions, u));
        let lam = mixer.lambda_weights(tape, p, enc, f, onehot)?;
        let m = tape.constant(mask.clone());
        let joint = mixer.mix_on_tape(tape, q, zv, lam, m, &actions, k)?;
        let bar = mixer.predict_barrier(tape, p, enc)?;
        let a = project(tape, joint, &mut prng);
        let c = project(tape, bar, &mut prng);
        tape.add(a, c)
    })
}

/// Quantile, invariance and regression losses with their inputs as parameters.
pub fn loss_case(rng: &mut ChaCha8Rng) -> FdStats {
    let mut stats = FdStats::default();

    let rows = rng.gen_range(1..=5);
    let k = rng.gen_range(1..=5);
    let k_target = rng.gen_range(1..=5);
    let taus = sample_taus(k, rng);
    let kappa = rng.gen_range(0.5..2.0);
    let targets = Tensor::from_fn(rows, k_target, |_, _| rng.gen_range(-3.0..3.0));
    let mut weights: Vec<f64> = (0..rows).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
    weights[0] = 1.0;
    let mut store = ParamStore::new();
    let pred = store.register_uniform("pred", rows, k, 3.0, rng);
    stats.merge(fd_check(&store, STEP, None, |p, tape| {
        let x = tape.param(p, pred);
        huber_quantile_loss_on_tape(tape, x, &taus, &targets, &weights, kappa)
    }));

    let t_len = rng.gen_range(2..=12);
    let lambda_b = rng.gen_range(0.05..0.95);
    let empirical = uniform_vec(rng, t_len, 0.0, 3.0);
    let mut store = ParamStore::new();
    let bhat = store.register_uniform("bhat", t_len, 1, 2.0, rng);
    stats.merge(fd_check(&store, STEP, None, |p, tape| {
        let x = tape.param(p, bhat);
        barrier_invariance_on_tape(tape, x, lambda_b)
    }));
    stats.merge(fd_check(&store, STEP, None, |p, tape| {
        let x = tape.param(p, bhat);
        barrier_regression_on_tape(tape, x, &empirical)
    }));
    stats
}

/// Most coordinates checked per end-to-end loss.
const TRAINING_COORDS: usize = 120;

/// The two end-to-end training losses on random-play episodes of a tiny
/// environment, on a random subset of coordinates.
pub fn training_case(rng: &mut ChaCha8Rng) -> FdStats {
    let env = tiny_env(rng);
    let config = TrainConfig {
        hidden_dim: rng.gen_range(2..=4),
        rnn_hidden_dim: rng.gen_range(2..=4),
        embed_dim: rng.gen_range(2..=4),
        n_quantiles: rng.gen_range(2..=4),
        gamma_b: rng.gen_range(0.3..0.99),
        lambda_b: rng.gen_range(0.1..0.9),
        distributional: rng.gen_bool(0.8),
        ..TrainConfig::default()
    };
    let mut learner = Learner::for_env(&env, &config, rng);
    // a distinct target network
    for i in 0..learner.target.numel() {
        *learner.target.flat_mut(i) += rng.gen_range(-0.05..0.05);
    }
    let episodes = random_episodes(&env, rng.gen_range(1..=2), rng.gen());
    let batch: Vec<_> = episodes.iter().collect();
    let k = config.n_quantiles;
    let taus = sample_taus(k, rng);
    let target_taus = sample_taus(k, rng);
    let targets = compute_td_targets(&learner, &batch, &target_taus, config.gamma, config.td_lambda).expect("targets");
    let numel = learner.store.numel();
    let coords: Vec<usize> = sample(rng, numel, TRAINING_COORDS.min(numel)).into_vec();

    let mut stats = fd_check(&learner.store, STEP, Some(&coords), |p, tape| {
        return_loss_on_tape(&learner, p, tape, &batch, &taus, &targets, &config)
    });
    stats.merge(fd_check(&learner.store, STEP, Some(&coords), |p, tape| {
        barrier_loss_on_tape(&learner, p, tape, &episodes[0], &taus, &config)
    }));
    stats
}

/// Which network or loss a check covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Policy,
    Mixer,
    Losses,
    Training,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::Policy, Case::Mixer, Case::Losses, Case::Training];

    pub fn run(self, rng: &mut ChaCha8Rng) -> FdStats {
        match self {
            Case::Policy => policy_case(rng),
            Case::Mixer => mixer_case(rng),
            Case::Losses => loss_case(rng),
            Case::Training => training_case(rng),
        }
    }
}

/// Runs every case over `configs` seeded configurations.
pub fn gradient_fidelity(configs: usize, seed: u64) -> Vec<(Case, FdStats)> {
    Case::ALL
        .iter()
        .map(|&case| {
            let mut total = FdStats::default();
            for c in 0..configs {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(c as u64));
                total.merge(case.run(&mut rng));
            }
            (case, total)
        })
        .collect()
}
