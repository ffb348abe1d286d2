//! Training loop.
//!
//! Each epoch collects one ε-greedy episode, stores it in the replay buffer
//! and runs one update:
//!
//! 1. quantile regression of the mixed joint samples against index-wise
//!    λ-return targets from the target networks, on a replay batch;
//! 2. if the freshly collected episode lost more than `ω` allies, the barrier
//!    loss (invariance penalty plus regression to the empirical barrier) on
//!    that episode;
//! 3. separate backward passes, gradient surgery, one Adam step.
//!
//! Target networks are hard-copied every `target_update_interval` updates.

mod adam;
mod replay;
mod update;

pub use adam::Adam;
pub use replay::{Episode, ReplayBuffer, Transition};
pub use update::{
    barrier_loss_on_tape, compute_td_targets, lambda_returns, loss_gradients, return_loss_on_tape, train_step,
    LossGradients,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::battlegrid::{derive_seed, EnvConfig, EnvError, Environment, Observation};
use crate::diffcore::{DiffError, ParamStore};
use crate::losses::{LossError, LossReport};
use crate::mixnet::{MixError, MixerConfig, MixerNet};
use crate::policynet::{agent_input, sample_taus, select_action, HiddenState, PolicyConfig, PolicyError, PolicyNet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("non-finite value in batch {batch_id}: {detail}")]
    NonFinite { batch_id: u64, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gamma_b: f64,
    pub lambda_b: f64,
    pub td_lambda: f64,
    pub learning_rate: f64,
    /// Episodes per replay batch.
    pub batch_size: usize,
    /// Replay capacity in episodes.
    pub buffer_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which ε decays linearly.
    pub epsilon_anneal_steps: usize,
    /// Updates between hard target copies.
    pub target_update_interval: usize,
    /// Safety threshold on episode deaths; `None` means `n − 1`.
    pub omega: Option<f64>,
    pub beta_q: f64,
    pub beta_b: f64,
    pub beta_q_plus: f64,
    pub beta_b_plus: f64,
    /// Number of epochs, one collected episode each.
    pub epochs: usize,
    /// Epochs between evaluations.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Evaluations between checkpoints.
    pub checkpoint_every: usize,
    pub hidden_dim: usize,
    pub rnn_hidden_dim: usize,
    pub embed_dim: usize,
    pub n_quantiles: usize,
    pub kappa: f64,
    /// Barrier loss enabled; `false` is the no-barrier ablation.
    pub barrier: bool,
    /// Quantile loss; `false` regresses only the sample mean.
    pub distributional: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gamma_b: 0.5,
            lambda_b: 0.5,
            td_lambda: 0.6,
            learning_rate: 0.001,
            batch_size: 8,
            buffer_size: 5000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            target_update_interval: 200,
            omega: None,
            beta_q: 0.5,
            beta_b: 0.5,
            beta_q_plus: 0.5,
            beta_b_plus: 0.5,
            epochs: 2000,
            eval_interval: 50,
            eval_episodes: 10,
            checkpoint_every: 5,
            hidden_dim: 64,
            rnn_hidden_dim: 64,
            embed_dim: 64,
            n_quantiles: 8,
            kappa: 1.0,
            barrier: true,
            distributional: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn omega_for(&self, n_agents: usize) -> f64 {
        self.omega.unwrap_or(n_agents.saturating_sub(1) as f64)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let open = [("gamma_b", self.gamma_b), ("lambda_b", self.lambda_b)];
        for (name, v) in open {
            if !(v > 0.0 && v < 1.0) {
                return Err(TrainError::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        let closed = [
            ("gamma", self.gamma),
            ("td_lambda", self.td_lambda),
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("beta_q", self.beta_q),
            ("beta_b", self.beta_b),
            ("beta_q_plus", self.beta_q_plus),
            ("beta_b_plus", self.beta_b_plus),
        ];
        for (name, v) in closed {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return Err(TrainError::Config("epsilon_end exceeds epsilon_start".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        if !(self.kappa > 0.0) {
            return Err(TrainError::Config(format!("kappa = {} must be positive", self.kappa)));
        }
        if let Some(w) = self.omega {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!("omega = {w} must be non-negative")));
            }
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("buffer_size", self.buffer_size),
            ("target_update_interval", self.target_update_interval),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("checkpoint_every", self.checkpoint_every),
            ("hidden_dim", self.hidden_dim),
            ("rnn_hidden_dim", self.rnn_hidden_dim),
            ("embed_dim", self.embed_dim),
            ("n_quantiles", self.n_quantiles),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon_at(&self, env_steps: usize) -> f64 {
        if self.epsilon_anneal_steps == 0 {
            return self.epsilon_end;
        }
        if env_steps >= self.epsilon_anneal_steps {
            return self.epsilon_end;
        }
        let frac = env_steps as f64 / self.epsilon_anneal_steps as f64;
        (self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)).max(self.epsilon_end)
    }

    pub fn policy_config(&self, env: &EnvConfig) -> PolicyConfig {
        PolicyConfig {
            env_obs_len: env.obs_len(),
            n_agents: env.n_agents(),
            n_actions: env.n_actions(),
            hidden_dim: self.hidden_dim,
            rnn_hidden_dim: self.rnn_hidden_dim,
            embed_dim: self.embed_dim,
            n_quantiles: self.n_quantiles,
        }
    }

    pub fn mixer_config(&self, env: &EnvConfig) -> MixerConfig {
        MixerConfig {
            state_len: env.state_len(),
            summary_len: self.rnn_hidden_dim,
            agent_feature_len: env.obs_len() + env.n_agents(),
            n_agents: env.n_agents(),
            n_actions: env.n_actions(),
            embed_dim: self.hidden_dim,
            lambda_hidden: self.hidden_dim,
        }
    }
}

/// Online and target networks sharing one parameter layout.
#[derive(Clone, Debug)]
pub struct Learner {
    pub policy: PolicyNet,
    pub mixer: MixerNet,
    pub store: ParamStore,
    pub target: ParamStore,
}

impl Learner {
    pub fn new<R: Rng>(policy: PolicyConfig, mixer: MixerConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let policy = PolicyNet::new(policy, &mut store, rng);
        let mixer = MixerNet::new(mixer, &mut store, rng);
        let target = store.clone();
        Self { policy, mixer, store, target }
    }

    pub fn for_env<R: Rng>(env: &EnvConfig, config: &TrainConfig, rng: &mut R) -> Self {
        Self::new(config.policy_config(env), config.mixer_config(env), rng)
    }

    /// Hard copy of the online parameters into the target networks.
    pub fn sync_target(&mut self) {
        self.target = self.store.clone();
    }

    pub fn controller(&self, epsilon: f64) -> PolicyController<'_> {
        PolicyController { learner: self, epsilon, hidden: Vec::new(), prev: Vec::new() }
    }
}

/// Decentralized action selection for all agents.
pub trait Controller {
    fn begin_episode(&mut self);
    fn act(
        &mut self,
        observations: &[Observation],
        legal: &[Vec<bool>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, TrainError>;
}

/// ε-greedy control by the shared local policy network.
pub struct PolicyController<'a> {
    learner: &'a Learner,
    epsilon: f64,
    hidden: Vec<HiddenState>,
    prev: Vec<Vec<f64>>,
}

impl Controller for PolicyController<'_> {
    fn begin_episode(&mut self) {
        let c = &self.learner.policy.config;
        self.hidden = vec![HiddenState::zeros(c.rnn_hidden_dim); c.n_agents];
        self.prev = vec![vec![0.0; c.n_quantiles]; c.n_agents];
    }

    fn act(
        &mut self,
        observations: &[Observation],
        legal: &[Vec<bool>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, TrainError> {
        let policy = &self.learner.policy;
        let n = policy.config.n_agents;
        if self.hidden.len() != n {
            self.begin_episode();
        }
        let inputs: Vec<Vec<f64>> = observations.iter().enumerate().map(|(i, o)| agent_input(o, i, n)).collect();
        let taus = sample_taus(policy.config.n_quantiles, rng);
        let (batches, hidden) =
            policy.quantile_values_batch(&self.learner.store, &inputs, &self.hidden, &self.prev, &taus)?;
        let mut actions = Vec::with_capacity(n);
        for (i, batch) in batches.iter().enumerate() {
            let a = select_action(batch, &legal[i], self.epsilon, rng)?;
            self.prev[i] = batch.action_samples(a);
            actions.push(a);
        }
        self.hidden = hidden;
        Ok(actions)
    }
}

/// Plays one episode from `seed` to completion.
pub fn run_episode<C: Controller>(
    env: &mut Environment,
    seed: u64,
    controller: &mut C,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, TrainError> {
    let n = env.config().n_agents();
    let mut observations = env.reset(seed);
    controller.begin_episode();
    let mut transitions = Vec::new();
    loop {
        let legal: Vec<Vec<bool>> = (0..n).map(|i| env.legal_actions(i)).collect();
        let state = env.global_state();
        let actions = controller.act(&observations, &legal, rng)?;
        let (next, result) = env.step(&actions)?;
        transitions.push(Transition {
            observations,
            legal,
            state,
            actions,
            reward: result.reward,
            deaths: result.deaths,
            done: result.done,
            win: result.win,
        });
        observations = next;
        if result.done {
            break;
        }
    }
    Ok(Episode { seed, transitions, final_observations: observations, final_state: env.global_state() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub win_rate: f64,
    pub mean_deaths: f64,
    pub mean_return: f64,
    pub episodes: Vec<Episode>,
}

/// Averages `episodes` runs on the seed stream derived from `seed`.
pub fn evaluate<C: Controller>(
    controller: &mut C,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary, TrainError> {
    if episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    let mut env = Environment::new(env_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(episodes);
    for j in 0..episodes {
        runs.push(run_episode(&mut env, derive_seed(seed, j as u64), controller, &mut rng)?);
    }
    let count = episodes as f64;
    Ok(EvalSummary {
        win_rate: runs.iter().filter(|e| e.won()).count() as f64 / count,
        mean_deaths: runs.iter().map(|e| e.total_deaths() as f64).sum::<f64>() / count,
        mean_return: runs.iter().map(|e| e.total_reward()).sum::<f64>() / count,
        episodes: runs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub win_rate: f64,
    pub mean_deaths: f64,
    pub l_q: f64,
    pub l_b: f64,
    pub conflict_frac: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, Default)]
struct Running {
    l_q: f64,
    l_b: f64,
    conflicts: usize,
    updates: usize,
}

const STREAM_INIT: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_TRAIN_ENV: u64 = 4;
const STREAM_EVAL_ENV: u64 = 5;

/// Owns the networks, optimizer and buffer for one seeded run.
pub struct Trainer {
    pub config: TrainConfig,
    pub env_config: EnvConfig,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    adam: Adam,
    env: Environment,
    act_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    train_env_seed: u64,
    eval_seed: u64,
    epoch: usize,
    env_steps: usize,
    updates: u64,
    running: Running,
    last_eval: Option<EvalSummary>,
}

impl Trainer {
    pub fn new(config: TrainConfig, env_config: EnvConfig) -> Result<Self, TrainError> {
        config.validate()?;
        env_config.validate()?;
        let seed = config.seed;
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT));
        let learner = Learner::for_env(&env_config, &config, &mut init);
        let adam = Adam::new(learner.store.numel(), config.learning_rate);
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_size),
            env: Environment::new(env_config.clone())?,
            act_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ACT)),
            sample_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SAMPLE)),
            train_env_seed: derive_seed(seed, STREAM_TRAIN_ENV),
            eval_seed: derive_seed(seed, STREAM_EVAL_ENV),
            epoch: 0,
            env_steps: 0,
            updates: 0,
            running: Running::default(),
            last_eval: None,
            learner,
            adam,
            config,
            env_config,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon_at(self.env_steps)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// True right after an epoch that ends an evaluation period.
    pub fn should_evaluate(&self) -> bool {
        self.epoch % self.config.eval_interval == 0 || self.epoch == self.config.epochs
    }

    /// Episodes of the most recent evaluation.
    pub fn last_evaluation(&self) -> Option<&EvalSummary> {
        self.last_eval.as_ref()
    }

    /// Collects one episode and runs one update once the buffer holds a full batch.
    pub fn run_epoch(&mut self) -> Result<Option<LossReport>, TrainError> {
        let seed = derive_seed(self.train_env_seed, self.epoch as u64);
        let episode = {
            let mut controller = self.learner.controller(self.epsilon());
            run_episode(&mut self.env, seed, &mut controller, &mut self.act_rng)?
        };
        self.env_steps += episode.len();
        self.epoch += 1;
        self.buffer.push(episode);

        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let on_policy = self.buffer_newest();
        let batch = self.buffer.sample(self.config.batch_size, &mut self.sample_rng);
        let report = train_step(
            &mut self.learner,
            &mut self.adam,
            &batch,
            &on_policy,
            &self.config,
            &mut self.sample_rng,
            self.updates,
        )?;
        self.updates += 1;
        if self.updates % self.config.target_update_interval as u64 == 0 {
            self.learner.sync_target();
        }
        self.running.l_q += report.l_q;
        self.running.l_b += report.l_b;
        self.running.conflicts += report.conflict as usize;
        self.running.updates += 1;
        Ok(Some(report))
    }

    fn buffer_newest(&self) -> Episode {
        self.buffer.newest().cloned().expect("buffer holds the episode just pushed")
    }

    /// Greedy evaluation on the held-out seed stream, with loss averages
    /// since the previous row.
    pub fn metrics_row(&mut self) -> Result<MetricsRow, TrainError> {
        let mut controller = self.learner.controller(0.0);
        let summary = evaluate(&mut controller, &self.env_config, self.config.eval_episodes, self.eval_seed)?;
        let r = std::mem::take(&mut self.running);
        let per = |x: f64| if r.updates == 0 { 0.0 } else { x / r.updates as f64 };
        let row = MetricsRow {
            epoch: self.epoch,
            steps: self.env_steps,
            mean_return: summary.mean_return,
            win_rate: summary.win_rate,
            mean_deaths: summary.mean_deaths,
            l_q: per(r.l_q),
            l_b: per(r.l_b),
            conflict_frac: per(r.conflicts as f64),
            epsilon: self.epsilon(),
        };
        self.last_eval = Some(summary);
        Ok(row)
    }
}

/// Trains for `config.epochs` epochs and returns one row per evaluation,
/// starting with the untrained policy at epoch 0.
pub fn run_training(config: &TrainConfig, env_config: &EnvConfig) -> Result<Vec<MetricsRow>, TrainError> {
    let mut trainer = Trainer::new(config.clone(), env_config.clone())?;
    let mut rows = vec![trainer.metrics_row()?];
    while !trainer.finished() {
        trainer.run_epoch()?;
        if trainer.should_evaluate() {
            rows.push(trainer.metrics_row()?);
        }
    }
    Ok(rows)
}
