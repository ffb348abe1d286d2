//! Seedable, deterministic multi-agent environments.
//!
//! Two scenarios share one state representation:
//!
//! * [`Scenario::Battle`]: allies fight scripted enemies on a grid. Allies act
//!   in index order, then each living enemy attacks its nearest ally in range
//!   or moves toward it. Timeouts count as losses.
//! * [`Scenario::Corridor`]: agents advance along a lane; stepping onto a
//!   hazard cell terminates the agent. The episode ends once every survivor
//!   reaches the goal or more than half the agents are gone.
//!
//! Ally deaths per step are reported in [`StepResult::deaths`] and drive the
//! barrier computation during training.

mod battle;
mod config;
mod corridor;
pub mod log;

pub use config::{EnvConfig, Scenario};
pub use log::{EpisodeLog, TrajectoryRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Features per observed unit: dx, dy, distance, hp fraction, type flag.
pub const SLOT_FEATURES: usize = 5;

pub const NOOP: usize = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("{units} units do not fit in {cells} cells")]
    Capacity { units: usize, cells: usize },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent {agent}: action {action} is not valid here")]
    MalformedAction { agent: usize, action: usize },
    #[error("episode already finished")]
    EpisodeOver,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unit {
    pub x: usize,
    pub y: usize,
    pub hp: u32,
}

impl Unit {
    pub fn alive(&self) -> bool {
        self.hp > 0
    }
}

pub(crate) fn chebyshev(a: &Unit, b: &Unit) -> usize {
    a.x.abs_diff(b.x).max(a.y.abs_diff(b.y))
}

/// Full environment state. In the corridor, `x` is the lane position and
/// `enemies` is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub allies: Vec<Unit>,
    pub enemies: Vec<Unit>,
    pub step: usize,
    pub done: bool,
    pub hazards: Vec<bool>,
    pub seed: u64,
}

impl EnvState {
    pub fn allies_alive(&self) -> usize {
        self.allies.iter().filter(|u| u.alive()).count()
    }

    pub fn enemies_alive(&self) -> usize {
        self.enemies.iter().filter(|u| u.alive()).count()
    }

    pub fn enemy_hp_total(&self) -> u64 {
        self.enemies.iter().map(|u| u.hp as u64).sum()
    }
}

/// Fixed-length local observation; slots for unseen or dead units are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Shared global reward.
    pub reward: f64,
    /// Allies that reached zero hit points this step.
    pub deaths: usize,
    pub done: bool,
    pub win: bool,
    /// Agents whose action was downgraded to a no-op (blocked move,
    /// dead or out-of-range target).
    pub noop_fallbacks: Vec<usize>,
}

/// Places units from `config.seed` and returns the initial observations.
pub fn reset(config: &EnvConfig) -> Result<(EnvState, Vec<Observation>), EnvError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let state = match config.scenario {
        Scenario::Battle => battle::initial_state(config, &mut rng),
        Scenario::Corridor => corridor::initial_state(config, &mut rng),
    };
    let obs = observations(config, &state);
    Ok((state, obs))
}

/// Advances the environment by one joint action.
pub fn step(
    config: &EnvConfig,
    state: &EnvState,
    joint_action: &[usize],
) -> Result<(EnvState, Vec<Observation>, StepResult), EnvError> {
    match config.scenario {
        Scenario::Battle => battle_step(config, state, joint_action),
        Scenario::Corridor => corridor_step(config, state, joint_action),
    }
}

fn check_actions(config: &EnvConfig, state: &EnvState, joint_action: &[usize]) -> Result<(), EnvError> {
    if state.done {
        return Err(EnvError::EpisodeOver);
    }
    if joint_action.len() != config.n_allies {
        return Err(EnvError::ActionCount { expected: config.n_allies, got: joint_action.len() });
    }
    for (agent, (&a, unit)) in joint_action.iter().zip(&state.allies).enumerate() {
        if a >= config.n_actions() || (!unit.alive() && a != NOOP) {
            return Err(EnvError::MalformedAction { agent, action: a });
        }
    }
    Ok(())
}

pub fn battle_step(
    config: &EnvConfig,
    state: &EnvState,
    joint_action: &[usize],
) -> Result<(EnvState, Vec<Observation>, StepResult), EnvError> {
    check_actions(config, state, joint_action)?;
    let (next, result) = battle::advance(config, state, joint_action);
    let obs = observations(config, &next);
    Ok((next, obs, result))
}

pub fn corridor_step(
    config: &EnvConfig,
    state: &EnvState,
    joint_action: &[usize],
) -> Result<(EnvState, Vec<Observation>, StepResult), EnvError> {
    check_actions(config, state, joint_action)?;
    let (next, result) = corridor::advance(config, state, joint_action);
    let obs = observations(config, &next);
    Ok((next, obs, result))
}

pub fn observations(config: &EnvConfig, state: &EnvState) -> Vec<Observation> {
    (0..config.n_allies)
        .map(|i| match config.scenario {
            Scenario::Battle => battle::observe(config, state, i),
            Scenario::Corridor => corridor::observe(config, state, i),
        })
        .collect()
}

/// Legal-action mask for `agent`; no-op is always legal.
pub fn legal_actions(config: &EnvConfig, state: &EnvState, agent: usize) -> Vec<bool> {
    let mut mask = vec![false; config.n_actions()];
    mask[NOOP] = true;
    if state.allies[agent].alive() && !state.done {
        match config.scenario {
            Scenario::Battle => battle::legal(config, state, agent, &mut mask),
            Scenario::Corridor => corridor::legal(config, state, agent, &mut mask),
        }
    }
    mask
}

/// Global state vector for the centralized mixer.
pub fn global_state(config: &EnvConfig, state: &EnvState) -> Vec<f64> {
    match config.scenario {
        Scenario::Battle => battle::global_state(config, state),
        Scenario::Corridor => observations(config, state).into_iter().flat_map(|o| o.0).collect(),
    }
}

/// Stateful wrapper used by rollouts.
#[derive(Clone, Debug)]
pub struct Environment {
    config: EnvConfig,
    state: EnvState,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        let (state, _) = reset(&config)?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Starts a new episode with placement drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> Vec<Observation> {
        self.config.seed = seed;
        let (state, obs) = reset(&self.config).expect("config validated at construction");
        self.state = state;
        obs
    }

    pub fn step(&mut self, joint_action: &[usize]) -> Result<(Vec<Observation>, StepResult), EnvError> {
        let (next, obs, result) = step(&self.config, &self.state, joint_action)?;
        self.state = next;
        Ok((obs, result))
    }

    pub fn observations(&self) -> Vec<Observation> {
        observations(&self.config, &self.state)
    }

    pub fn legal_actions(&self, agent: usize) -> Vec<bool> {
        legal_actions(&self.config, &self.state, agent)
    }

    pub fn global_state(&self) -> Vec<f64> {
        global_state(&self.config, &self.state)
    }
}

/// Derives an independent episode seed from a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.gen()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn duel(enemy_hp: u32) -> (EnvConfig, EnvState) {
        let config = EnvConfig {
            n_allies: 1,
            n_enemies: 1,
            grid_width: 6,
            grid_height: 3,
            ..EnvConfig::battle_3v3()
        };
        let (mut state, _) = reset(&config).unwrap();
        state.allies[0] = Unit { x: 2, y: 1, hp: config.ally_hp };
        state.enemies[0] = Unit { x: 3, y: 1, hp: enemy_hp };
        (config, state)
    }

    #[test]
    fn same_seed_same_start() {
        let c = EnvConfig::battle_3v3();
        assert_eq!(reset(&c).unwrap(), reset(&c).unwrap());
        let (_, obs) = reset(&c).unwrap();
        assert_eq!(obs.len(), 3);
        assert!(obs.iter().all(|o| o.0.len() == c.obs_len()));
    }

    #[test]
    fn zero_sight_sees_only_self() {
        let c = EnvConfig { sight_range: 0, attack_range: 0, ..EnvConfig::battle_3v3() };
        let (_, obs) = reset(&c).unwrap();
        for o in obs {
            let (slots, own) = o.0.split_at(c.obs_len() - 1);
            assert!(slots.iter().all(|&v| v == 0.0));
            assert_eq!(own, &[1.0]);
        }
    }

    #[test]
    fn allies_start_left_enemies_right() {
        let c = EnvConfig::battle_3v3();
        let (s, _) = reset(&c).unwrap();
        let band = c.band_width();
        assert!(s.allies.iter().all(|u| u.x < band && u.hp == c.ally_hp));
        assert!(s.enemies.iter().all(|u| u.x >= c.grid_width - band && u.hp == c.enemy_hp));
    }

    #[test]
    fn idle_step_far_apart_is_quiet() {
        let c = EnvConfig { grid_width: 30, sight_range: 2, attack_range: 1, ..EnvConfig::battle_3v3() };
        let (s, _) = reset(&c).unwrap();
        let (_, _, r) = step(&c, &s, &[0, 0, 0]).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.deaths, 0);
        assert!(!r.done);
    }

    #[test]
    fn killing_last_enemy_wins() {
        let (c, s) = duel(1);
        let attack = 5;
        let (next, _, r) = step(&c, &s, &[attack]).unwrap();
        assert!(r.win && r.done);
        assert_eq!(next.enemies[0].hp, 0);
        assert_eq!(r.reward, c.damage_reward_scale * 1.0 + c.kill_reward + c.win_reward);
    }

    #[test]
    fn timeout_is_a_loss() {
        let c = EnvConfig { grid_width: 60, max_steps: 1, sight_range: 1, attack_range: 1, ..EnvConfig::battle_3v3() };
        let (s, _) = reset(&c).unwrap();
        let (_, _, r) = step(&c, &s, &[0, 0, 0]).unwrap();
        assert!(r.done && !r.win);
    }

    #[test]
    fn enemy_strikes_back() {
        let (c, s) = duel(3);
        let (next, _, r) = step(&c, &s, &[0]).unwrap();
        assert_eq!(next.allies[0].hp, c.ally_hp - c.attack_damage);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn out_of_range_attack_falls_back_to_noop() {
        let (c, mut s) = duel(3);
        s.enemies[0].x = 5;
        s.allies[0].x = 0;
        let (next, _, r) = step(&c, &s, &[5]).unwrap();
        assert_eq!(r.noop_fallbacks, vec![0]);
        assert_eq!(next.enemies[0].hp, 3);
    }

    #[test]
    fn malformed_actions_are_rejected() {
        let (c, mut s) = duel(3);
        assert!(matches!(step(&c, &s, &[99]), Err(EnvError::MalformedAction { .. })));
        assert!(matches!(step(&c, &s, &[0, 0]), Err(EnvError::ActionCount { .. })));
        s.allies[0].hp = 0;
        assert!(matches!(step(&c, &s, &[1]), Err(EnvError::MalformedAction { agent: 0, action: 1 })));
    }

    #[test]
    fn corridor_without_hazards_has_no_deaths() {
        let c = EnvConfig { n_hazards: 0, ..EnvConfig::corridor_10() };
        let (mut s, _) = reset(&c).unwrap();
        while !s.done {
            let (next, _, r) = corridor_step(&c, &s, &vec![1; 10]).unwrap();
            assert_eq!(r.deaths, 0);
            s = next;
        }
        assert!(s.allies.iter().all(|u| u.x == c.lane_length - 1));
    }

    #[test]
    fn corridor_hazard_kills() {
        let c = EnvConfig::corridor_10();
        let (mut s, _) = reset(&c).unwrap();
        s.hazards = vec![false; c.lane_length];
        s.hazards[1] = true;
        let mut actions = vec![0; 10];
        actions[4] = 1;
        let (next, _, r) = corridor_step(&c, &s, &actions).unwrap();
        assert!(r.deaths >= 1);
        assert!(!next.allies[4].alive());
        assert!(!r.done);
    }

    #[test]
    fn corridor_majority_loss_ends_episode() {
        let c = EnvConfig::corridor_10();
        let (mut s, _) = reset(&c).unwrap();
        s.hazards = vec![false; c.lane_length];
        s.hazards[1] = true;
        let actions: Vec<usize> = (0..10).map(|i| if i < 6 { 1 } else { 0 }).collect();
        let (_, _, r) = corridor_step(&c, &s, &actions).unwrap();
        assert_eq!(r.deaths, 6);
        assert!(r.done && !r.win);

        let (mut s, _) = reset(&c).unwrap();
        s.hazards = vec![false; c.lane_length];
        s.hazards[1] = true;
        let actions: Vec<usize> = (0..10).map(|i| if i < 5 { 1 } else { 0 }).collect();
        let (_, _, r) = corridor_step(&c, &s, &actions).unwrap();
        assert!(!r.done, "exactly half eliminated is not more than half");
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(1, 3), derive_seed(1, 3));
    }
}
