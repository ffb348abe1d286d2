use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{EnvConfig, EnvState, Observation, StepResult, Unit, SLOT_FEATURES};

const ADVANCE: usize = 1;
const JUMP: usize = 2;

pub(super) fn initial_state(config: &EnvConfig, rng: &mut ChaCha8Rng) -> EnvState {
    let len = config.lane_length;
    // odd interior cells are pairwise non-adjacent, so a jump always clears a hazard
    let mut candidates: Vec<usize> = (1..len - 1).step_by(2).collect();
    candidates.shuffle(rng);
    let mut hazards = vec![false; len];
    for &c in candidates.iter().take(config.n_hazards) {
        hazards[c] = true;
    }
    let allies = (0..config.n_allies).map(|_| Unit { x: 0, y: 0, hp: config.ally_hp }).collect();
    EnvState { allies, enemies: Vec::new(), step: 0, done: false, hazards, seed: config.seed }
}

fn goal(config: &EnvConfig) -> usize {
    config.lane_length - 1
}

pub(super) fn legal(config: &EnvConfig, state: &EnvState, agent: usize, mask: &mut [bool]) {
    if state.allies[agent].x < goal(config) {
        mask[ADVANCE] = true;
        mask[JUMP] = true;
    }
}

pub(super) fn advance(config: &EnvConfig, state: &EnvState, joint_action: &[usize]) -> (EnvState, StepResult) {
    let mut s = state.clone();
    let end = goal(config);
    let mut reward = 0.0;
    let mut deaths = 0;
    let mut fallbacks = Vec::new();
    for (i, &a) in joint_action.iter().enumerate() {
        let me = s.allies[i];
        if !me.alive() || a == 0 {
            continue;
        }
        if me.x >= end {
            fallbacks.push(i);
            continue;
        }
        let to = if a == JUMP { (me.x + 2).min(end) } else { me.x + 1 };
        if s.hazards[to] {
            s.allies[i].hp = 0;
            deaths += 1;
            continue;
        }
        reward += config.progress_reward * (to - me.x) as f64;
        if to == end {
            reward += config.goal_bonus;
        }
        s.allies[i].x = to;
    }
    s.step += 1;
    let n = s.allies.len();
    let dead = n - s.allies_alive();
    let eliminated = 2 * dead > n;
    let arrived = s.allies_alive() > 0 && s.allies.iter().filter(|u| u.alive()).all(|u| u.x == end);
    let win = arrived && !eliminated;
    s.done = eliminated || arrived || s.step >= config.max_steps;
    let done = s.done;
    (s, StepResult { reward, deaths, done, win, noop_fallbacks: fallbacks })
}

pub(super) fn observe(config: &EnvConfig, state: &EnvState, agent: usize) -> Observation {
    let mut out = vec![0.0; config.obs_len()];
    let me = state.allies[agent];
    if !me.alive() {
        return Observation(out);
    }
    let sight = config.sight_range.max(1) as f64;
    let others = state.allies.iter().enumerate().filter(|(i, _)| *i != agent).map(|(_, u)| u);
    for (slot, u) in others.enumerate() {
        let dist = u.x.abs_diff(me.x);
        if !u.alive() || dist > config.sight_range {
            continue;
        }
        let f = &mut out[slot * SLOT_FEATURES..(slot + 1) * SLOT_FEATURES];
        f[0] = (u.x as f64 - me.x as f64) / sight;
        f[2] = dist as f64 / sight;
        f[3] = u.hp as f64 / config.ally_hp as f64;
        f[4] = 1.0;
    }
    let own = out.len() - 4;
    let hazard_at = |p: usize| if state.hazards.get(p).copied().unwrap_or(false) { 1.0 } else { 0.0 };
    out[own] = me.hp as f64 / config.ally_hp as f64;
    out[own + 1] = me.x as f64 / goal(config) as f64;
    out[own + 2] = hazard_at(me.x + 1);
    out[own + 3] = hazard_at(me.x + 2);
    Observation(out)
}
