use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{chebyshev, EnvConfig, EnvState, Observation, StepResult, Unit, SLOT_FEATURES};

const MOVES: [(isize, isize); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];
const ATTACK_BASE: usize = 5;

pub(super) fn initial_state(config: &EnvConfig, rng: &mut ChaCha8Rng) -> EnvState {
    let band = config.band_width();
    let place = |cols: std::ops::Range<usize>, n: usize, hp: u32, rng: &mut ChaCha8Rng| {
        let mut cells: Vec<(usize, usize)> =
            cols.flat_map(|x| (0..config.grid_height).map(move |y| (x, y))).collect();
        cells.shuffle(rng);
        cells.into_iter().take(n).map(|(x, y)| Unit { x, y, hp }).collect::<Vec<_>>()
    };
    let allies = place(0..band, config.n_allies, config.ally_hp, rng);
    let enemies = place(config.grid_width - band..config.grid_width, config.n_enemies, config.enemy_hp, rng);
    EnvState { allies, enemies, step: 0, done: false, hazards: Vec::new(), seed: config.seed }
}

fn occupied(state: &EnvState, x: usize, y: usize) -> bool {
    state.allies.iter().chain(&state.enemies).any(|u| u.alive() && u.x == x && u.y == y)
}

fn target_cell(config: &EnvConfig, unit: &Unit, dir: usize) -> Option<(usize, usize)> {
    let (dx, dy) = MOVES[dir];
    let x = unit.x.checked_add_signed(dx)?;
    let y = unit.y.checked_add_signed(dy)?;
    (x < config.grid_width && y < config.grid_height).then_some((x, y))
}

fn free_target(config: &EnvConfig, state: &EnvState, unit: &Unit, dir: usize) -> Option<(usize, usize)> {
    target_cell(config, unit, dir).filter(|&(x, y)| !occupied(state, x, y))
}

pub(super) fn legal(config: &EnvConfig, state: &EnvState, agent: usize, mask: &mut [bool]) {
    let me = state.allies[agent];
    for dir in 0..4 {
        mask[1 + dir] = free_target(config, state, &me, dir).is_some();
    }
    for (j, e) in state.enemies.iter().enumerate() {
        mask[ATTACK_BASE + j] = e.alive() && chebyshev(&me, e) <= config.attack_range;
    }
}

/// Nearest living ally to `from`, lowest index on ties.
fn nearest_ally(state: &EnvState, from: &Unit) -> Option<usize> {
    state
        .allies
        .iter()
        .enumerate()
        .filter(|(_, a)| a.alive())
        .min_by_key(|(i, a)| (chebyshev(from, a), *i))
        .map(|(i, _)| i)
}

fn enemy_turn(config: &EnvConfig, state: &mut EnvState) -> usize {
    let mut deaths = 0;
    for j in 0..state.enemies.len() {
        let me = state.enemies[j];
        if !me.alive() {
            continue;
        }
        let Some(t) = nearest_ally(state, &me) else { break };
        let target = state.allies[t];
        if chebyshev(&me, &target) <= config.attack_range {
            let hit = config.attack_damage.min(target.hp);
            state.allies[t].hp -= hit;
            if state.allies[t].hp == 0 {
                deaths += 1;
            }
            continue;
        }
        let dx = target.x as isize - me.x as isize;
        let dy = target.y as isize - me.y as isize;
        let horizontal = if dx > 0 { 2 } else { 3 };
        let vertical = if dy > 0 { 1 } else { 0 };
        let order: Vec<usize> = match (dx != 0, dy != 0) {
            (true, true) if dx.abs() >= dy.abs() => vec![horizontal, vertical],
            (true, true) => vec![vertical, horizontal],
            (true, false) => vec![horizontal],
            (false, true) => vec![vertical],
            (false, false) => vec![],
        };
        for dir in order {
            if let Some((x, y)) = free_target(config, state, &me, dir) {
                state.enemies[j].x = x;
                state.enemies[j].y = y;
                break;
            }
        }
    }
    deaths
}

pub(super) fn advance(config: &EnvConfig, state: &EnvState, joint_action: &[usize]) -> (EnvState, StepResult) {
    let mut s = state.clone();
    let mut fallbacks = Vec::new();
    let mut damage = 0u32;
    let mut kills = 0usize;

    for (i, &a) in joint_action.iter().enumerate() {
        let me = s.allies[i];
        if !me.alive() || a == 0 {
            continue;
        }
        if a < ATTACK_BASE {
            match free_target(config, &s, &me, a - 1) {
                Some((x, y)) => {
                    s.allies[i].x = x;
                    s.allies[i].y = y;
                }
                None => fallbacks.push(i),
            }
        } else {
            let j = a - ATTACK_BASE;
            let enemy = s.enemies[j];
            if !enemy.alive() || chebyshev(&me, &enemy) > config.attack_range {
                fallbacks.push(i);
                continue;
            }
            let hit = config.attack_damage.min(enemy.hp);
            s.enemies[j].hp -= hit;
            damage += hit;
            if s.enemies[j].hp == 0 {
                kills += 1;
            }
        }
    }

    let win = s.enemies_alive() == 0;
    let deaths = if win { 0 } else { enemy_turn(config, &mut s) };
    s.step += 1;
    let wiped = s.allies_alive() == 0;
    s.done = win || wiped || s.step >= config.max_steps;

    let mut reward = config.damage_reward_scale * damage as f64 + config.kill_reward * kills as f64;
    if win {
        reward += config.win_reward;
    }
    (s.clone(), StepResult { reward, deaths, done: s.done, win, noop_fallbacks: fallbacks })
}

pub(super) fn observe(config: &EnvConfig, state: &EnvState, agent: usize) -> Observation {
    let mut out = vec![0.0; config.obs_len()];
    let me = state.allies[agent];
    if !me.alive() {
        return Observation(out);
    }
    let sight = config.sight_range.max(1) as f64;
    let others = state
        .allies
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != agent)
        .map(|(_, u)| (u, config.ally_hp, 1.0))
        .chain(state.enemies.iter().map(|u| (u, config.enemy_hp, -1.0)));
    for (slot, (u, max_hp, flag)) in others.enumerate() {
        let dist = chebyshev(&me, u);
        if !u.alive() || dist > config.sight_range {
            continue;
        }
        let f = &mut out[slot * SLOT_FEATURES..(slot + 1) * SLOT_FEATURES];
        f[0] = (u.x as f64 - me.x as f64) / sight;
        f[1] = (u.y as f64 - me.y as f64) / sight;
        f[2] = dist as f64 / sight;
        f[3] = u.hp as f64 / max_hp as f64;
        f[4] = flag;
    }
    let last = out.len() - 1;
    out[last] = me.hp as f64 / config.ally_hp as f64;
    Observation(out)
}

pub(super) fn global_state(config: &EnvConfig, state: &EnvState) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.state_len());
    let w = config.grid_width.max(2) as f64 - 1.0;
    let h = config.grid_height.max(2) as f64 - 1.0;
    for (units, max_hp) in [(&state.allies, config.ally_hp), (&state.enemies, config.enemy_hp)] {
        for u in units {
            if u.alive() {
                out.extend([u.x as f64 / w, u.y as f64 / h, u.hp as f64 / max_hp as f64]);
            } else {
                out.extend([0.0; 3]);
            }
        }
    }
    out.push(state.step as f64 / config.max_steps as f64);
    out
}
