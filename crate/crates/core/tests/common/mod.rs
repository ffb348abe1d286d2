#![allow(dead_code)]

pub mod digm;
pub mod gradcheck;

use marlbar::battlegrid::{derive_seed, EnvConfig, Environment, Observation};
use marlbar::diffcore::{ParamStore, Tape, Var};
use marlbar::trainloop::{run_episode, Controller, TrainError};
use marlbar::Episode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdStats {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates skipped because one-sided slopes disagree (a kink lies
    /// within the step).
    pub kinks: usize,
}

impl FdStats {
    pub fn merge(&mut self, other: FdStats) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Central differences against the tape gradient, on `coords` (or every
/// coordinate when `None`).
pub fn fd_check<F, E>(store: &ParamStore, step: f64, coords: Option<&[usize]>, mut loss_fn: F) -> FdStats
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, E>,
    E: std::fmt::Debug,
{
    let mut tape = Tape::new();
    let out = loss_fn(store, &mut tape).expect("loss builds");
    let center = tape.value(out).item();
    let analytic = tape.backward(out, store).expect("backward");
    let mut eval = |p: &ParamStore| {
        let mut t = Tape::new();
        let v = loss_fn(p, &mut t).expect("loss builds");
        t.value(v).item()
    };
    let all: Vec<usize> = (0..store.numel()).collect();
    let coords = coords.unwrap_or(&all);
    let mut probe = store.clone();
    let mut stats = FdStats::default();
    for &i in coords {
        let orig = *probe.flat_mut(i);
        *probe.flat_mut(i) = orig + step;
        let plus = eval(&probe);
        *probe.flat_mut(i) = orig - step;
        let minus = eval(&probe);
        *probe.flat_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let fwd = (plus - center) / step;
        let bwd = (center - minus) / step;
        if (fwd - bwd).abs() > 1e-3 * numeric.abs().max(1.0) {
            stats.kinks += 1;
            continue;
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        stats.max_rel = stats.max_rel.max(err);
        stats.checked += 1;
    }
    stats
}

/// Uniformly random legal actions.
pub struct RandomController;

impl Controller for RandomController {
    fn begin_episode(&mut self) {}

    fn act(&mut self, _: &[Observation], legal: &[Vec<bool>], rng: &mut ChaCha8Rng) -> Result<Vec<usize>, TrainError> {
        Ok(legal
            .iter()
            .map(|l| {
                let ok: Vec<usize> = (0..l.len()).filter(|&a| l[a]).collect();
                ok[rng.gen_range(0..ok.len())]
            })
            .collect())
    }
}

pub fn random_episodes(env: &EnvConfig, count: usize, seed: u64) -> Vec<Episode> {
    let mut e = Environment::new(env.clone()).expect("valid env");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|j| run_episode(&mut e, derive_seed(seed, j as u64), &mut RandomController, &mut rng).expect("episode"))
        .collect()
}

/// Small battle or corridor variants.
pub fn tiny_env<R: Rng>(rng: &mut R) -> EnvConfig {
    if rng.gen_bool(0.7) {
        let n_allies = rng.gen_range(1..=2);
        EnvConfig {
            grid_width: 6,
            grid_height: 3,
            n_allies,
            n_enemies: rng.gen_range(1..=2),
            max_steps: rng.gen_range(3..=6),
            ..EnvConfig::battle_3v3()
        }
    } else {
        EnvConfig {
            n_allies: 2,
            lane_length: 5,
            n_hazards: 1,
            max_steps: rng.gen_range(3..=6),
            ..EnvConfig::corridor_10()
        }
    }
}

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}
