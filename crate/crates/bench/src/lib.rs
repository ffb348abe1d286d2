//! Fixtures shared by the benchmarks.

use marlbar::battlegrid::{derive_seed, EnvConfig, Environment, Observation};
use marlbar::trainloop::{run_episode, Controller, TrainError};
use marlbar::Episode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Picks a uniformly random legal action for every agent.
pub struct RandomController;

impl Controller for RandomController {
    fn begin_episode(&mut self) {}

    fn act(&mut self, _: &[Observation], legal: &[Vec<bool>], rng: &mut ChaCha8Rng) -> Result<Vec<usize>, TrainError> {
        Ok(legal
            .iter()
            .map(|l| {
                let choices: Vec<usize> = (0..l.len()).filter(|&a| l[a]).collect();
                choices[rng.gen_range(0..choices.len())]
            })
            .collect())
    }
}

/// `count` random-play episodes of `env`.
pub fn random_episodes(env: &EnvConfig, count: usize, seed: u64) -> Vec<Episode> {
    let mut e = Environment::new(env.clone()).expect("valid env");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|j| run_episode(&mut e, derive_seed(seed, j as u64), &mut RandomController, &mut rng).expect("episode"))
        .collect()
}
