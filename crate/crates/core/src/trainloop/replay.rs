use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::battlegrid::{Observation, TrajectoryRecord};

/// One environment step as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observations: Vec<Observation>,
    /// Legal-action mask per agent at this step.
    pub legal: Vec<Vec<bool>>,
    pub state: Vec<f64>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub deaths: usize,
    pub done: bool,
    pub win: bool,
}

/// A complete episode; the last transition has `done = true`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub transitions: Vec<Transition>,
    pub final_observations: Vec<Observation>,
    pub final_state: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn next_observations(&self, t: usize) -> &[Observation] {
        match self.transitions.get(t + 1) {
            Some(next) => &next.observations,
            None => &self.final_observations,
        }
    }

    pub fn next_state(&self, t: usize) -> &[f64] {
        match self.transitions.get(t + 1) {
            Some(next) => &next.state,
            None => &self.final_state,
        }
    }

    pub fn deaths(&self) -> Vec<usize> {
        self.transitions.iter().map(|t| t.deaths).collect()
    }

    /// Total ally deaths over the episode.
    pub fn total_deaths(&self) -> usize {
        self.transitions.iter().map(|t| t.deaths).sum()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn won(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.win)
    }

    pub fn records(&self, episode: u64) -> Vec<TrajectoryRecord> {
        self.transitions
            .iter()
            .enumerate()
            .map(|(step, t)| TrajectoryRecord {
                episode,
                step,
                actions: t.actions.clone(),
                reward: t.reward,
                deaths: t.deaths,
                done: t.done,
                win: t.win,
            })
            .collect()
    }
}

/// Ring buffer of complete episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, episodes: VecDeque::with_capacity(capacity.min(1024)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Stores an episode, evicting the oldest one when full.
    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn newest(&self) -> Option<&Episode> {
        self.episodes.back()
    }

    /// Up to `count` distinct episodes drawn uniformly.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<&Episode> {
        let n = count.min(self.episodes.len());
        index::sample(rng, self.episodes.len(), n).into_iter().map(|i| &self.episodes[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(seed: u64) -> Episode {
        Episode { seed, transitions: Vec::new(), final_observations: Vec::new(), final_state: Vec::new() }
    }

    #[test]
    fn ring_keeps_newest() {
        let mut buf = ReplayBuffer::new(3);
        for s in 0..5 {
            buf.push(episode(s));
            assert!(buf.len() <= 3);
        }
        assert_eq!(buf.len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seeds: Vec<u64> = buf.sample(10, &mut rng).iter().map(|e| e.seed).collect();
        seeds.sort();
        assert_eq!(seeds, vec![2, 3, 4]);
    }

    #[test]
    fn sampling_is_roughly_uniform() {
        let mut buf = ReplayBuffer::new(4);
        for s in 0..4 {
            buf.push(episode(s));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[buf.sample(1, &mut rng)[0].seed as usize] += 1;
        }
        // binomial(4000, 0.25): sd ≈ 27.4
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 4.0 * 27.4, "{counts:?}");
        }
    }
}
