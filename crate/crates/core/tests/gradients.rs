mod common;

use common::gradcheck::{Case, STEP};
use common::FdStats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(case: Case, configs: u64) -> FdStats {
    let mut total = FdStats::default();
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let s = case.run(&mut rng);
        assert!(s.max_rel <= 1e-4, "{case:?} seed {seed}: {s:?}");
        total.merge(s);
    }
    assert!(total.checked > 0);
    assert!(total.kinks * 100 <= total.checked, "{case:?}: too many kink skips {total:?}");
    eprintln!("{case:?} step={STEP}: {total:?}");
    total
}

#[test]
fn policy_network_gradients_match_differences() {
    check(Case::Policy, 20);
}

#[test]
fn mixer_and_barrier_head_gradients_match_differences() {
    check(Case::Mixer, 20);
}

#[test]
fn loss_gradients_match_differences() {
    check(Case::Losses, 20);
}

#[test]
fn training_loss_gradients_match_differences() {
    check(Case::Training, 10);
}
