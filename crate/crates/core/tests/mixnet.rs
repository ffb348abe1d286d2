mod common;

use common::digm::{joint_argmax_agrees, Instance};
use marlbar::diffcore::{Tape, Tensor};
use marlbar::mixnet::one_hot;
use marlbar::policynet::greedy_action;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn joint_argmax_equals_local_argmaxes() {
    for seed in 0..500 {
        assert!(joint_argmax_agrees(seed), "instance {seed}");
    }
}

#[test]
fn tape_mixing_masks_illegal_actions_in_the_state_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = Instance::random(&mut rng);
    let n = inst.z.len();
    let u = inst.legal[0].len();
    let k = inst.taus.len();
    let actions: Vec<usize> = (0..n).map(|i| greedy_action(&inst.q(i), &inst.legal[i]).unwrap()).collect();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_fn(n * k, u, |r, a| inst.z[r / k][a][r % k]));
    let q = tape.mean_row_groups(z, k).unwrap();
    let s = tape.constant(Tensor::row(inst.state.clone()));
    let h = tape.constant(Tensor::row(inst.summary.clone()));
    let enc = inst.mixer.encode(&mut tape, &inst.store, s, h).unwrap();
    let f = tape.constant(Tensor::matrix(n, inst.features[0].len(), inst.features.concat()).unwrap());
    let oh = tape.constant(one_hot(&actions, u));
    let lam = inst.mixer.lambda_weights(&mut tape, &inst.store, enc, f, oh).unwrap();
    let mask = tape.constant(Tensor::from_fn(n, u, |i, a| if inst.legal[i][a] { 0.0 } else { -1e9 }));
    let joint = inst.mixer.mix_on_tape(&mut tape, q, z, lam, mask, &actions, k).unwrap();
    let on_tape: f64 = tape.value(joint).data().iter().sum::<f64>() / k as f64;
    assert!((on_tape - inst.joint_mean(&actions)).abs() <= 1e-9);
}
