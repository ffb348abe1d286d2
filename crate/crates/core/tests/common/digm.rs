use marlbar::diffcore::ParamStore;
use marlbar::mixnet::{mix_joint_distribution, MixerConfig, MixerNet, LAMBDA_MIN};
use marlbar::policynet::{dueling_split, greedy_action};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::uniform_vec;

/// A random instance: mixer, inputs and per-agent samples.
pub struct Instance {
    pub mixer: MixerNet,
    pub store: ParamStore,
    pub state: Vec<f64>,
    pub summary: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    /// `z[i][a]` holds agent `i`'s samples for action `a`.
    pub z: Vec<Vec<Vec<f64>>>,
    pub legal: Vec<Vec<bool>>,
    pub taus: Vec<f64>,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=3);
        let u = rng.gen_range(2..=4);
        let k = rng.gen_range(1..=5);
        let config = MixerConfig {
            state_len: rng.gen_range(1..=5),
            summary_len: rng.gen_range(1..=4),
            agent_feature_len: rng.gen_range(1..=4),
            n_agents: n,
            n_actions: u,
            embed_dim: rng.gen_range(2..=6),
            lambda_hidden: rng.gen_range(2..=6),
        };
        let mut store = ParamStore::new();
        let mixer = MixerNet::new(config.clone(), &mut store, rng);
        // widen the weights so λ varies strongly with the joint action
        let scale = rng.gen_range(1.0..10.0);
        for i in 0..store.numel() {
            *store.flat_mut(i) = scale * *store.flat_mut(i) + rng.gen_range(-0.5..0.5);
        }
        let legal = (0..n)
            .map(|_| {
                let mut l: Vec<bool> = (0..u).map(|_| rng.gen_bool(0.75)).collect();
                let forced = rng.gen_range(0..u);
                l[forced] = true;
                l
            })
            .collect();
        Self {
            state: uniform_vec(rng, config.state_len, -2.0, 2.0),
            summary: uniform_vec(rng, config.summary_len, -2.0, 2.0),
            features: (0..n).map(|_| uniform_vec(rng, config.agent_feature_len, -2.0, 2.0)).collect(),
            z: (0..n).map(|_| (0..u).map(|_| uniform_vec(rng, k, -5.0, 5.0)).collect()).collect(),
            taus: (0..k).map(|j| (j as f64 + 0.5) / k as f64).collect(),
            legal,
            mixer,
            store,
        }
    }

    pub fn q(&self, i: usize) -> Vec<f64> {
        self.z[i].iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect()
    }

    pub fn joint_mean(&self, actions: &[usize]) -> f64 {
        let n = actions.len();
        let mut v = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        let mut qs = Vec::with_capacity(n);
        for (i, &act) in actions.iter().enumerate() {
            let q = self.q(i);
            let (vi, adv) = dueling_split(&q, &self.legal[i]).unwrap();
            v.push(vi);
            a.push(adv[act]);
            zs.push(self.z[i][act].clone());
            qs.push(q[act]);
        }
        let lambda = self.mixer.lambda_values(&self.store, &self.state, &self.summary, &self.features, actions).unwrap();
        assert!(lambda.iter().all(|&l| l >= LAMBDA_MIN));
        mix_joint_distribution(&v, &a, &lambda, &zs, &qs, &self.taus).unwrap().mean()
    }
}

/// Every legal joint action, first agent varying slowest.
pub fn joint_actions(legal: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for l in legal {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..l.len()).filter(|&a| l[a]).map(move |a| {
                    let mut p = prefix.clone();
                    p.push(a);
                    p
                })
            })
            .collect();
    }
    out
}

/// Whether the best joint action by brute force equals the per-agent greedy
/// actions on instance `seed`.
pub fn joint_argmax_agrees(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = Instance::random(&mut rng);
    let local: Vec<usize> = (0..inst.z.len()).map(|i| greedy_action(&inst.q(i), &inst.legal[i]).unwrap()).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for joint in joint_actions(&inst.legal) {
        let m = inst.joint_mean(&joint);
        if best.as_ref().map_or(true, |(b, _)| m > *b) {
            best = Some((m, joint));
        }
    }
    best.map(|(_, b)| b) == Some(local)
}
