//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `MB_ACCEPT_ONLY=<name>[,<name>]` restricts the run to the named criteria.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::digm::joint_argmax_agrees;
use common::gradcheck::gradient_fidelity;
use marlbar::certify::{epsilon_bound, ln_bound_lhs, SafetyQuery};
use marlbar::diffcore::GradientVector;
use marlbar::harness::{parse_metrics, run_with_config, BETA_Q_SWEEP, GAMMA_B_SWEEP, METRICS_HEADER};
use marlbar::losses::{barrier_invariance_loss, empirical_barrier, pcgrad_combine, project_out};
use marlbar::{Command, CombineWeights, GradientPair, MetricsRow, RunConfig, RunSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NO_VARS: [(&str, &str); 0] = [];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn shipped_config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    RunConfig::parse(&text, NO_VARS).expect("shipped config parses")
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = gradient_fidelity(100, 4242);
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(120);
    let mut parts = Vec::new();
    for (case, stats) in &results {
        let kink_ok = stats.kinks * 100 <= stats.checked;
        pass &= stats.max_rel <= 1e-4 && kink_ok && stats.checked > 0;
        parts.push(format!("{case:?} max_rel={:.2e} checked={} kinks={}", stats.max_rel, stats.checked, stats.kinks));
    }
    outcome(pass, format!("{} in {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn pcgrad() -> Outcome {
    let example = GradientPair {
        g_q: GradientVector(vec![1.0, 0.0]),
        g_b: GradientVector(vec![-1.0, 1.0]),
        weights: CombineWeights::default(),
    };
    let exact = pcgrad_combine(&example).map(|o| o.gradient.0 == [0.25, 0.75]).unwrap_or(false);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut worst_orth, mut worst_dot) = (0.0f64, f64::INFINITY);
    for _ in 0..1000 {
        let d = rng.gen_range(1..32);
        let g_q = GradientVector((0..d).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let g_b = GradientVector((0..d).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let weights = CombineWeights {
            beta_q: rng.gen(),
            beta_b: rng.gen(),
            beta_q_plus: rng.gen(),
            beta_b_plus: rng.gen(),
        };
        worst_orth = worst_orth.max(project_out(&g_q, &g_b).dot(&g_b).abs());
        worst_orth = worst_orth.max(project_out(&g_b, &g_q).dot(&g_q).abs());
        let pair = GradientPair { g_q, g_b, weights };
        let g = pcgrad_combine(&pair).expect("same length").gradient;
        worst_dot = worst_dot.min(g.dot(&pair.g_q)).min(g.dot(&pair.g_b));
    }
    outcome(
        exact && worst_orth <= 1e-10 && worst_dot >= -1e-10,
        format!("worked example exact={exact}, max |p·g|={worst_orth:.2e}, min g·g_i={worst_dot:.2e}"),
    )
}

fn barrier_recursion() -> Outcome {
    const GAMMAS: [f64; 5] = [0.4, 0.5, 0.7, 0.9, 0.99];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=200);
        let deaths: Vec<usize> = (0..len).map(|_| rng.gen_range(0..=3)).collect();
        let gamma = GAMMAS[rng.gen_range(0..GAMMAS.len())];
        let got = empirical_barrier(&deaths, gamma).expect("valid input");
        for (t, g) in got.iter().enumerate() {
            let direct: f64 = deaths[t..].iter().enumerate().map(|(j, &d)| gamma.powi(j as i32) * d as f64).sum();
            worst = worst.max((g - direct).abs() / direct.abs().max(1.0));
        }
    }
    outcome(worst <= 1e-12, format!("max error {worst:.2e} over 1000 sequences"))
}

fn barrier_boundary() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut zero, mut positive) = (true, true);
    for _ in 0..1000 {
        let lambda_b = rng.gen_range(0.01..0.99);
        let len = rng.gen_range(2..60);
        let mut seq = vec![rng.gen_range(0.0..50.0)];
        for t in 1..len {
            let prev: f64 = seq[t - 1];
            seq.push((1.0 - lambda_b) * prev);
        }
        zero &= barrier_invariance_loss(&seq, lambda_b).expect("valid") == 0.0;
        let t = rng.gen_range(1..len);
        seq[t] += rng.gen_range(1e-6..5.0);
        positive &= barrier_invariance_loss(&seq, lambda_b).expect("valid") > 0.0;
    }
    outcome(zero && positive, format!("geometric series zero={zero}, raised state positive={positive}"))
}

fn digm() -> Outcome {
    let agree = (0..500).filter(|&s| joint_argmax_agrees(s)).count();
    outcome(agree == 500, format!("{agree}/500 instances agree"))
}

fn q(n: usize, k: usize, m: usize, beta: f64) -> SafetyQuery {
    SafetyQuery { n_samples: n, removed: k, param_count: m, beta, omega: 2.0 }
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k.min(n - k)).fold(1u128, |acc, j| acc * (n - j) / (j + 1))
}

fn solver() -> Outcome {
    let mut closed = 0.0f64;
    for beta in [0.01, 0.05, 0.1] {
        for n in 10..=1000 {
            let eps = epsilon_bound(&q(n, 0, 1, beta)).expect("valid");
            closed = closed.max((eps - (1.0 - beta.powf(1.0 / n as f64))).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.gen_range(20..400);
        let k = rng.gen_range(0..8);
        let m = rng.gen_range(1..4);
        let beta = rng.gen_range(0.005..0.5);
        let base = epsilon_bound(&q(n, k, m, beta)).expect("valid");
        monotone &= epsilon_bound(&q(n, k + 1, m, beta)).expect("valid") >= base - 1e-12;
        monotone &= epsilon_bound(&q(n + 1, k, m, beta)).expect("valid") <= base + 1e-12;
        monotone &= epsilon_bound(&q(n, k, m, (beta * 1.5).min(1.0))).expect("valid") <= base + 1e-12;
    }
    let mut log_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=30);
        let m = rng.gen_range(1..4);
        let k = rng.gen_range(0..6);
        if k + m > n {
            continue;
        }
        let eps: f64 = rng.gen_range(0.001..0.999);
        let top = k + m - 1;
        let sum: f64 = (0..=top)
            .map(|i| binomial(n as u128, i as u128) as f64 * eps.powi(i as i32) * (1.0 - eps).powi((n - i) as i32))
            .sum();
        let exact = binomial(top as u128, k as u128) as f64 * sum;
        log_err = log_err.max((ln_bound_lhs(n, k, m, eps).exp() - exact).abs() / exact);
    }
    outcome(
        closed <= 1e-8 && monotone && log_err <= 1e-10,
        format!("closed-form error {closed:.2e}, monotone={monotone}, log-space rel error {log_err:.2e}"),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn desk_training() -> Outcome {
    let base = shipped_config("battle_3v3.cfg");
    let quarter = base.train.epochs / 4;
    let start = Instant::now();
    let mut best_win = Vec::new();
    let mut deaths = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        for (slot, barrier) in [(0, true), (1, false)] {
            let mut train = base.train.clone();
            train.seed = seed;
            train.barrier = barrier;
            let rows = marlbar::run_training(&train, &base.env).expect("training runs");
            let at_quarter: &MetricsRow =
                rows.iter().find(|r| r.epoch == quarter).expect("evaluation at the quarter checkpoint");
            deaths[slot].push(at_quarter.mean_deaths);
            if barrier {
                best_win.push(rows.iter().map(|r| r.win_rate).fold(0.0, f64::max));
            }
            eprintln!(
                "  seed={seed} barrier={barrier} deaths@{quarter}={:.3} final win={:.2}",
                at_quarter.mean_deaths,
                rows.last().map_or(0.0, |r| r.win_rate)
            );
        }
    }
    let elapsed = start.elapsed();
    let win = median(best_win);
    let [with, without] = deaths.map(median);
    outcome(
        win >= 0.8 && with < without && elapsed <= Duration::from_secs(30 * 60),
        format!(
            "median win={win:.2}, median deaths@{quarter}: barrier={with:.3} no-barrier={without:.3}, {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn spec(command: Command, out: &Path, seeds: &[u64]) -> RunSpec {
    RunSpec { command, config: out.join("inline.cfg"), out: out.to_path_buf(), seeds: seeds.to_vec() }
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let config = shipped_config("small.cfg");
    let seeds = [0, 1];
    let mut problems = Vec::new();
    for command in [Command::AblateGammaB, Command::AblateBeta] {
        if let Err(e) = run_with_config(&spec(command, dir.path(), &seeds), &config) {
            problems.push(format!("{command}: {e}"));
        }
    }
    let expected_rows = config.train.epochs / config.train.eval_interval + 1;
    let files = GAMMA_B_SWEEP
        .iter()
        .map(|v| format!("gamma_b_{v}"))
        .chain(BETA_Q_SWEEP.iter().map(|v| format!("beta_q_{v}")));
    let mut checked = 0;
    for stem in files {
        for seed in seeds {
            let path = dir.path().join(format!("{stem}_seed_{seed}.csv"));
            checked += 1;
            let Ok(text) = fs::read_to_string(&path) else {
                problems.push(format!("{} missing", path.display()));
                continue;
            };
            if !text.lines().any(|l| l == METRICS_HEADER) {
                problems.push(format!("{stem}: no header"));
            }
            match parse_metrics(&text) {
                Ok(rows) if rows.len() == expected_rows => {}
                Ok(rows) => problems.push(format!("{stem}: {} rows", rows.len())),
                Err(e) => problems.push(format!("{stem}: {e}")),
            }
        }
    }
    let detail = if problems.is_empty() {
        format!("{checked} files with {expected_rows} rows each")
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

fn determinism() -> Outcome {
    let config = shipped_config("small.cfg");
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().expect("temp dir");
            run_with_config(&spec(Command::Train, dir.path(), &[7]), &config).expect("training runs");
            fs::read(dir.path().join("seed-7").join("metrics.csv")).expect("metrics written")
        })
        .collect();
    outcome(runs[0] == runs[1], format!("{} bytes, identical={}", runs[0].len(), runs[0] == runs[1]))
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    ("gradients", gradients),
    ("pcgrad", pcgrad),
    ("barrier-recursion", barrier_recursion),
    ("barrier-boundary", barrier_boundary),
    ("digm", digm),
    ("solver", solver),
    ("desk-training", desk_training),
    ("ablation-csv", ablation),
    ("determinism", determinism),
];

fn main() -> ExitCode {
    let only: Option<Vec<String>> =
        std::env::var("MB_ACCEPT_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = 0;
    for (name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        let result = run();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("{status} {name}: {}", result.detail);
        failed += usize::from(!result.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
