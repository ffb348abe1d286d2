//! Command dispatch and experiment recipes.
//!
//! Output layout under `--out`:
//!
//! ```text
//! seed-<s>/config.txt              fully rendered configuration
//! seed-<s>/metrics.csv             one row per evaluation
//! seed-<s>/checkpoint-<epoch>.txt  every `checkpoint_every` evaluations
//! seed-<s>/checkpoint-final.txt
//! seed-<s>/trajectories.log        greedy episodes for `verify`
//! seed-<s>/eval.log                written by `eval`
//! seed-<s>/certificate.txt         written by `verify`
//! gamma_b_<v>_seed_<s>.csv         ablate-gamma-b
//! beta_q_<v>_seed_<s>.csv          ablate-beta
//! smoke_seed_<s>.csv               smoke
//! ```

mod config;
mod metrics;

pub use config::{load_config, CertifyConfig, ConfigError, Origin, RunConfig, ENV_PREFIX};
pub use metrics::{
    format_row, parse_metrics, read_metrics, write_metrics, MetricsError, MetricsWriter, METRICS_HEADER,
};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::battlegrid::log::write_log;
use crate::battlegrid::{derive_seed, EnvConfig};
use crate::certify::{certify_log, CertifyError};
use crate::policynet::checkpoint::{config_hash, Checkpoint, CheckpointError};
use crate::trainloop::{evaluate, EvalSummary, Learner, TrainError, Trainer};

/// Barrier discounts swept by `ablate-gamma-b`.
pub const GAMMA_B_SWEEP: [f64; 5] = [0.4, 0.5, 0.7, 0.9, 0.99];
/// Return-gradient weights swept by `ablate-beta`; the barrier weight is `1 − β_Q`.
pub const BETA_Q_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
/// Wall-clock budget for `smoke`.
pub const SMOKE_BUDGET: Duration = Duration::from_secs(60);

const STREAM_CERTIFY: u64 = 6;
const STREAM_EVAL: u64 = 7;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("verification: {0}")]
    Certify(#[from] CertifyError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid run spec: {0}")]
    Spec(String),
    #[error("{path} not found; {hint}")]
    Missing { path: PathBuf, hint: &'static str },
    #[error("smoke run took {0:.1?}, over the {SMOKE_BUDGET:?} budget")]
    SmokeBudget(Duration),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Verify,
    AblateGammaB,
    AblateBeta,
    Smoke,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Command::Train, Command::Eval, Command::Verify, Command::AblateGammaB, Command::AblateBeta, Command::Smoke];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Verify => "verify",
            Command::AblateGammaB => "ablate-gamma-b",
            Command::AblateBeta => "ablate-beta",
            Command::Smoke => "smoke",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| HarnessError::Spec(format!("unknown command `{s}`")))
    }
}

/// Parses `1,2,5` or ranges such as `0-4`.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>, HarnessError> {
    let mut seeds = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || HarnessError::Spec(format!("bad seed `{part}`"));
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    if seeds.is_empty() {
        return Err(HarnessError::Spec("seed list is empty".into()));
    }
    Ok(seeds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub command: Command,
    pub config: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Spec("seed list is empty".into()));
        }
        if !self.config.is_file() {
            return Err(HarnessError::Missing { path: self.config.clone(), hint: "pass an existing --config file" });
        }
        Ok(())
    }
}

/// Summary lines and files produced by a command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_err(path))
}

fn seed_dir(out: &Path, seed: u64) -> Result<PathBuf, HarnessError> {
    let dir = out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn with_seed(config: &RunConfig, seed: u64) -> RunConfig {
    let mut c = config.clone();
    c.train.seed = seed;
    c
}

/// Trains one seed, streaming metrics to `metrics` and optionally writing
/// checkpoints into `checkpoints`.
pub fn train_run(
    config: &RunConfig,
    metrics: &Path,
    checkpoints: Option<&Path>,
    command: Command,
) -> Result<Trainer, HarnessError> {
    let hash = config_hash(&config.architecture_key());
    let comments = [
        ("command", command.to_string()),
        ("seed", config.train.seed.to_string()),
        ("scenario", config.env.scenario.as_str().to_string()),
        ("gamma_b", config.train.gamma_b.to_string()),
        ("beta_q", config.train.beta_q.to_string()),
        ("beta_b", config.train.beta_b.to_string()),
        ("barrier", config.train.barrier.to_string()),
    ];
    let mut writer = MetricsWriter::create(metrics, &comments)?;
    let mut trainer = Trainer::new(config.train.clone(), config.env.clone())?;
    writer.push(&trainer.metrics_row()?)?;
    let mut evaluations = 0usize;
    while !trainer.finished() {
        trainer.run_epoch()?;
        if trainer.should_evaluate() {
            let row = trainer.metrics_row()?;
            writer.push(&row)?;
            evaluations += 1;
            if let Some(dir) = checkpoints {
                if evaluations % config.train.checkpoint_every == 0 {
                    Checkpoint::from_store(&trainer.learner.store, hash.clone())
                        .save(&dir.join(format!("checkpoint-{}.txt", row.epoch)))?;
                }
            }
        }
    }
    if let Some(dir) = checkpoints {
        Checkpoint::from_store(&trainer.learner.store, hash).save(&dir.join("checkpoint-final.txt"))?;
    }
    Ok(trainer)
}

fn write_episodes(path: &Path, seed: u64, summary: &EvalSummary) -> Result<(), HarnessError> {
    let records: Vec<_> = summary.episodes.iter().enumerate().flat_map(|(i, e)| e.records(i as u64)).collect();
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_log(std::io::BufWriter::new(file), Some(seed), &records).map_err(io_err(path))
}

fn load_learner(config: &RunConfig, dir: &Path) -> Result<(Learner, usize), HarnessError> {
    let path = dir.join("checkpoint-final.txt");
    if !path.is_file() {
        return Err(HarnessError::Missing { path, hint: "run `train` with the same --out and seeds first" });
    }
    let ckpt = Checkpoint::load(&path)?;
    let mut learner = Learner::for_env(&config.env, &config.train, &mut ChaCha8Rng::seed_from_u64(0));
    ckpt.restore(&mut learner.store, Some(&config_hash(&config.architecture_key())))?;
    learner.sync_target();
    let count = ckpt.params.len();
    Ok((learner, count))
}

fn run_train(config: &RunConfig, out: &Path, seed: u64, report: &mut RunReport) -> Result<(), HarnessError> {
    let config = with_seed(config, seed);
    let dir = seed_dir(out, seed)?;
    let cfg_path = dir.join("config.txt");
    write_file(&cfg_path, &config.render())?;
    let metrics = dir.join("metrics.csv");
    let trainer = train_run(&config, &metrics, Some(&dir), Command::Train)?;
    let cert_seed = derive_seed(seed, STREAM_CERTIFY);
    let summary = evaluate(
        &mut trainer.learner.controller(0.0),
        &config.env,
        config.certify.n_samples,
        cert_seed,
    )?;
    let log = dir.join("trajectories.log");
    write_episodes(&log, cert_seed, &summary)?;
    let last = read_metrics(&metrics)?.pop();
    if let Some(r) = last {
        report.lines.push(format!(
            "seed={seed} epochs={} steps={} win_rate={} deaths={} return={}",
            r.epoch, r.steps, r.win_rate, r.mean_deaths, r.mean_return
        ));
    }
    report.files.extend([cfg_path, metrics, dir.join("checkpoint-final.txt"), log]);
    Ok(())
}

fn run_eval(config: &RunConfig, out: &Path, seed: u64, report: &mut RunReport) -> Result<(), HarnessError> {
    let config = with_seed(config, seed);
    let dir = out.join(format!("seed-{seed}"));
    let (learner, _) = load_learner(&config, &dir)?;
    let eval_seed = derive_seed(seed, STREAM_EVAL);
    let summary = evaluate(&mut learner.controller(0.0), &config.env, config.train.eval_episodes, eval_seed)?;
    let log = dir.join("eval.log");
    write_episodes(&log, eval_seed, &summary)?;
    report.lines.push(format!(
        "seed={seed} episodes={} win_rate={} deaths={} return={}",
        config.train.eval_episodes, summary.win_rate, summary.mean_deaths, summary.mean_return
    ));
    report.files.push(log);
    Ok(())
}

fn run_verify(config: &RunConfig, out: &Path, seed: u64, report: &mut RunReport) -> Result<(), HarnessError> {
    let dir = out.join(format!("seed-{seed}"));
    let log = dir.join("trajectories.log");
    if !log.is_file() {
        return Err(HarnessError::Missing { path: log, hint: "run `train` first or place a trajectory log there" });
    }
    let params = match config.certify.param_count {
        Some(_) => 0,
        None => load_learner(&with_seed(config, seed), &dir)?.1,
    };
    let query = config.certify.query(config.env.n_agents(), params);
    let text = fs::read_to_string(&log).map_err(io_err(&log))?;
    let cert = certify_log(&text, &query)?;
    let rendered = cert.render();
    let path = dir.join("certificate.txt");
    write_file(&path, &rendered)?;
    report.lines.push(format!(
        "seed={seed} epsilon={} violations={} satisfied={}",
        cert.epsilon, cert.violations, cert.satisfied
    ));
    report.files.push(path);
    Ok(())
}

fn run_sweep(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    command: Command,
    report: &mut RunReport,
) -> Result<(), HarnessError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let values: &[f64] = match command {
        Command::AblateGammaB => &GAMMA_B_SWEEP,
        _ => &BETA_Q_SWEEP,
    };
    for &v in values {
        let mut c = with_seed(config, seed);
        let name = match command {
            Command::AblateGammaB => {
                c.train.gamma_b = v;
                format!("gamma_b_{v}_seed_{seed}.csv")
            }
            _ => {
                c.train.beta_q = v;
                c.train.beta_q_plus = v;
                c.train.beta_b = 1.0 - v;
                c.train.beta_b_plus = 1.0 - v;
                format!("beta_q_{v}_seed_{seed}.csv")
            }
        };
        let path = out.join(name);
        train_run(&c, &path, None, command)?;
        report.lines.push(format!("wrote {}", path.display()));
        report.files.push(path);
    }
    Ok(())
}

/// Shrinks a config to the tiny battle used by `smoke`.
pub fn smoke_config(base: &RunConfig) -> RunConfig {
    let mut c = base.clone();
    c.env = EnvConfig {
        grid_width: 6,
        grid_height: 4,
        n_allies: 2,
        n_enemies: 2,
        max_steps: 12,
        ..EnvConfig::battle_3v3()
    };
    let t = &mut c.train;
    t.epochs = 6;
    t.batch_size = 2;
    t.eval_interval = 3;
    t.eval_episodes = 2;
    t.hidden_dim = 8;
    t.rnn_hidden_dim = 8;
    t.embed_dim = 4;
    t.n_quantiles = 4;
    t.epsilon_anneal_steps = 40;
    c.certify.n_samples = 5;
    c.certify.param_count = Some(1);
    c
}

fn run_smoke(config: &RunConfig, out: &Path, seed: u64, report: &mut RunReport) -> Result<(), HarnessError> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let c = with_seed(&smoke_config(config), seed);
    let path = out.join(format!("smoke_seed_{seed}.csv"));
    let trainer = train_run(&c, &path, None, Command::Smoke)?;
    let rows = read_metrics(&path)?;
    if rows.len() < 2 {
        return Err(HarnessError::Spec(format!("smoke run produced {} metrics rows", rows.len())));
    }
    let summary = evaluate(&mut trainer.learner.controller(0.0), &c.env, c.certify.n_samples, seed)?;
    let mut log = Vec::new();
    let records: Vec<_> = summary.episodes.iter().enumerate().flat_map(|(i, e)| e.records(i as u64)).collect();
    write_log(&mut log, Some(seed), &records).map_err(io_err(&path))?;
    let cert = certify_log(&String::from_utf8_lossy(&log), &c.certify.query(c.env.n_agents(), 0))?;
    let elapsed = start.elapsed();
    if elapsed > SMOKE_BUDGET {
        return Err(HarnessError::SmokeBudget(elapsed));
    }
    report.lines.push(format!(
        "smoke seed={seed} rows={} epsilon={:.6} elapsed={:.2}s",
        rows.len(),
        cert.epsilon,
        elapsed.as_secs_f64()
    ));
    report.files.push(path);
    Ok(())
}

/// Runs `spec.command` for every seed with an already-loaded config.
pub fn run_with_config(spec: &RunSpec, config: &RunConfig) -> Result<RunReport, HarnessError> {
    if spec.seeds.is_empty() {
        return Err(HarnessError::Spec("seed list is empty".into()));
    }
    fs::create_dir_all(&spec.out).map_err(io_err(&spec.out))?;
    let mut report = RunReport::default();
    for &seed in &spec.seeds {
        match spec.command {
            Command::Train => run_train(config, &spec.out, seed, &mut report)?,
            Command::Eval => run_eval(config, &spec.out, seed, &mut report)?,
            Command::Verify => run_verify(config, &spec.out, seed, &mut report)?,
            Command::AblateGammaB | Command::AblateBeta => {
                run_sweep(config, &spec.out, seed, spec.command, &mut report)?
            }
            Command::Smoke => run_smoke(config, &spec.out, seed, &mut report)?,
        }
    }
    Ok(report)
}

/// Loads the config named by `spec` (with `MB_*` overrides) and runs it.
pub fn run_command(spec: &RunSpec) -> Result<RunReport, HarnessError> {
    spec.validate()?;
    let config = load_config(&spec.config)?;
    run_with_config(spec, &config)
}
