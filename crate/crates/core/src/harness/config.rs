//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! [env]
//! scenario = battle
//! n_allies = 3
//!
//! [train]
//! learning_rate = 0.001
//! omega = auto
//!
//! [certify]
//! n_samples = 100
//! ```
//!
//! Omitted keys keep their defaults. Setting `scenario` switches the env
//! defaults to that scenario's preset before other env keys apply. After the
//! file, variables named `MB_<SECTION>_<KEY>` (for example
//! `MB_TRAIN_LEARNING_RATE`) override individual keys.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::battlegrid::{EnvConfig, Scenario};
use crate::certify::SafetyQuery;
use crate::trainloop::TrainConfig;

pub const ENV_PREFIX: &str = "MB_";

/// Where a configuration value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Var(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Var(v) => write!(f, "environment variable {v}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}: {message}")]
    Syntax { origin: Origin, message: String },
    #[error("{origin}: unknown section [{section}]")]
    UnknownSection { origin: Origin, section: String },
    #[error("{origin}: unknown key `{key}` in [{section}]")]
    UnknownKey { origin: Origin, section: String, key: String },
    #[error("{origin}: invalid value for `{key}`: {message}")]
    Value { origin: Origin, key: String, message: String },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

/// Verification defaults; `omega = None` means `n − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CertifyConfig {
    pub n_samples: usize,
    pub removed: usize,
    /// `None` takes the parameter count from the checkpoint.
    pub param_count: Option<usize>,
    pub beta: f64,
    pub omega: Option<f64>,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self { n_samples: 100, removed: 0, param_count: Some(1), beta: 0.05, omega: None }
    }
}

impl CertifyConfig {
    pub fn query(&self, n_agents: usize, checkpoint_params: usize) -> SafetyQuery {
        SafetyQuery {
            n_samples: self.n_samples,
            removed: self.removed,
            param_count: self.param_count.unwrap_or(checkpoint_params),
            beta: self.beta,
            omega: self.omega.unwrap_or(n_agents.saturating_sub(1) as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub certify: CertifyConfig,
}

enum SetError {
    Unknown,
    Invalid(String),
}

type SetResult = Result<(), SetError>;

fn num<T: std::str::FromStr>(v: &str) -> Result<T, SetError> {
    v.parse::<T>().map_err(|_| SetError::Invalid(format!("cannot parse `{v}`")))
}

fn real(v: &str) -> Result<f64, SetError> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(SetError::Invalid(format!("`{v}` is not finite")))
    }
}

fn open_unit(v: &str) -> Result<f64, SetError> {
    let x = real(v)?;
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(SetError::Invalid(format!("{x} is outside (0, 1)")))
    }
}

fn unit(v: &str) -> Result<f64, SetError> {
    let x = real(v)?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(SetError::Invalid(format!("{x} is outside [0, 1]")))
    }
}

fn positive(v: &str) -> Result<usize, SetError> {
    let x: usize = num(v)?;
    if x > 0 {
        Ok(x)
    } else {
        Err(SetError::Invalid("must be positive".into()))
    }
}

fn positive_real(v: &str) -> Result<f64, SetError> {
    let x = real(v)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(SetError::Invalid(format!("{x} must be positive")))
    }
}

fn non_negative_real(v: &str) -> Result<f64, SetError> {
    let x = real(v)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(SetError::Invalid(format!("{x} must be non-negative")))
    }
}

fn flag(v: &str) -> Result<bool, SetError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(SetError::Invalid(format!("expected true or false, got `{v}`"))),
    }
}

fn auto_or<T>(v: &str, parse: impl Fn(&str) -> Result<T, SetError>) -> Result<Option<T>, SetError> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn set_env(e: &mut EnvConfig, key: &str, v: &str) -> SetResult {
    match key {
        "scenario" => {
            e.scenario = Scenario::parse(v).ok_or_else(|| SetError::Invalid(format!("unknown scenario `{v}`")))?
        }
        "grid_width" => e.grid_width = positive(v)?,
        "grid_height" => e.grid_height = positive(v)?,
        "n_allies" => e.n_allies = positive(v)?,
        "n_enemies" => e.n_enemies = num(v)?,
        "ally_hp" => e.ally_hp = num(v)?,
        "enemy_hp" => e.enemy_hp = num(v)?,
        "attack_damage" => e.attack_damage = num(v)?,
        "attack_range" => e.attack_range = num(v)?,
        "sight_range" => e.sight_range = num(v)?,
        "max_steps" => e.max_steps = positive(v)?,
        "kill_reward" => e.kill_reward = real(v)?,
        "win_reward" => e.win_reward = real(v)?,
        "damage_reward_scale" => e.damage_reward_scale = real(v)?,
        "lane_length" => e.lane_length = num(v)?,
        "n_hazards" => e.n_hazards = num(v)?,
        "progress_reward" => e.progress_reward = real(v)?,
        "goal_bonus" => e.goal_bonus = real(v)?,
        "seed" => e.seed = num(v)?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> SetResult {
    match key {
        "gamma" => t.gamma = unit(v)?,
        "gamma_b" => t.gamma_b = open_unit(v)?,
        "lambda_b" => t.lambda_b = open_unit(v)?,
        "td_lambda" => t.td_lambda = unit(v)?,
        "learning_rate" => t.learning_rate = positive_real(v)?,
        "batch_size" => t.batch_size = positive(v)?,
        "buffer_size" => t.buffer_size = positive(v)?,
        "epsilon_start" => t.epsilon_start = unit(v)?,
        "epsilon_end" => t.epsilon_end = unit(v)?,
        "epsilon_anneal_steps" => t.epsilon_anneal_steps = num(v)?,
        "target_update_interval" => t.target_update_interval = positive(v)?,
        "omega" => t.omega = auto_or(v, non_negative_real)?,
        "beta_q" => t.beta_q = unit(v)?,
        "beta_b" => t.beta_b = unit(v)?,
        "beta_q_plus" => t.beta_q_plus = unit(v)?,
        "beta_b_plus" => t.beta_b_plus = unit(v)?,
        "epochs" => t.epochs = num(v)?,
        "eval_interval" => t.eval_interval = positive(v)?,
        "eval_episodes" => t.eval_episodes = positive(v)?,
        "checkpoint_every" => t.checkpoint_every = positive(v)?,
        "hidden_dim" => t.hidden_dim = positive(v)?,
        "rnn_hidden_dim" => t.rnn_hidden_dim = positive(v)?,
        "embed_dim" => t.embed_dim = positive(v)?,
        "n_quantiles" => t.n_quantiles = positive(v)?,
        "kappa" => t.kappa = positive_real(v)?,
        "barrier" => t.barrier = flag(v)?,
        "distributional" => t.distributional = flag(v)?,
        "seed" => t.seed = num(v)?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

fn set_certify(c: &mut CertifyConfig, key: &str, v: &str) -> SetResult {
    match key {
        "n_samples" => c.n_samples = positive(v)?,
        "removed" => c.removed = num(v)?,
        "param_count" => {
            c.param_count = if v == "checkpoint" { None } else { Some(positive(v)?) };
        }
        "beta" => {
            let b = real(v)?;
            if !(b > 0.0 && b <= 1.0) {
                return Err(SetError::Invalid(format!("{b} is outside (0, 1]")));
            }
            c.beta = b;
        }
        "omega" => c.omega = auto_or(v, non_negative_real)?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

const SECTIONS: [&str; 3] = ["env", "train", "certify"];

impl RunConfig {
    fn set(&mut self, section: &str, key: &str, value: &str, origin: &Origin) -> Result<(), ConfigError> {
        let result = match section {
            "env" => set_env(&mut self.env, key, value),
            "train" => set_train(&mut self.train, key, value),
            "certify" => set_certify(&mut self.certify, key, value),
            _ => {
                return Err(ConfigError::UnknownSection { origin: origin.clone(), section: section.to_string() })
            }
        };
        result.map_err(|e| match e {
            SetError::Unknown => ConfigError::UnknownKey {
                origin: origin.clone(),
                section: section.to_string(),
                key: key.to_string(),
            },
            SetError::Invalid(message) => ConfigError::Value { origin: origin.clone(), key: key.to_string(), message },
        })
    }

    /// Parses config text, then applies `MB_<SECTION>_<KEY>` overrides from
    /// `vars`. Variables without the prefix are ignored.
    pub fn parse<I, K, V>(text: &str, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut entries: Vec<(String, String, String, Origin)> = Vec::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::Line(i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { origin: origin.clone(), message: "unclosed section".into() })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::UnknownSection { origin, section: name.to_string() });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.clone(),
                message: format!("expected key = value, got `{line}`"),
            })?;
            let sec = section.clone().ok_or_else(|| ConfigError::Syntax {
                origin: origin.clone(),
                message: "key outside of a section".into(),
            })?;
            entries.push((sec, key.trim().to_string(), value.trim().to_string(), origin));
        }
        let mut overrides: Vec<(String, String, String, Origin)> = Vec::new();
        for (name, value) in vars {
            let (name, value) = (name.as_ref(), value.as_ref());
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let origin = Origin::Var(name.to_string());
            let lower = rest.to_ascii_lowercase();
            let (sec, key) = SECTIONS
                .iter()
                .find_map(|s| lower.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (*s, k)))
                .ok_or_else(|| ConfigError::UnknownSection { origin: origin.clone(), section: lower.clone() })?;
            overrides.push((sec.to_string(), key.to_string(), value.trim().to_string(), origin));
        }
        overrides.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));

        let mut config = RunConfig::default();
        let all: Vec<&(String, String, String, Origin)> = entries.iter().chain(overrides.iter()).collect();
        // the scenario picks the preset the other env keys modify
        if let Some((_, _, v, origin)) = all.iter().rev().find(|(s, k, _, _)| s == "env" && k == "scenario") {
            config.set("env", "scenario", v, origin)?;
            config.env = match config.env.scenario {
                Scenario::Battle => EnvConfig::battle_3v3(),
                Scenario::Corridor => EnvConfig::corridor_10(),
            };
        }
        for (sec, key, value, origin) in all {
            config.set(sec, key, value, origin)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] accepts.
    pub fn render(&self) -> String {
        let e = &self.env;
        let t = &self.train;
        let c = &self.certify;
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "[env]");
        let env_pairs: Vec<(&str, String)> = vec![
            ("scenario", e.scenario.as_str().to_string()),
            ("grid_width", e.grid_width.to_string()),
            ("grid_height", e.grid_height.to_string()),
            ("n_allies", e.n_allies.to_string()),
            ("n_enemies", e.n_enemies.to_string()),
            ("ally_hp", e.ally_hp.to_string()),
            ("enemy_hp", e.enemy_hp.to_string()),
            ("attack_damage", e.attack_damage.to_string()),
            ("attack_range", e.attack_range.to_string()),
            ("sight_range", e.sight_range.to_string()),
            ("max_steps", e.max_steps.to_string()),
            ("kill_reward", e.kill_reward.to_string()),
            ("win_reward", e.win_reward.to_string()),
            ("damage_reward_scale", e.damage_reward_scale.to_string()),
            ("lane_length", e.lane_length.to_string()),
            ("n_hazards", e.n_hazards.to_string()),
            ("progress_reward", e.progress_reward.to_string()),
            ("goal_bonus", e.goal_bonus.to_string()),
            ("seed", e.seed.to_string()),
        ];
        for (k, v) in env_pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[train]");
        let train_pairs: Vec<(&str, String)> = vec![
            ("gamma", t.gamma.to_string()),
            ("gamma_b", t.gamma_b.to_string()),
            ("lambda_b", t.lambda_b.to_string()),
            ("td_lambda", t.td_lambda.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("buffer_size", t.buffer_size.to_string()),
            ("epsilon_start", t.epsilon_start.to_string()),
            ("epsilon_end", t.epsilon_end.to_string()),
            ("epsilon_anneal_steps", t.epsilon_anneal_steps.to_string()),
            ("target_update_interval", t.target_update_interval.to_string()),
            ("omega", opt(t.omega)),
            ("beta_q", t.beta_q.to_string()),
            ("beta_b", t.beta_b.to_string()),
            ("beta_q_plus", t.beta_q_plus.to_string()),
            ("beta_b_plus", t.beta_b_plus.to_string()),
            ("epochs", t.epochs.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("eval_episodes", t.eval_episodes.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("hidden_dim", t.hidden_dim.to_string()),
            ("rnn_hidden_dim", t.rnn_hidden_dim.to_string()),
            ("embed_dim", t.embed_dim.to_string()),
            ("n_quantiles", t.n_quantiles.to_string()),
            ("kappa", t.kappa.to_string()),
            ("barrier", t.barrier.to_string()),
            ("distributional", t.distributional.to_string()),
            ("seed", t.seed.to_string()),
        ];
        for (k, v) in train_pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[certify]");
        let _ = writeln!(s, "n_samples = {}", c.n_samples);
        let _ = writeln!(s, "removed = {}", c.removed);
        let _ = writeln!(s, "param_count = {}", c.param_count.map_or("checkpoint".to_string(), |m| m.to_string()));
        let _ = writeln!(s, "beta = {}", c.beta);
        let _ = writeln!(s, "omega = {}", opt(c.omega));
        s
    }

    /// Canonical description of everything that fixes the parameter layout.
    pub fn architecture_key(&self) -> String {
        let e = &self.env;
        let t = &self.train;
        format!(
            "scenario={} obs={} state={} agents={} actions={} hidden={} rnn={} embed={} quantiles={}",
            e.scenario.as_str(),
            e.obs_len(),
            e.state_len(),
            e.n_agents(),
            e.n_actions(),
            t.hidden_dim,
            t.rnn_hidden_dim,
            t.embed_dim,
            t.n_quantiles
        )
    }
}

/// Reads `path` and applies overrides from the process environment.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    RunConfig::parse(&text, std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Vec::<(String, String)>::new())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.gamma_b, 0.5);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.buffer_size, 5000);
        assert_eq!(c.train.hidden_dim, 64);
        assert_eq!(c.train.td_lambda, 0.6);
        assert_eq!((c.train.epsilon_start, c.train.epsilon_end), (1.0, 0.05));
    }

    #[test]
    fn out_of_range_value_names_key_and_line() {
        let err = parse("[train]\n\ngamma_b = 1.5\n").unwrap_err();
        match &err {
            ConfigError::Value { origin, key, .. } => {
                assert_eq!(origin, &Origin::Line(3));
                assert_eq!(key, "gamma_b");
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn unknown_key_and_section_are_rejected() {
        assert!(matches!(parse("[train]\nlearnin_rate = 0.1"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(parse("[model]\n"), Err(ConfigError::UnknownSection { .. })));
        assert!(matches!(parse("gamma = 0.9"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn render_round_trips() {
        let mut c = parse("[env]\nscenario = corridor\n[train]\nlearning_rate = 0.001\nomega = 3\n").unwrap();
        assert_eq!(c.env.n_allies, 10);
        assert_eq!(c.train.learning_rate, 0.001);
        c.certify.param_count = None;
        let again = parse(&c.render()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.render(), c.render());
    }

    #[test]
    fn variables_override_file() {
        let vars = vec![("MB_TRAIN_LEARNING_RATE", "0.01"), ("MB_ENV_N_ALLIES", "2"), ("PATH", "/bin")];
        let c = RunConfig::parse("[train]\nlearning_rate = 0.5\n", vars).unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.env.n_allies, 2);
        let bad = RunConfig::parse("", vec![("MB_TRAIN_NOPE", "1")]).unwrap_err();
        assert!(bad.to_string().contains("MB_TRAIN_NOPE"));
    }
}
