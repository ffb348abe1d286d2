//! Parameter checkpoints.
//!
//! Text format, one item per line:
//!
//! ```text
//! marlbar-checkpoint v1
//! config_hash=<64 hex digits>
//! params=<count>
//! <value 0>
//! <value 1>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a save/load cycle is
//! bit-exact. The hash identifies the configuration the parameters belong to.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::ParamStore;

pub const CHECKPOINT_MAGIC: &str = "marlbar-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("checkpoint holds {got} parameters, network has {expected}")]
    Count { expected: usize, got: usize },
    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    Hash { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: Vec<f64>,
}

/// Hex SHA-256 of a canonical config rendering.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_hash: String) -> Self {
        Self { config_hash, params: store.flatten() }
    }

    pub fn render(&self) -> String {
        let mut s = format!("{CHECKPOINT_MAGIC}\nconfig_hash={}\nparams={}\n", self.config_hash, self.params.len());
        for v in &self.params {
            s.push_str(&format!("{v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let fmt = |line: usize, message: &str| CheckpointError::Format { line, message: message.to_string() };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(fmt(1, "missing checkpoint header")),
        }
        let config_hash = match lines.next() {
            Some((_, l)) => l.trim().strip_prefix("config_hash=").ok_or_else(|| fmt(2, "expected config_hash="))?,
            None => return Err(fmt(2, "truncated")),
        }
        .to_string();
        let count: usize = match lines.next() {
            Some((_, l)) => l
                .trim()
                .strip_prefix("params=")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| fmt(3, "expected params=<count>"))?,
            None => return Err(fmt(3, "truncated")),
        };
        let mut params = Vec::with_capacity(count);
        for (i, l) in lines {
            let l = l.trim();
            if l.is_empty() {
                continue;
            }
            let v: f64 = l.parse().map_err(|_| fmt(i + 1, "bad parameter value"))?;
            params.push(v);
        }
        if params.len() != count {
            return Err(CheckpointError::Count { expected: count, got: params.len() });
        }
        Ok(Self { config_hash, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(self.render().as_bytes()).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Copies the parameters into `store`, checking count and, when given,
    /// the expected config hash.
    pub fn restore(&self, store: &mut ParamStore, expected_hash: Option<&str>) -> Result<(), CheckpointError> {
        if let Some(h) = expected_hash {
            if h != self.config_hash {
                return Err(CheckpointError::Hash { expected: h.to_string(), found: self.config_hash.clone() });
            }
        }
        if self.params.len() != store.numel() {
            return Err(CheckpointError::Count { expected: store.numel(), got: self.params.len() });
        }
        store.assign_flat(&self.params).expect("length checked");
        Ok(())
    }
}
