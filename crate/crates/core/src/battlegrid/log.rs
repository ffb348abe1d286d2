//! Plain-text trajectory log.
//!
//! ```text
//! # marlbar trajectory log v1
//! # seed=7
//! episode	step	actions	reward	deaths	done	win
//! 0	0	1,0,5	0.5	0	0	0
//! ```
//!
//! Lines starting with `#` are comments. After the column header, each line is
//! one tab-separated step record; `actions` is the comma-separated joint
//! action, `done` and `win` are `0`/`1`. Records of an episode are contiguous
//! with increasing `step`, and the last one has `done=1`.

use std::fmt::Write as _;
use std::io::{self, Write};

use thiserror::Error;

pub const LOG_MAGIC: &str = "# marlbar trajectory log v1";
pub const LOG_HEADER: &str = "episode\tstep\tactions\treward\tdeaths\tdone\twin";

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub episode: u64,
    pub step: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub deaths: usize,
    pub done: bool,
    pub win: bool,
}

impl TrajectoryRecord {
    pub fn to_line(&self) -> String {
        let mut actions = String::new();
        for (i, a) in self.actions.iter().enumerate() {
            if i > 0 {
                actions.push(',');
            }
            let _ = write!(actions, "{a}");
        }
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.episode, self.step, actions, self.reward, self.deaths, self.done as u8, self.win as u8
        )
    }
}

/// All records of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: u64,
    pub records: Vec<TrajectoryRecord>,
}

impl EpisodeLog {
    /// Sum of ally deaths over the episode.
    pub fn total_deaths(&self) -> usize {
        self.records.iter().map(|r| r.deaths).sum()
    }

    pub fn deaths(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.deaths).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    pub fn won(&self) -> bool {
        self.records.last().is_some_and(|r| r.win)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("episode {episode} ends without a done record")]
    Incomplete { episode: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_log<W: Write>(mut out: W, seed: Option<u64>, records: &[TrajectoryRecord]) -> io::Result<()> {
    writeln!(out, "{LOG_MAGIC}")?;
    if let Some(seed) = seed {
        writeln!(out, "# seed={seed}")?;
    }
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    out.flush()
}

fn parse_line(line: &str, lineno: usize) -> Result<TrajectoryRecord, LogError> {
    let bad = |message: String| LogError::Malformed { line: lineno, message };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(bad(format!("expected 7 tab-separated fields, found {}", fields.len())));
    }
    let num = |i: usize, name: &str| -> Result<u64, LogError> {
        fields[i].trim().parse::<u64>().map_err(|_| bad(format!("bad {name} `{}`", fields[i])))
    };
    let flag = |i: usize, name: &str| -> Result<bool, LogError> {
        match fields[i].trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(bad(format!("bad {name} `{other}`, expected 0 or 1"))),
        }
    };
    let actions = if fields[2].trim().is_empty() {
        Vec::new()
    } else {
        fields[2]
            .split(',')
            .map(|a| a.trim().parse::<usize>().map_err(|_| bad(format!("bad action `{a}`"))))
            .collect::<Result<Vec<_>, _>>()?
    };
    let reward: f64 = fields[3].trim().parse().map_err(|_| bad(format!("bad reward `{}`", fields[3])))?;
    if !reward.is_finite() {
        return Err(bad("reward is not finite".into()));
    }
    Ok(TrajectoryRecord {
        episode: num(0, "episode")?,
        step: num(1, "step")? as usize,
        actions,
        reward,
        deaths: num(4, "deaths")? as usize,
        done: flag(5, "done")?,
        win: flag(6, "win")?,
    })
}

/// Parses a log and groups it into complete episodes.
pub fn parse_log(text: &str) -> Result<Vec<EpisodeLog>, LogError> {
    let mut episodes: Vec<EpisodeLog> = Vec::new();
    let mut header_seen = false;
    let mut open = false;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != LOG_HEADER {
                return Err(LogError::Malformed { line: lineno, message: "missing column header".into() });
            }
            header_seen = true;
            continue;
        }
        let rec = parse_line(line, lineno)?;
        match episodes.last_mut() {
            Some(ep) if open && ep.episode == rec.episode => {
                let prev = ep.records.last().map(|r| r.step).unwrap_or(0);
                if rec.step != prev + 1 {
                    return Err(LogError::Malformed {
                        line: lineno,
                        message: format!("step {} follows step {prev}", rec.step),
                    });
                }
                open = !rec.done;
                ep.records.push(rec);
            }
            Some(ep) if open => return Err(LogError::Incomplete { episode: ep.episode }),
            _ => {
                if rec.step != 0 {
                    return Err(LogError::Malformed {
                        line: lineno,
                        message: format!("episode {} starts at step {}", rec.episode, rec.step),
                    });
                }
                open = !rec.done;
                episodes.push(EpisodeLog { episode: rec.episode, records: vec![rec] });
            }
        }
    }
    if open {
        if let Some(ep) = episodes.last() {
            return Err(LogError::Incomplete { episode: ep.episode });
        }
    }
    Ok(episodes)
}
