//! Scenario-based safety certification.
//!
//! `N` evaluation trajectories are checked against the threshold `ω` on total
//! ally deaths. After discarding the `k` worst trajectories, the violation
//! probability is bounded by the smallest `ε` with
//!
//! ```text
//! C(k+m−1, k) · Σ_{i=0}^{k+m−1} C(N, i) εⁱ (1−ε)^{N−i} ≤ β
//! ```
//!
//! which holds with confidence `1 − β`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::battlegrid::log::{parse_log, EpisodeLog, LogError};

/// Bisection stops once the bracket is narrower than this.
pub const EPSILON_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("invalid safety query: {0}")]
    Query(String),
    #[error("bound cannot be met for any epsilon below 1 (N={n}, k={k}, m={m}, beta={beta})")]
    Unsatisfiable { n: usize, k: usize, m: usize, beta: f64 },
    #[error("log holds {got} episodes, query expects {expected}")]
    EpisodeCount { expected: usize, got: usize },
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyQuery {
    /// Number of sampled trajectories `N`.
    pub n_samples: usize,
    /// Discarded trajectories `k`.
    pub removed: usize,
    /// Decision-variable count `m`.
    pub param_count: usize,
    /// Confidence parameter `β`.
    pub beta: f64,
    /// Threshold on total trajectory deaths.
    pub omega: f64,
}

impl SafetyQuery {
    pub fn validate(&self) -> Result<(), CertifyError> {
        let bad = |m: String| Err(CertifyError::Query(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.param_count == 0 {
            return bad("param_count must be positive".into());
        }
        if self.removed + self.param_count - 1 >= self.n_samples {
            return bad(format!(
                "removed + param_count - 1 = {} must be below n_samples = {}",
                self.removed + self.param_count - 1,
                self.n_samples
            ));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta = {} must lie in (0, 1]", self.beta));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad(format!("omega = {} must be non-negative", self.omega));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafetyCertificate {
    pub query: SafetyQuery,
    pub epsilon: f64,
    /// Trajectories whose total deaths exceed `ω`.
    pub violations: usize,
    /// `violations ≤ k`.
    pub satisfied: bool,
    /// Episode ids discarded by the selection rule, worst first.
    pub removed_episodes: Vec<u64>,
    /// Total deaths per trajectory, in log order.
    pub barrier_values: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln C(n, k)` by a running product.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (1..=k).map(|j| ((n - k + j) as f64).ln() - (j as f64).ln()).sum()
}

/// Natural log of the left-hand side of the bound at `eps`.
pub fn ln_bound_lhs(n: usize, k: usize, m: usize, eps: f64) -> f64 {
    let top = k + m - 1;
    let le = eps.ln();
    let l1e = (-eps).ln_1p();
    let mut ln_c = 0.0;
    let mut terms = Vec::with_capacity(top + 1);
    for i in 0..=top.min(n) {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        let a = if i == 0 { 0.0 } else { i as f64 * le };
        let b = if n == i { 0.0 } else { (n - i) as f64 * l1e };
        terms.push(ln_c + a + b);
    }
    ln_binomial(top, k) + log_sum_exp(&terms)
}

/// Smallest `ε` in `[0, 1)` meeting the bound, by bisection in log space.
pub fn epsilon_bound(query: &SafetyQuery) -> Result<f64, CertifyError> {
    query.validate()?;
    let (n, k, m) = (query.n_samples, query.removed, query.param_count);
    let ln_beta = query.beta.ln();
    let holds = |eps: f64| ln_bound_lhs(n, k, m, eps) <= ln_beta;
    if holds(0.0) {
        return Ok(0.0);
    }
    let mut hi = 1.0 - 1e-15;
    if !holds(hi) {
        return Err(CertifyError::Unsatisfiable { n, k, m, beta: query.beta });
    }
    let mut lo = 0.0;
    while hi - lo > EPSILON_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Checks `episodes` against the query and computes the risk bound.
///
/// The selection rule discards the `k` episodes with the most deaths (ties
/// broken by log order).
pub fn certify_policy(episodes: &[EpisodeLog], query: &SafetyQuery) -> Result<SafetyCertificate, CertifyError> {
    query.validate()?;
    if episodes.len() != query.n_samples {
        return Err(CertifyError::EpisodeCount { expected: query.n_samples, got: episodes.len() });
    }
    let barrier_values: Vec<f64> = episodes.iter().map(|e| e.total_deaths() as f64).collect();
    let violations = barrier_values.iter().filter(|&&v| v > query.omega).count();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_by(|&a, &b| barrier_values[b].total_cmp(&barrier_values[a]).then(a.cmp(&b)));
    let removed_episodes = order.iter().take(query.removed).map(|&i| episodes[i].episode).collect();
    Ok(SafetyCertificate {
        query: *query,
        epsilon: epsilon_bound(query)?,
        violations,
        satisfied: violations <= query.removed,
        removed_episodes,
        barrier_values,
    })
}

/// Parses a trajectory log and certifies it.
pub fn certify_log(text: &str, query: &SafetyQuery) -> Result<SafetyCertificate, CertifyError> {
    let episodes = parse_log(text)?;
    certify_policy(&episodes, query)
}

impl SafetyCertificate {
    /// Human-readable summary followed by a `key=value` block.
    pub fn render(&self) -> String {
        let q = &self.query;
        let mut out = String::new();
        let _ = writeln!(out, "safety certificate");
        let _ = writeln!(
            out,
            "  {} trajectories checked against omega = {}: {} violation(s), {} removed",
            q.n_samples, q.omega, self.violations, q.removed
        );
        let verdict = if self.satisfied { "satisfied" } else { "NOT satisfied" };
        let _ = writeln!(out, "  constraint {verdict}");
        let _ = writeln!(
            out,
            "  with confidence {:.6}, P(deaths > omega) <= {:.9} (m = {})",
            1.0 - q.beta,
            self.epsilon,
            q.param_count
        );
        if !self.removed_episodes.is_empty() {
            let ids: Vec<String> = self.removed_episodes.iter().map(|e| e.to_string()).collect();
            let _ = writeln!(out, "  removed episodes: {}", ids.join(","));
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "[certificate]");
        let _ = writeln!(out, "n_samples={}", q.n_samples);
        let _ = writeln!(out, "removed={}", q.removed);
        let _ = writeln!(out, "param_count={}", q.param_count);
        let _ = writeln!(out, "beta={}", q.beta);
        let _ = writeln!(out, "epsilon={}", self.epsilon);
        let _ = writeln!(out, "omega={}", q.omega);
        let _ = writeln!(out, "violations={}", self.violations);
        let _ = writeln!(out, "satisfied={}", self.satisfied);
        out
    }
}
