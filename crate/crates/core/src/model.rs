//! Thinning-dependence risk model.
//!
//! Events arrive from `m` independent Poisson classes. An event of class `i`
//! produces a claim in line `z` with probability `p[i][z]`, independently
//! across lines; the claim size in line `z` is drawn from that line's severity
//! law. Superposing the classes gives a single compound Poisson stream with
//! intensity `beta = sum(beta_i)` whose jump is the sum of the claims of the
//! lines hit by the event.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest line count for which all `2^n` hit patterns are enumerated.
pub const MAX_LINES: usize = 20;

const MASS_TOL: f64 = 1e-12;

/// Claim-size law of a single line of business.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeverityLaw {
    /// `F(x) = 1 - exp(-rate x)`.
    Exponential { rate: f64 },
    /// Probability masses at the points `k * step`, `k = 0, 1, ...`.
    EmpiricalLattice { step: f64, masses: Vec<f64> },
}

impl SeverityLaw {
    pub fn exponential(rate: f64) -> Self {
        SeverityLaw::Exponential { rate }
    }

    pub fn lattice(step: f64, masses: Vec<f64>) -> Self {
        SeverityLaw::EmpiricalLattice { step, masses }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            SeverityLaw::Exponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(format!("exponential rate must be positive, got {rate}"));
                }
            }
            SeverityLaw::EmpiricalLattice { step, masses } => {
                if !(step.is_finite() && *step > 0.0) {
                    return Err(format!("lattice step must be positive, got {step}"));
                }
                if masses.is_empty() {
                    return Err("lattice masses must not be empty".into());
                }
                if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
                    return Err("lattice masses must be nonnegative".into());
                }
                let total: f64 = masses.iter().sum();
                if (total - 1.0).abs() > MASS_TOL {
                    return Err(format!("lattice masses must sum to 1, got {total}"));
                }
            }
        }
        Ok(())
    }

    /// Right-continuous distribution function.
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            SeverityLaw::Exponential { rate } => -(-rate * x).exp_m1(),
            SeverityLaw::EmpiricalLattice { step, masses } => {
                if x.is_infinite() {
                    return 1.0;
                }
                let top = lattice_floor(x, *step);
                let upto = (top + 1).min(masses.len());
                masses[..upto].iter().sum::<f64>().min(1.0)
            }
        }
    }

    /// `P(U > x)`, computed without cancellation for the exponential case.
    pub fn survival(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 1.0;
        }
        match self {
            SeverityLaw::Exponential { rate } => (-rate * x).exp(),
            SeverityLaw::EmpiricalLattice { step, masses } => {
                if x.is_infinite() {
                    return 0.0;
                }
                let top = lattice_floor(x, *step);
                if top + 1 >= masses.len() {
                    0.0
                } else {
                    masses[top + 1..].iter().sum()
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.stop_loss(0.0)
    }

    /// Stop-loss transform `E[(U - t)^+]`.
    pub fn stop_loss(&self, t: f64) -> f64 {
        if t.is_infinite() {
            return 0.0;
        }
        match self {
            SeverityLaw::Exponential { rate } => {
                if t <= 0.0 {
                    1.0 / rate - t
                } else {
                    (-rate * t).exp() / rate
                }
            }
            SeverityLaw::EmpiricalLattice { step, masses } => masses
                .iter()
                .enumerate()
                .map(|(k, m)| m * (k as f64 * step - t).max(0.0))
                .sum(),
        }
    }

    /// Largest point of the support, `inf` when unbounded.
    pub fn support_max(&self) -> f64 {
        match self {
            SeverityLaw::Exponential { .. } => f64::INFINITY,
            SeverityLaw::EmpiricalLattice { step, masses } => {
                let last = masses.iter().rposition(|m| *m > 0.0).unwrap_or(0);
                last as f64 * step
            }
        }
    }
}

/// Index of the largest lattice point `k * step <= x`, tolerant to the
/// rounding of `x` when it was itself produced as a multiple of a step.
pub(crate) fn lattice_floor(x: f64, step: f64) -> usize {
    let r = x / step;
    let k = (r + 1e-9 * r.abs().max(1.0)).floor();
    if k < 0.0 {
        0
    } else {
        k as usize
    }
}

/// Declarative description of the portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ModelSpec", into = "ModelSpec")]
pub struct ThinningModel {
    pub beta: Vec<f64>,
    /// `thinning[i][z]`: probability that a class-`i` event hits line `z`.
    pub thinning: Vec<Vec<f64>>,
    pub severities: Vec<SeverityLaw>,
    /// Insurer safety loading.
    pub eta: f64,
    /// Reinsurer safety loading.
    pub eta1: f64,
    /// Discount rate.
    pub delta: f64,
    total_intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    beta: Vec<f64>,
    thinning: Vec<Vec<f64>>,
    severities: Vec<SeverityLaw>,
    eta: f64,
    eta1: f64,
    delta: f64,
}

impl From<ModelSpec> for ThinningModel {
    fn from(s: ModelSpec) -> Self {
        ThinningModel::new(s.beta, s.thinning, s.severities, s.eta, s.eta1, s.delta)
    }
}

impl From<ThinningModel> for ModelSpec {
    fn from(m: ThinningModel) -> Self {
        ModelSpec {
            beta: m.beta,
            thinning: m.thinning,
            severities: m.severities,
            eta: m.eta,
            eta1: m.eta1,
            delta: m.delta,
        }
    }
}

/// One violated assumption.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidModel(msg))
    }
}

impl ThinningModel {
    pub fn new(
        beta: Vec<f64>,
        thinning: Vec<Vec<f64>>,
        severities: Vec<SeverityLaw>,
        eta: f64,
        eta1: f64,
        delta: f64,
    ) -> Self {
        let total_intensity = beta.iter().sum();
        ThinningModel {
            beta,
            thinning,
            severities,
            eta,
            eta1,
            delta,
            total_intensity,
        }
    }

    /// Classical single-class, single-line compound Poisson model.
    pub fn single_line(beta: f64, severity: SeverityLaw, eta: f64, eta1: f64, delta: f64) -> Self {
        ThinningModel::new(vec![beta], vec![vec![1.0]], vec![severity], eta, eta1, delta)
    }

    pub fn classes(&self) -> usize {
        self.beta.len()
    }

    pub fn lines(&self) -> usize {
        self.severities.len()
    }

    /// `beta = sum over classes of beta_i`.
    pub fn total_intensity(&self) -> f64 {
        self.total_intensity
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let m = self.classes();
        let n = self.lines();
        if m == 0 {
            report.push("beta", "at least one event class is required");
        }
        if n == 0 {
            report.push("severities", "at least one line is required");
        }
        if n > MAX_LINES {
            report.push("severities", format!("at most {MAX_LINES} lines are supported"));
        }
        for (i, b) in self.beta.iter().enumerate() {
            if !(b.is_finite() && *b > 0.0) {
                report.push(format!("beta[{i}]"), "intensity must be positive");
            }
        }
        if self.thinning.len() != m {
            report.push(
                "thinning",
                format!("expected {m} rows, found {}", self.thinning.len()),
            );
        }
        for (i, row) in self.thinning.iter().enumerate() {
            if row.len() != n {
                report.push(
                    format!("thinning[{i}]"),
                    format!("expected {n} entries, found {}", row.len()),
                );
            }
            for (z, p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(p) {
                    report.push(
                        format!("thinning[{i}][{z}]"),
                        "thinning probability must lie in [0, 1]",
                    );
                }
            }
        }
        for (z, law) in self.severities.iter().enumerate() {
            if let Err(e) = law.validate() {
                report.push(format!("severities[{z}]"), e);
            }
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            report.push("eta", "safety loading must be positive");
        }
        if !(self.eta1 >= self.eta) {
            report.push("eta1", "η₁ ≥ η required");
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            report.push("delta", "discount rate must be positive");
        }
        if report.is_valid() && !(self.gross_premium() > 0.0) {
            report.push(
                "thinning",
                "net profit condition fails without reinsurance (no expected claims)",
            );
        }
        report
    }

    /// Probability that an event (of a uniformly superposed class) hits line `z`.
    pub fn line_hit_probability(&self, z: usize) -> f64 {
        let beta = self.total_intensity();
        self.beta
            .iter()
            .zip(&self.thinning)
            .map(|(b, row)| b / beta * row[z])
            .sum()
    }

    /// `E(Y)`: mean claim per event, without reinsurance.
    pub fn gross_mean(&self) -> f64 {
        (0..self.lines())
            .map(|z| self.line_hit_probability(z) * self.severities[z].mean())
            .sum()
    }

    /// `p = (1 + eta) beta E(Y)`.
    pub fn gross_premium(&self) -> f64 {
        (1.0 + self.eta) * self.total_intensity() * self.gross_mean()
    }

    /// Upper envelope constant of the value function, `(1+eta) E(Y) beta / delta`.
    pub fn value_upper_intercept(&self) -> f64 {
        self.gross_premium() / self.delta
    }

    /// Lower envelope constant, `(1+eta) E(Y) beta / (beta + delta)`.
    pub fn value_lower_intercept(&self) -> f64 {
        self.gross_premium() / (self.total_intensity() + self.delta)
    }
}

/// Probability of each hit pattern of an event, indexed by line bitmask
/// (bit `z` set when line `z` is hit). Index 0 is the empty pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetWeights {
    lines: usize,
    weights: Vec<f64>,
}

impl SubsetWeights {
    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn get(&self, mask: usize) -> f64 {
        self.weights[mask]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Patterns with positive weight, empty pattern included.
    pub fn iter_nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, w)| *w > 0.0)
    }
}

/// `w_S = sum_i (beta_i / beta) prod_{z in S} p_iz prod_{z not in S} (1 - p_iz)`.
pub fn line_claim_weights(model: &ThinningModel) -> Result<SubsetWeights> {
    let n = model.lines();
    if n > MAX_LINES {
        return Err(Error::TooManyLines {
            lines: n,
            limit: MAX_LINES,
        });
    }
    let beta = model.total_intensity();
    let mut weights = vec![0.0; 1 << n];
    for (b, row) in model.beta.iter().zip(&model.thinning) {
        // Build the pattern distribution of one class line by line.
        let mut dist = vec![0.0; 1 << n];
        dist[0] = b / beta;
        for (z, p) in row.iter().enumerate() {
            let bit = 1 << z;
            for mask in (0..bit).rev() {
                let w = dist[mask];
                dist[mask | bit] = w * p;
                dist[mask] = w * (1.0 - p);
            }
        }
        for (acc, w) in weights.iter_mut().zip(dist) {
            *acc += w;
        }
    }
    Ok(SubsetWeights { lines: n, weights })
}
