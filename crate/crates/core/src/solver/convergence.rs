//! Grid-refinement study.

use serde::Serialize;

use super::{solve, SolverConfig};
use crate::error::Result;
use crate::search::CandidateSpace;

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub a1: f64,
    pub v0: f64,
    pub max_residual: f64,
    pub verified: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// `|a1(h_k) - a1(h_{k+1})|` for consecutive rows.
    pub a1_diffs: Vec<f64>,
    pub v0_diffs: Vec<f64>,
    /// Both difference sequences are non-increasing.
    pub monotone: bool,
}

fn non_increasing(d: &[f64]) -> bool {
    // Differences at the lattice resolution count as ties.
    d.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-12)
}

/// Solve at every step in `steps` (coarse to fine) with the candidate space
/// produced by `build`.
pub fn refine_study(
    build: impl Fn(f64) -> Result<CandidateSpace>,
    steps: &[f64],
    config: &SolverConfig,
) -> Result<ConvergenceTable> {
    let mut rows = Vec::with_capacity(steps.len());
    for &h in steps {
        let space = build(h)?;
        let sol = solve(&space, config)?;
        let max_residual = sol.residual_report.as_ref().map_or(f64::NAN, |r| r.max_abs);
        rows.push(ConvergenceRow {
            h,
            a1: sol.a1(),
            v0: sol.v0(),
            max_residual,
            verified: sol.verified,
        });
    }
    let diffs = |f: fn(&ConvergenceRow) -> f64| -> Vec<f64> {
        rows.windows(2).map(|w| (f(&w[0]) - f(&w[1])).abs()).collect()
    };
    let a1_diffs = diffs(|r| r.a1);
    let v0_diffs = diffs(|r| r.v0);
    let monotone = non_increasing(&a1_diffs) && non_increasing(&v0_diffs);
    Ok(ConvergenceTable {
        rows,
        a1_diffs,
        v0_diffs,
        monotone,
    })
}
