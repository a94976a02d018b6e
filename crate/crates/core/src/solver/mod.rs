//! Finite-difference construction of the value function.
//!
//! With `f(0) = 1` the scheme marches
//!
//! ```text
//! f'(0) = inf_R [(delta + beta) - beta P(Z_R = 0)] / p_R
//! f'(i) = inf_R [(delta + beta) f(i-1) - beta G_R(i)] / p_R
//! G_R(i) = sum_{j=1}^{i} g_R[j] f(i-j) + g_R[0] f(i-1)
//! f(i)  = f(i-1) + h f'(i)
//! ```
//!
//! The first barrier is the smallest grid argmin `a` of `f'`; the value
//! function is `f / f'(a)` below it and grows with slope one above it.

mod bands;
mod convergence;
mod partition;
mod policy;

pub use bands::extend_bands;
pub use convergence::{refine_study, ConvergenceRow, ConvergenceTable};
pub use partition::{extract_partition, BandPolicy, LumpBand, Region};
pub use policy::policy_value;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{
    operator_profile, residual_from_profile, residual_tolerance, Discretization, GridFunction,
    OperatorProfile, ResidualReport,
};
use crate::reinsurance::ReinsuranceVector;
use crate::search::{CandidateSpace, Choice, SearchEngine};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Right end of the grid. `None` marches until the barrier is well
    /// inside the grid (see [`SolverConfig::adaptive_end`]).
    pub x_max: Option<f64>,
    /// Largest number of barriers.
    pub band_cap: usize,
    /// Residual tolerance relative to `(delta + beta) max V`.
    pub residual_tol: f64,
    /// Tolerance of the scheme-consistent barrier check, same scaling.
    pub scheme_tol: f64,
    /// Classification tolerance for partition extraction, same scaling.
    pub partition_tol: f64,
    /// Allowance for `sup L(V)` above a re-marched barrier, same scaling
    /// per unit of grid step. The grid start of a band pins the tangency
    /// of the re-marched slope only to `O(h)`.
    pub grid_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            x_max: None,
            band_cap: 8,
            residual_tol: 5e-3,
            scheme_tol: 1e-6,
            partition_tol: 1e-9,
            grid_tol: 5e-3,
        }
    }
}

impl SolverConfig {
    /// Adaptive stopping rule: the march ends once `x >= 2 a + 10 E(Y)`
    /// for the running argmin `a`.
    pub fn adaptive_end(a: f64, mean_claim: f64) -> f64 {
        2.0 * a + 10.0 * mean_claim
    }
}

/// Complete output of a solve.
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub h: f64,
    pub f: GridFunction,
    pub fprime: GridFunction,
    pub v: GridFunction,
    /// Minimizing candidate of the march at every point.
    pub argmin_candidate: Vec<ReinsuranceVector>,
    /// Net premium of that candidate.
    pub p_net: Vec<f64>,
    /// Barrier indices, ascending.
    pub barriers: Vec<usize>,
    /// Interior lump bands `(a, b]` as index pairs.
    pub lump_bands: Vec<(usize, usize)>,
    pub bands: Option<BandPolicy>,
    pub residual_report: Option<ResidualReport>,
    /// Scheme-consistent operator profile of `V`.
    pub scheme_profile: Option<OperatorProfile>,
    pub verified: bool,
    pub notes: Vec<String>,
}

impl GridSolution {
    pub fn a1(&self) -> f64 {
        self.barriers[0] as f64 * self.h
    }

    pub fn last_barrier(&self) -> usize {
        *self.barriers.last().unwrap()
    }

    pub fn v0(&self) -> f64 {
        self.v.values[0]
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

fn objective(space: &CandidateSpace, cur: f64) -> impl Fn(f64, f64) -> f64 {
    let beta = space.model().total_intensity();
    let lead = space.model().delta + beta;
    move |p, c| (lead * cur - beta * c) / p
}

/// One step of the scheme at index `engine.len()`. `prev` is `f(i-1)`, or
/// `f(0)` itself when `i = 0`.
pub fn derivative_step(engine: &mut SearchEngine<'_>, space: &CandidateSpace, prev: f64) -> Result<Choice> {
    let obj = objective(space, prev);
    engine.search(prev, &obj)
}

pub(crate) struct March {
    pub f: Vec<f64>,
    pub fp: Vec<f64>,
    pub choices: Vec<ReinsuranceVector>,
    pub p_net: Vec<f64>,
}

/// March from `f(0) = 1`. With `end = None` the adaptive rule decides.
pub(crate) fn march_first(space: &CandidateSpace, end: Option<usize>) -> Result<(March, usize)> {
    let h = space.h();
    let cap = end.unwrap_or(space.k()).min(space.k());
    let mean_claim = space.model().gross_mean();
    let mut engine = space.engine()?;
    let mut m = March {
        f: Vec::new(),
        fp: Vec::new(),
        choices: Vec::new(),
        p_net: Vec::new(),
    };
    let mut argmin = 0usize;
    let mut i = 0usize;
    loop {
        let prev = if i == 0 { 1.0 } else { m.f[i - 1] };
        let c = derivative_step(&mut engine, space, prev)?;
        let fp = c.score;
        let fi = if i == 0 { 1.0 } else { prev + h * fp };
        // Ties up to rounding go to the smaller index.
        let best = m.fp.get(argmin).copied().unwrap_or(f64::INFINITY);
        if fp < best - 1e-12 * best.abs() {
            argmin = i;
        }
        m.f.push(fi);
        m.fp.push(fp);
        m.choices.push(c.vector);
        m.p_net.push(c.p_net);
        engine.commit(fi, prev)?;
        if i >= cap {
            break;
        }
        if end.is_none() && i as f64 * h >= SolverConfig::adaptive_end(argmin as f64 * h, mean_claim) {
            break;
        }
        i += 1;
    }
    Ok((m, argmin))
}

/// First barrier and the corresponding value function.
pub fn solve_first_band(space: &CandidateSpace, config: &SolverConfig) -> Result<GridSolution> {
    let h = space.h();
    let end = match config.x_max {
        Some(x) => {
            if !(x > 0.0) {
                return Err(Error::InvalidArgument(format!("x_max must be positive, got {x}")));
            }
            let n = (x / h).round() as usize;
            if n > space.k() {
                return Err(Error::InvalidArgument(format!(
                    "x_max = {x} exceeds the candidate lattice ({} points)",
                    space.k()
                )));
            }
            Some(n)
        }
        None => None,
    };
    let (m, a) = march_first(space, end)?;
    let last = m.f.len() - 1;
    if a == last {
        return Err(Error::BoundaryArgmin { x_max: last as f64 * h });
    }
    let scale = m.fp[a];
    let mut v = Vec::with_capacity(m.f.len());
    let mut dv = Vec::with_capacity(m.f.len());
    for i in 0..m.f.len() {
        if i <= a {
            v.push(m.f[i] / scale);
            dv.push(m.fp[i] / scale);
        } else {
            v.push((i - a) as f64 * h + m.f[a] / scale);
            dv.push(1.0);
        }
    }
    Ok(GridSolution {
        h,
        f: GridFunction::new(h, m.f),
        fprime: GridFunction::new(h, m.fp),
        v: GridFunction::with_derivative(h, v, dv),
        argmin_candidate: m.choices,
        p_net: m.p_net,
        barriers: vec![a],
        lump_bands: Vec::new(),
        bands: None,
        residual_report: None,
        scheme_profile: None,
        verified: false,
        notes: Vec::new(),
    })
}

/// Index of the first point above the last barrier with `sup L(V) > tol`.
pub(crate) fn first_violation(sol: &GridSolution, profile: &OperatorProfile, tol: f64) -> Option<usize> {
    let start = sol.last_barrier() + 1;
    (start..sol.len()).find(|i| profile.sup_l[*i] > tol)
}

/// `(delta + beta) max V`, the scale of all operator tolerances.
pub(crate) fn scheme_scale(sol: &GridSolution, space: &CandidateSpace) -> f64 {
    (space.model().delta + space.model().total_intensity()) * sol.v.max_value().abs()
}

/// Largest `sup L(V)` accepted above the last barrier.
pub(crate) fn lump_allowance(sol: &GridSolution, space: &CandidateSpace, config: &SolverConfig) -> f64 {
    scheme_scale(sol, space) * config.scheme_tol.max(config.grid_tol * sol.h)
}

pub(crate) fn exact_report(sol: &GridSolution, space: &CandidateSpace, config: &SolverConfig) -> Result<ResidualReport> {
    let exact = operator_profile(&sol.v, space, Discretization::Exact)?;
    let tol = config.residual_tol / 5e-3 * residual_tolerance(&sol.v, space.model());
    Ok(residual_from_profile(&sol.v, exact, tol))
}

/// Scheme-consistent check of `sup Lam(V) = 0` at every barrier. The first
/// barrier is exact; later ones sit where the re-marched slope crosses one
/// between grid points, which leaves `p_R |V'(a) - 1|` of slack.
pub fn barrier_check(sol: &GridSolution, profile: &OperatorProfile, tol: f64) -> Vec<(usize, f64, f64)> {
    sol.barriers
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            let slack = if j == 0 { tol } else { tol + sol.p_net[a] * (sol.v.slope(a) - 1.0).abs() };
            (a, profile.sup_lambda[a], slack)
        })
        .collect()
}

/// Full pipeline: first band, extra bands when needed, partition and
/// residual report.
pub fn solve(space: &CandidateSpace, config: &SolverConfig) -> Result<GridSolution> {
    let partial = solve_first_band(space, config)?;
    let mut sol = extend_bands(partial, space, config)?;
    let scale = scheme_scale(&sol, space);
    sol.residual_report = Some(exact_report(&sol, space, config)?);
    let structure_ok = match extract_partition(&sol, space, config) {
        Ok(policy) => {
            sol.bands = Some(policy);
            true
        }
        Err(e) => {
            sol.notes.push(format!("partition: {e}"));
            false
        }
    };
    let barriers_ok = barrier_check(&sol, sol.scheme_profile.as_ref().unwrap(), config.scheme_tol * scale)
        .iter()
        .all(|(_, lam, slack)| lam.abs() <= *slack);
    if !barriers_ok {
        sol.notes.push("sup Lam(V) does not vanish at a barrier".into());
    }
    let report = sol.residual_report.as_ref().expect("set above");
    if !report.passes() {
        sol.notes.push(format!(
            "HJB residual {:.3e} exceeds tolerance {:.3e} at x = {}",
            report.max_abs,
            report.tolerance,
            report.argmax as f64 * sol.h
        ));
    }
    sol.verified = report.passes() && structure_ok && barriers_ok;
    Ok(sol)
}
