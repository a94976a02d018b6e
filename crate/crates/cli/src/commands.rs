//! The four pipelines behind the subcommands.

use std::path::{Path, PathBuf};

use divband::model::ThinningModel;
use divband::operators::{
    check_bounds, hjb_residual_with_tolerance, operator_profile, residual_tolerance, v0_closed_form,
    Discretization, GridFunction, ResidualReport,
};
use divband::simulator::{estimate_value, SimulationConfig, SimulationResult};
use divband::solver::{
    barrier_check, extract_partition, policy_value, refine_study, solve, BandPolicy, ConvergenceTable,
    GridSolution, LumpBand,
};
use serde::Serialize;

use crate::artifacts::{self, in_dir};
use crate::config::{model_hash, RunConfig};
use crate::error::{CliError, Outcome};

/// Environment variable holding the simulator thread count.
pub const THREADS_ENV: &str = "DIVBAND_THREADS";

/// Slope floor of the growth condition on the grid.
const SLOPE_FLOOR: f64 = 1.0 - 1e-9;
/// Relative agreement required between stored and re-marched values.
const CONSISTENCY_TOL: f64 = 1e-6;
/// Relative agreement required at zero with the closed form.
const BOUNDARY_TOL: f64 = 0.01;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub h: Option<f64>,
    pub x_max: Option<f64>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub out: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub h_list: Option<Vec<f64>>,
}

pub fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(h) = ov.h {
        cfg.numerics.h = h;
    }
    if let Some(x) = ov.x_max {
        cfg.numerics.x_max = Some(x);
    }
    if let Some(s) = ov.seed {
        cfg.simulation.seed = s;
    }
    if let Some(p) = ov.paths {
        cfg.simulation.paths = p;
    }
    if let Some(d) = &ov.out {
        cfg.output.dir = d.clone();
    }
    if let Some(l) = &ov.h_list {
        cfg.numerics.h_list = Some(l.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub from: f64,
    pub to: f64,
}

fn intervals(flags: impl Iterator<Item = bool>, h: f64) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, bad) in flags.enumerate() {
        n = i + 1;
        match (bad, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Interval { from: s as f64 * h, to: (i - 1) as f64 * h });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Interval { from: s as f64 * h, to: (n - 1) as f64 * h });
    }
    out
}

/// Barrier policy assembled from the solver's own barriers, for runs whose
/// partition could not be extracted.
fn barrier_policy(sol: &GridSolution) -> BandPolicy {
    let h = sol.h;
    let last = sol.last_barrier();
    let mut lump_bands: Vec<LumpBand> = sol
        .lump_bands
        .iter()
        .map(|&(a, b)| LumpBand { lower: a as f64 * h, upper: b as f64 * h })
        .collect();
    lump_bands.push(LumpBand { lower: last as f64 * h, upper: f64::INFINITY });
    let mut policy = BandPolicy {
        h,
        levels: sol.barriers.iter().map(|i| *i as f64 * h).collect(),
        lump_bands,
        regions: Vec::new(),
        reinsurance: sol.argmin_candidate[..=last].to_vec(),
        model_hash: None,
    };
    policy.regions = (0..sol.len()).map(|i| policy.region(i as f64 * h)).collect();
    policy
}

#[derive(Debug, Serialize)]
struct ResidualSummary<'a> {
    discretization: Discretization,
    max_abs: f64,
    argmax_x: f64,
    tolerance: f64,
    passes: bool,
    violations: Vec<Interval>,
    verified: bool,
    partition_extracted: bool,
    barriers: Vec<f64>,
    lump_bands: &'a [LumpBand],
    v0: f64,
    notes: &'a [String],
}

fn violation_intervals(rep: &ResidualReport, h: f64) -> Vec<Interval> {
    intervals(rep.residual.iter().map(|r| r.abs() > rep.tolerance), h)
}

fn study(cfg: &RunConfig, steps: &[f64]) -> Result<ConvergenceTable, CliError> {
    let build = |h: f64| {
        cfg.candidate_space(h).map_err(|e| match e {
            CliError::Core(c) => c,
            other => divband::Error::InvalidArgument(other.to_string()),
        })
    };
    Ok(refine_study(build, steps, &cfg.solver_config())?)
}

/// Solve the HJB equation and write the value function, policy and
/// residual report (and the refinement table when `h_list` is set).
pub fn run_solve(config: &Path, ov: &Overrides) -> Result<Outcome, CliError> {
    let cfg = load_config(config, ov)?;
    let dir = cfg.output.dir.clone();
    artifacts::prepare_dir(&dir)?;
    let hash = cfg.hash();
    let model = cfg.model()?;
    let families = cfg.families(model.lines())?;
    let space = cfg.candidate_space(cfg.numerics.h)?;
    let sol = solve(&space, &cfg.solver_config())?;

    let partition_extracted = sol.bands.is_some();
    let policy = sol
        .bands
        .clone()
        .unwrap_or_else(|| barrier_policy(&sol))
        .with_model_hash(model_hash(model));
    artifacts::write_value_function(&in_dir(&dir, artifacts::VALUE_FUNCTION), &hash, &sol, &families)?;
    artifacts::write_policy(&in_dir(&dir, artifacts::POLICY), &hash, &policy)?;
    let rep = sol.residual_report.as_ref().expect("solve fills the residual report");
    let summary = ResidualSummary {
        discretization: rep.discretization,
        max_abs: rep.max_abs,
        argmax_x: rep.argmax as f64 * sol.h,
        tolerance: rep.tolerance,
        passes: rep.passes(),
        violations: violation_intervals(rep, sol.h),
        verified: sol.verified,
        partition_extracted,
        barriers: policy.levels.clone(),
        lump_bands: &policy.lump_bands,
        v0: sol.v0(),
        notes: &sol.notes,
    };
    artifacts::write_json(&in_dir(&dir, artifacts::RESIDUAL_REPORT), &hash, &summary)?;

    let mut text = format!(
        "barriers {:?}  V(0) = {:.6}  residual {:.3e} / {:.3e}  {}",
        policy.levels,
        sol.v0(),
        rep.max_abs,
        rep.tolerance,
        if sol.verified { "verified" } else { "NOT verified" }
    );
    for n in &sol.notes {
        text.push_str(&format!("\n  note: {n}"));
    }
    if let Some(steps) = cfg.numerics.h_list.clone() {
        let table = study(&cfg, &steps)?;
        artifacts::write_convergence(&in_dir(&dir, artifacts::CONVERGENCE), &hash, &table)?;
        text.push_str(&format!("\nrefinement differences of a1 {:?}, monotone {}", table.a1_diffs, table.monotone));
    }
    Ok(Outcome { verified: sol.verified, summary: text })
}

/// Run the refinement study alone.
pub fn run_converge(config: &Path, ov: &Overrides) -> Result<Outcome, CliError> {
    let cfg = load_config(config, ov)?;
    let Some(steps) = cfg.numerics.h_list.clone() else {
        return Err(CliError::config("numerics.h_list", "missing; give it in the config or with --h-list"));
    };
    let dir = cfg.output.dir.clone();
    artifacts::prepare_dir(&dir)?;
    let table = study(&cfg, &steps)?;
    artifacts::write_convergence(&in_dir(&dir, artifacts::CONVERGENCE), &cfg.hash(), &table)?;
    let mut text = String::new();
    for r in &table.rows {
        text.push_str(&format!("h = {}  a1 = {}  V(0) = {:.6}  verified {}\n", r.h, r.a1, r.v0, r.verified));
    }
    text.push_str(&format!("a1 differences {:?}, monotone {}", table.a1_diffs, table.monotone));
    Ok(Outcome { verified: table.monotone, summary: text })
}

fn policy_path(cfg: &RunConfig, ov: &Overrides) -> PathBuf {
    ov.policy.clone().unwrap_or_else(|| in_dir(&cfg.output.dir, artifacts::POLICY))
}

/// Policy together with the value table written next to it, after
/// checking that both belong to the configured model.
fn load_solved(cfg: &RunConfig, path: &Path) -> Result<(artifacts::Stamped<artifacts::PolicyBody>, artifacts::ValueTable), CliError> {
    let doc = artifacts::read_policy(path)?;
    let expected = model_hash(cfg.model()?);
    match &doc.body.policy.model_hash {
        Some(h) if *h == expected => {}
        other => {
            return Err(CliError::HashMismatch {
                policy: other.clone().unwrap_or_else(|| "<none>".into()),
                config: expected,
            })
        }
    }
    let csv = path.parent().unwrap_or(Path::new(".")).join(artifacts::VALUE_FUNCTION);
    let table = artifacts::read_value_function(&csv)?;
    let h = doc.body.policy.h;
    if (table.h() - h).abs() > 1e-9 * h {
        return Err(CliError::artifact(&csv, format!("grid step {} differs from the policy step {h}", table.h())));
    }
    Ok((doc, table))
}

fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::config(THREADS_ENV, format!("expected a thread count, got {s:?}"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationPoint {
    #[serde(flatten)]
    pub estimate: SimulationResult,
    pub v_h: f64,
    pub difference: f64,
    /// `difference / std_error`, when the standard error is defined.
    pub z_score: Option<f64>,
    pub within_3se: bool,
    pub relative_error: f64,
}

#[derive(Debug, Serialize)]
struct SimulationReport {
    policy_file: PathBuf,
    policy_config_hash: String,
    model_hash: String,
    horizon: f64,
    threads: usize,
    points: Vec<SimulationPoint>,
    all_within_3se: bool,
}

/// Monte Carlo value of the solved policy next to the grid value.
pub fn run_simulate(config: &Path, ov: &Overrides) -> Result<Outcome, CliError> {
    let cfg = load_config(config, ov)?;
    let path = policy_path(&cfg, ov);
    let (doc, table) = load_solved(&cfg, &path)?;
    let policy = &doc.body.policy;
    let model = cfg.model()?;
    let v_h = table.value(policy.h);
    let a1 = policy.levels[0];
    let x0 = cfg.simulation.x0.clone().unwrap_or_else(|| vec![0.0, a1 / 2.0, a1]);
    let sim = SimulationConfig {
        paths: cfg.simulation.paths,
        dt: cfg.simulation.dt,
        t_max: cfg.simulation.t_max,
        seed: cfg.simulation.seed,
        x0: 0.0,
        threads: threads_from_env()?,
    };
    let results = estimate_value(model, policy, &sim, &x0)?;
    let points: Vec<SimulationPoint> = results
        .into_iter()
        .map(|r| {
            let v = v_h.interpolate(r.x0);
            let d = r.mean_discounted_dividends - v;
            let z = r.std_error_defined.then(|| if r.std_error > 0.0 { d / r.std_error } else { f64::INFINITY * d.signum() });
            SimulationPoint {
                within_3se: z.is_some_and(|z| z.abs() <= 3.0 || d == 0.0),
                relative_error: d.abs() / v.abs(),
                v_h: v,
                difference: d,
                z_score: z,
                estimate: r,
            }
        })
        .collect();
    let all = points.iter().all(|p| p.within_3se);
    let dir = cfg.output.dir.clone();
    artifacts::prepare_dir(&dir)?;
    let mut text = String::new();
    for p in &points {
        text.push_str(&format!(
            "x0 = {:<8} MC = {:.5} +- {:.5}  V_h = {:.5}  z = {}\n",
            p.estimate.x0,
            p.estimate.mean_discounted_dividends,
            p.estimate.std_error,
            p.v_h,
            p.z_score.map_or("n/a".into(), |z| format!("{z:.2}"))
        ));
    }
    let report = SimulationReport {
        policy_file: path,
        policy_config_hash: doc.config_hash.clone(),
        model_hash: model_hash(model),
        horizon: sim.horizon(model),
        threads: sim.threads,
        points,
        all_within_3se: all,
    };
    artifacts::write_json(&in_dir(&dir, artifacts::SIMULATION_REPORT), &cfg.hash(), &report)?;
    text.push_str(if all { "all estimates within 3 standard errors" } else { "estimate outside 3 standard errors" });
    Ok(Outcome { verified: all, summary: text })
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    /// Which value function was checked: `policy` (re-marched) or `table`.
    pub subject: &'static str,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
    /// Positive when the check passes.
    pub margin: f64,
    pub detail: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub intervals: Vec<Interval>,
}

impl Check {
    /// `value <= limit`.
    fn at_most(name: &str, subject: &'static str, value: f64, limit: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            subject,
            passed: value <= limit,
            value,
            limit,
            margin: limit - value,
            detail,
            intervals: Vec::new(),
        }
    }

    fn with_intervals(mut self, iv: Vec<Interval>) -> Self {
        self.intervals = iv;
        self
    }
}

#[derive(Debug, Serialize)]
struct VerificationReport<'a> {
    policy_file: PathBuf,
    policy_config_hash: &'a str,
    table_config_hash: Option<&'a str>,
    model_hash: String,
    checks: &'a [Check],
    all_passed: bool,
}

fn residual_check(v: &GridFunction, space: &divband::search::CandidateSpace, cfg: &RunConfig, subject: &'static str) -> Result<Check, CliError> {
    let tol = cfg.numerics.residual_tol / 5e-3 * residual_tolerance(v, space.model());
    let rep = hjb_residual_with_tolerance(v, space, Discretization::Exact, tol)?;
    let detail = format!("max |max(1 - V', sup L V)| at x = {}", rep.argmax as f64 * v.h);
    Ok(Check::at_most("hjb_residual", subject, rep.max_abs, rep.tolerance, detail).with_intervals(violation_intervals(&rep, v.h)))
}

fn barrier_lambda_check(sol: &GridSolution, model: &ThinningModel, cfg: &RunConfig, subject: &'static str) -> Check {
    let profile = sol.scheme_profile.as_ref().expect("profile attached");
    let scale = (model.delta + model.total_intensity()) * sol.v.max_value().abs();
    let rows = barrier_check(sol, profile, cfg.numerics.scheme_tol * scale);
    let mut detail = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    let mut limit = 0.0;
    for (a, lam, slack) in &rows {
        detail.push(format!("x = {}: sup Lam = {lam:.3e}, allowed {slack:.3e}", *a as f64 * sol.h));
        let excess = lam.abs() - slack;
        if excess > worst {
            worst = excess;
            limit = *slack;
        }
    }
    Check {
        name: "barrier_lambda".into(),
        subject,
        passed: worst <= 0.0,
        value: worst + limit,
        limit,
        margin: -worst,
        detail: detail.join("; "),
        intervals: Vec::new(),
    }
}

fn slope_check(v: &GridFunction, subject: &'static str) -> Check {
    let n = v.len();
    let min = (0..n).map(|i| v.slope(i)).fold(f64::INFINITY, f64::min);
    Check {
        name: "slope".into(),
        subject,
        passed: min >= SLOPE_FLOOR,
        value: min,
        limit: SLOPE_FLOOR,
        margin: min - SLOPE_FLOOR,
        detail: "min V' on the grid".into(),
        intervals: intervals((0..n).map(|i| v.slope(i) < SLOPE_FLOOR), v.h),
    }
}

fn same_levels(a: &[f64], b: &[f64], h: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * h)
}

fn same_bands(a: &[LumpBand], b: &[LumpBand], h: f64) -> bool {
    let close = |x: f64, y: f64| x == y || (x - y).abs() <= 1e-9 * h;
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(x.lower, y.lower) && close(x.upper, y.upper))
}

/// Re-derive the value of the stored policy and check it, and the stored
/// value table, against the optimality conditions.
pub fn run_verify(config: &Path, ov: &Overrides) -> Result<Outcome, CliError> {
    let cfg = load_config(config, ov)?;
    let path = policy_path(&cfg, ov);
    let (doc, table) = load_solved(&cfg, &path)?;
    let policy = &doc.body.policy;
    let model = cfg.model()?;
    let h = policy.h;
    let space = cfg.candidate_space(h)?;
    let solver_cfg = cfg.solver_config();
    let stored = table.value(h);
    let n = stored.len();
    let mut pv = policy_value(model, policy, n)?;
    let mut checks = Vec::new();

    let gap = (0..n).map(|i| (pv.v.values[i] - stored.values[i]).abs()).fold(0.0, f64::max);
    let rel_gap = gap / stored.max_value().abs();
    checks.push(
        Check::at_most("value_consistency", "table", rel_gap, CONSISTENCY_TOL, "max |V_table - V_policy| / max V_table".into())
            .with_intervals(intervals(
                (0..n).map(|i| (pv.v.values[i] - stored.values[i]).abs() > CONSISTENCY_TOL * stored.max_value().abs()),
                h,
            )),
    );

    // The re-marched policy value.
    checks.push(residual_check(&pv.v, &space, &cfg, "policy")?);
    pv.scheme_profile = Some(operator_profile(&pv.v, &space, Discretization::Explicit)?);
    checks.push(barrier_lambda_check(&pv, model, &cfg, "policy"));
    checks.push(slope_check(&pv.v, "policy"));
    let bounds = check_bounds(&pv.v, model);
    checks.push(Check {
        name: "bounds".into(),
        subject: "policy",
        passed: bounds.passes(),
        value: bounds.violations.len() as f64,
        limit: 0.0,
        margin: -(bounds.violations.len() as f64),
        detail: match bounds.violations.first() {
            Some(b) => format!("{} violated at x = {} by {:.3e}", b.kind, b.x, b.margin),
            None => format!(
                "x + {:.6} - {h2} <= V <= x + {:.6} + {h2}",
                bounds.lower_intercept,
                bounds.upper_intercept,
                h2 = bounds.slack
            ),
        },
        intervals: Vec::new(),
    });
    let (passed, detail) = match extract_partition(&pv, &space, &solver_cfg) {
        Ok(p) => {
            let same = same_levels(&p.levels, &policy.levels, h) && same_bands(&p.lump_bands, &policy.lump_bands, h);
            let msg = format!("extracted barriers {:?}, stored {:?}", p.levels, policy.levels);
            (same, msg)
        }
        Err(e) => (false, e.to_string()),
    };
    checks.push(Check {
        name: "partition".into(),
        subject: "policy",
        passed,
        value: if passed { 0.0 } else { 1.0 },
        limit: 0.0,
        margin: if passed { 0.0 } else { -1.0 },
        detail,
        intervals: Vec::new(),
    });
    let closed = v0_closed_form(&space)?;
    let rel = (pv.v0() - closed).abs() / closed.abs();
    checks.push(Check::at_most(
        "boundary_closed_form",
        "policy",
        rel,
        BOUNDARY_TOL,
        format!("V(0) = {:.6}, closed form {closed:.6}", pv.v0()),
    ));

    // The stored table.
    checks.push(residual_check(&stored, &space, &cfg, "table")?);
    let mut ts = pv.clone();
    ts.v = stored.clone();
    ts.scheme_profile = Some(operator_profile(&stored, &space, Discretization::Explicit)?);
    checks.push(barrier_lambda_check(&ts, model, &cfg, "table"));
    checks.push(slope_check(&stored, "table"));

    let all = checks.iter().all(|c| c.passed);
    let dir = cfg.output.dir.clone();
    artifacts::prepare_dir(&dir)?;
    let report = VerificationReport {
        policy_file: path,
        policy_config_hash: &doc.config_hash,
        table_config_hash: table.config_hash.as_deref(),
        model_hash: model_hash(model),
        checks: &checks,
        all_passed: all,
    };
    artifacts::write_json(&in_dir(&dir, artifacts::VERIFICATION_REPORT), &cfg.hash(), &report)?;
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!(
            "{:<5} {:<20} {:<6} value {:.4e}  limit {:.4e}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.subject,
            c.value,
            c.limit
        ));
        if let Some(iv) = c.intervals.first() {
            text.push_str(&format!("  first interval [{}, {}]", iv.from, iv.to));
        }
        text.push('\n');
    }
    text.push_str(if all { "all checks passed" } else { "verification failed" });
    Ok(Outcome { verified: all, summary: text })
}
