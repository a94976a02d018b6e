//! Run configuration: one TOML file per experiment.
//!
//! ```toml
//! [model]            # inline, or `model = "path/to/model.toml"`
//! beta = [1.0]
//! thinning = [[1.0]]
//! severities = [{ kind = "exponential", rate = 1.0 }]
//! eta = 0.5
//! eta1 = 0.7
//! delta = 0.1
//!
//! [contracts]
//! mode = "per_line"  # or "shared"
//! family = "proportional"
//! b = { from = 0.25, to = 1.0, count = 4 }
//!
//! [numerics]
//! h = 0.02
//! ```

use std::path::{Path, PathBuf};

use divband::model::ThinningModel;
use divband::reinsurance::{line_options, Family, LineGrid, ParameterGrid, RetainedLossSpec};
use divband::search::{CandidateSpace, SearchConfig};
use divband::solver::SolverConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(ThinningModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractMode {
    /// One independent contract per line.
    PerLine,
    /// A single contract applied to every line.
    Shared,
}

/// Grid axis: an explicit list (`inf` allowed as the last entry) or an
/// evenly spaced range, optionally closed by the infinite sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisSpec {
    List(Vec<Limit>),
    Range {
        from: f64,
        to: f64,
        count: usize,
        #[serde(default)]
        inf: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Limit(#[serde(with = "divband::reinsurance::limit")] pub f64);

impl AxisSpec {
    pub fn values(&self, name: &str) -> Result<Vec<f64>, CliError> {
        match self {
            AxisSpec::List(v) => Ok(v.iter().map(|x| x.0).collect()),
            &AxisSpec::Range { from, to, count, inf } => {
                if count == 0 || !from.is_finite() || !to.is_finite() {
                    return Err(CliError::config(name, "range needs finite ends and count >= 1"));
                }
                let mut v: Vec<f64> = if count == 1 {
                    vec![from]
                } else {
                    let step = (to - from) / (count - 1) as f64;
                    (0..count).map(|i| if i + 1 == count { to } else { from + i as f64 * step }).collect()
                };
                if inf {
                    v.push(f64::INFINITY);
                }
                Ok(v)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineAxes {
    pub b: Option<AxisSpec>,
    pub m: Option<AxisSpec>,
    pub l: Option<AxisSpec>,
}

impl LineAxes {
    fn grid(&self, prefix: &str) -> Result<LineGrid, CliError> {
        let axis = |a: &Option<AxisSpec>, n: &str| match a {
            Some(a) => a.values(&format!("{prefix}.{n}")),
            None => Ok(Vec::new()),
        };
        Ok(LineGrid {
            b: axis(&self.b, "b")?,
            m: axis(&self.m, "m")?,
            l: axis(&self.l, "l")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contracts {
    pub mode: ContractMode,
    /// Family for every line; `families` sets them one by one.
    pub family: Option<Family>,
    pub families: Option<Vec<Family>>,
    /// Axes shared by all lines, used when `lines` is absent.
    pub b: Option<AxisSpec>,
    pub m: Option<AxisSpec>,
    pub l: Option<AxisSpec>,
    pub lines: Option<Vec<LineAxes>>,
}

impl Contracts {
    fn common_axes(&self) -> LineAxes {
        LineAxes {
            b: self.b.clone(),
            m: self.m.clone(),
            l: self.l.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    pub h: f64,
    /// Grid end; by default the march stops adaptively.
    pub x_max: Option<f64>,
    /// Lattice points of the aggregate laws at step `h`; by default
    /// `ceil(4 p / (delta h))`.
    pub k: Option<usize>,
    #[serde(default = "defaults::residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "defaults::scheme_tol")]
    pub scheme_tol: f64,
    #[serde(default = "defaults::partition_tol")]
    pub partition_tol: f64,
    #[serde(default = "defaults::grid_tol")]
    pub grid_tol: f64,
    #[serde(default = "defaults::band_cap")]
    pub band_cap: usize,
    /// Steps of the refinement study, coarse to fine.
    pub h_list: Option<Vec<f64>>,
}

mod defaults {
    use divband::solver::SolverConfig;

    pub fn residual_tol() -> f64 {
        SolverConfig::default().residual_tol
    }
    pub fn scheme_tol() -> f64 {
        SolverConfig::default().scheme_tol
    }
    pub fn partition_tol() -> f64 {
        SolverConfig::default().partition_tol
    }
    pub fn grid_tol() -> f64 {
        SolverConfig::default().grid_tol
    }
    pub fn band_cap() -> usize {
        SolverConfig::default().band_cap
    }
    pub fn paths() -> usize {
        100_000
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn dt() -> f64 {
        0.01
    }
    pub fn out() -> std::path::PathBuf {
        "divband_out".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulation {
    #[serde(default = "defaults::paths")]
    pub paths: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Starting levels; by default `0, a1 / 2, a1`.
    pub x0: Option<Vec<f64>>,
    pub t_max: Option<f64>,
    #[serde(default = "defaults::dt")]
    pub dt: f64,
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation {
            paths: defaults::paths(),
            seed: defaults::seed(),
            x0: None,
            t_max: None,
            dt: defaults::dt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    #[serde(default = "defaults::out")]
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Output { dir: defaults::out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub contracts: Contracts,
    pub numerics: Numerics,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub simulation: Simulation,
    #[serde(default)]
    pub output: Output,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a model's canonical JSON form.
pub fn model_hash(model: &ThinningModel) -> String {
    sha256_hex(serde_json::to_string(model).expect("model serializes").as_bytes())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    /// Read `path`; a model given by path is resolved relative to it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
            e => e,
        })?;
        if let ModelSource::Path(p) = &cfg.model {
            let p = path.parent().unwrap_or(Path::new(".")).join(p);
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let model: ThinningModel = if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?
            } else {
                toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?
            };
            cfg.model = ModelSource::Inline(model);
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<&ThinningModel, CliError> {
        match &self.model {
            ModelSource::Inline(m) => Ok(m),
            ModelSource::Path(p) => Err(CliError::config("model", format!("unresolved model path {}", p.display()))),
        }
    }

    /// Field-level checks that do not need the solver.
    pub fn validate(&self) -> Result<(), CliError> {
        let n = &self.numerics;
        if !(n.h > 0.0 && n.h.is_finite()) {
            return Err(CliError::config("numerics.h", format!("must be positive, got {}", n.h)));
        }
        if let Some(x) = n.x_max {
            if !(x > 0.0 && x.is_finite()) {
                return Err(CliError::config("numerics.x_max", format!("must be positive, got {x}")));
            }
        }
        if let Some(list) = &n.h_list {
            if list.is_empty() || list.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                return Err(CliError::config("numerics.h_list", "needs positive steps"));
            }
        }
        for (name, t) in [
            ("numerics.residual_tol", n.residual_tol),
            ("numerics.scheme_tol", n.scheme_tol),
            ("numerics.partition_tol", n.partition_tol),
            ("numerics.grid_tol", n.grid_tol),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(CliError::config(name, format!("must be nonnegative, got {t}")));
            }
        }
        if n.band_cap == 0 {
            return Err(CliError::config("numerics.band_cap", "must be at least 1"));
        }
        if self.simulation.paths == 0 {
            return Err(CliError::config("simulation.paths", "must be at least 1"));
        }
        let model = self.model()?;
        model.validate().into_result()?;
        self.parameter_grid(model.lines())?;
        Ok(())
    }

    /// Digest of everything except the output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn solver_config(&self) -> SolverConfig {
        let n = &self.numerics;
        SolverConfig {
            x_max: n.x_max,
            band_cap: n.band_cap,
            residual_tol: n.residual_tol,
            scheme_tol: n.scheme_tol,
            partition_tol: n.partition_tol,
            grid_tol: n.grid_tol,
        }
    }

    pub fn families(&self, lines: usize) -> Result<Vec<Family>, CliError> {
        let c = &self.contracts;
        let fams = match (&c.family, &c.families) {
            (Some(_), Some(_)) => {
                return Err(CliError::config("contracts.families", "give either `family` or `families`"))
            }
            (Some(f), None) => vec![*f; lines],
            (None, Some(v)) => v.clone(),
            (None, None) => return Err(CliError::config("contracts.family", "missing")),
        };
        if fams.len() != lines {
            return Err(CliError::config(
                "contracts.families",
                format!("{} families for {lines} lines", fams.len()),
            ));
        }
        if c.mode == ContractMode::Shared && fams.windows(2).any(|w| w[0] != w[1]) {
            return Err(CliError::config("contracts.families", "shared mode needs one family"));
        }
        Ok(fams)
    }

    pub fn parameter_grid(&self, lines: usize) -> Result<ParameterGrid, CliError> {
        let c = &self.contracts;
        let grids = match &c.lines {
            Some(per) => {
                if c.common_axes() != LineAxes::default() {
                    return Err(CliError::config("contracts.lines", "give either per-line or common axes"));
                }
                if per.len() != lines {
                    return Err(CliError::config(
                        "contracts.lines",
                        format!("{} entries for {lines} lines", per.len()),
                    ));
                }
                if c.mode == ContractMode::Shared && per.windows(2).any(|w| w[0] != w[1]) {
                    return Err(CliError::config("contracts.lines", "shared mode needs one grid"));
                }
                per.iter()
                    .enumerate()
                    .map(|(z, a)| a.grid(&format!("contracts.lines[{z}]")))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => vec![c.common_axes().grid("contracts")?; lines],
        };
        let grid = ParameterGrid { lines: grids };
        // Surface empty or out-of-range axes now, named after the config.
        line_options(&grid, &self.families(lines)?).map_err(|e| CliError::config("contracts", e.to_string()))?;
        Ok(grid)
    }

    /// Lattice size for step `h`.
    pub fn lattice_points(&self, h: f64) -> Result<usize, CliError> {
        let model = self.model()?;
        let base = match self.numerics.k {
            Some(k) => (k as f64 * self.numerics.h / h).ceil() as usize,
            None => (4.0 * model.gross_premium() / model.delta / h).ceil() as usize,
        };
        let need = self.numerics.x_max.map_or(0, |x| (x / h).round() as usize + 1);
        Ok(base.max(need).max(2))
    }

    pub fn candidate_space(&self, h: f64) -> Result<CandidateSpace, CliError> {
        let model = self.model()?;
        let lines = model.lines();
        let grid = self.parameter_grid(lines)?;
        let options: Vec<Vec<RetainedLossSpec>> = line_options(&grid, &self.families(lines)?)?;
        let k = self.lattice_points(h)?;
        let space = match self.contracts.mode {
            ContractMode::PerLine => CandidateSpace::per_line(model, options, h, k, self.search)?,
            ContractMode::Shared => CandidateSpace::shared(model, options[0].clone(), h, k, self.search)?,
        };
        Ok(space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        [model]
        beta = [1.0]
        thinning = [[1.0]]
        severities = [{ kind = "exponential", rate = 1.0 }]
        eta = 0.5
        eta1 = 0.7
        delta = 0.1

        [contracts]
        mode = "per_line"
        family = "xl"
        m = { from = 0.5, to = 2.0, count = 4, inf = true }

        [numerics]
        h = 0.05
    "#;

    #[test]
    fn range_axis_expands_with_sentinel() {
        let cfg = RunConfig::parse(BASE).unwrap();
        let g = cfg.parameter_grid(1).unwrap();
        assert_eq!(g.lines[0].m, vec![0.5, 1.0, 1.5, 2.0, f64::INFINITY]);
        assert_eq!(cfg.numerics.band_cap, 8);
        assert_eq!(cfg.simulation.paths, 100_000);
    }

    #[test]
    fn list_axis_accepts_inf() {
        let text = BASE.replace("m = { from = 0.5, to = 2.0, count = 4, inf = true }", r#"m = [1.0, 2.0, "inf"]"#);
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.parameter_grid(1).unwrap().lines[0].m, vec![1.0, 2.0, f64::INFINITY]);
        let bare = BASE.replace("m = { from = 0.5, to = 2.0, count = 4, inf = true }", "m = [1.0, inf]");
        assert_eq!(RunConfig::parse(&bare).unwrap().parameter_grid(1).unwrap().lines[0].m, vec![1.0, f64::INFINITY]);
    }

    #[test]
    fn nonpositive_step_names_the_field() {
        let cfg = RunConfig::parse(&BASE.replace("h = 0.05", "h = -0.1")).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("numerics.h"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = BASE.replace("h = 0.05", "h = 0.05\nhh = 1");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn empty_axis_is_rejected() {
        let text = BASE.replace("m = { from = 0.5, to = 2.0, count = 4, inf = true }", "m = []");
        let cfg = RunConfig::parse(&text).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("contracts"));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::parse(BASE).unwrap();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.numerics.h = 0.04;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn default_lattice_covers_four_premium_horizons() {
        let cfg = RunConfig::parse(BASE).unwrap();
        // p = 1.5, delta = 0.1: 4 p / delta = 60.
        assert_eq!(cfg.lattice_points(0.05).unwrap(), 1200);
    }
}
