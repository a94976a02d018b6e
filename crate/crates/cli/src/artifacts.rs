//! On-disk artifacts. Every file carries the tool version and the config
//! hash: CSV files in `#` comment lines, JSON files as top-level fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use divband::reinsurance::{Family, RetainedLossSpec};
use divband::solver::{BandPolicy, ConvergenceTable, GridSolution};
use divband::operators::GridFunction;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const TOOL: &str = "divband";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const VALUE_FUNCTION: &str = "value_function.csv";
pub const POLICY: &str = "policy.json";
pub const RESIDUAL_REPORT: &str = "residual_report.json";
pub const CONVERGENCE: &str = "convergence.csv";
pub const SIMULATION_REPORT: &str = "simulation_report.json";
pub const VERIFICATION_REPORT: &str = "verification_report.json";

/// Create `dir` and make sure files can be written into it.
pub fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let probe = dir.join(".divband_write_probe");
    fs::write(&probe, b"").map_err(|e| CliError::io(&probe, e))?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// JSON document with the standard header fields in front of `body`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Stamped<T> {
    pub fn new(config_hash: &str, body: T) -> Self {
        Stamped {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_hash: config_hash.into(),
            body,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, config_hash: &str, body: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&Stamped::new(config_hash, body)).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBody {
    pub policy: BandPolicy,
}

pub fn write_policy(path: &Path, config_hash: &str, policy: &BandPolicy) -> Result<(), CliError> {
    write_json(path, config_hash, &PolicyBody { policy: policy.clone() })
}

pub fn read_policy(path: &Path) -> Result<Stamped<PolicyBody>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::artifact(path, e.to_string()))
}

fn header(config_hash: &str) -> String {
    format!("# {TOOL} {VERSION}\n# config_hash {config_hash}\n")
}

/// Column names of the contract parameters of one line.
fn family_columns(family: Family) -> &'static [&'static str] {
    match family {
        Family::Identity => &[],
        Family::Proportional => &["b"],
        Family::Xl => &["M"],
        Family::Lxl => &["M", "L"],
    }
}

/// Parameters of `spec` in the columns of `family`; full retention is
/// `b = 1` or `M = inf`.
fn family_params(family: Family, spec: &RetainedLossSpec) -> Vec<f64> {
    match (family, *spec) {
        (Family::Identity, _) => vec![],
        (Family::Proportional, RetainedLossSpec::Proportional { b }) => vec![b],
        (Family::Proportional, _) => vec![1.0],
        (Family::Xl, RetainedLossSpec::Xl { m }) => vec![m],
        (Family::Xl, _) => vec![f64::INFINITY],
        (Family::Lxl, RetainedLossSpec::Lxl { m, l }) => vec![m, l],
        (Family::Lxl, _) => vec![f64::INFINITY, 0.0],
    }
}

/// `x, f, fprime, V, residual, line<k>_<param>...`.
pub fn write_value_function(
    path: &Path,
    config_hash: &str,
    sol: &GridSolution,
    families: &[Family],
) -> Result<(), CliError> {
    let mut out = header(config_hash).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut cols: Vec<String> = ["x", "f", "fprime", "V", "residual"].iter().map(|s| s.to_string()).collect();
        for (z, fam) in families.iter().enumerate() {
            for p in family_columns(*fam) {
                cols.push(format!("line{}_{p}", z + 1));
            }
        }
        w.write_record(&cols).map_err(|e| CliError::artifact(path, e.to_string()))?;
        let residual = sol.residual_report.as_ref().map(|r| &r.residual);
        for i in 0..sol.len() {
            let mut row = vec![
                sol.v.x(i),
                sol.f.values[i],
                sol.fprime.values[i],
                sol.v.values[i],
                residual.map_or(f64::NAN, |r| r[i]),
            ];
            for (z, fam) in families.iter().enumerate() {
                row.extend(family_params(*fam, &sol.argmin_candidate[i].specs[z]));
            }
            w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| CliError::artifact(path, e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    write_file(path, &out)
}

/// Value function as read back from disk.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub config_hash: Option<String>,
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    pub fprime: Vec<f64>,
    pub v: Vec<f64>,
}

impl ValueTable {
    pub fn h(&self) -> f64 {
        if self.x.len() > 1 {
            self.x[1] - self.x[0]
        } else {
            f64::NAN
        }
    }

    /// `V` with the scheme slope: backward differences, and at zero the
    /// derivative implied by `f` and `fprime`.
    pub fn value(&self, h: f64) -> GridFunction {
        let n = self.v.len();
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            d.push(if i == 0 {
                self.fprime[0] * self.v[0] / self.f[0]
            } else {
                (self.v[i] - self.v[i - 1]) / h
            });
        }
        GridFunction::with_derivative(h, self.v.clone(), d)
    }
}

pub fn read_value_function(path: &Path) -> Result<ValueTable, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config_hash = text
        .lines()
        .filter_map(|l| l.strip_prefix("# config_hash "))
        .map(|s| s.trim().to_string())
        .next();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| CliError::artifact(path, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::artifact(path, format!("no column {name}")))
    };
    let (cx, cf, cfp, cv) = (col("x")?, col("f")?, col("fprime")?, col("V")?);
    let mut t = ValueTable {
        config_hash,
        x: Vec::new(),
        f: Vec::new(),
        fprime: Vec::new(),
        v: Vec::new(),
    };
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::artifact(path, e.to_string()))?;
        let num = |c: usize| -> Result<f64, CliError> {
            rec.get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::artifact(path, format!("row {}: bad number in column {c}", n + 1)))
        };
        t.x.push(num(cx)?);
        t.f.push(num(cf)?);
        t.fprime.push(num(cfp)?);
        t.v.push(num(cv)?);
    }
    if t.v.len() < 2 {
        return Err(CliError::artifact(path, "fewer than two grid points"));
    }
    Ok(t)
}

pub fn write_convergence(path: &Path, config_hash: &str, table: &ConvergenceTable) -> Result<(), CliError> {
    let mut out = header(config_hash).into_bytes();
    writeln!(out, "# monotone {}", table.monotone).expect("in-memory write");
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["h", "a1", "v0", "max_residual", "verified", "a1_diff", "v0_diff"])
            .map_err(|e| CliError::artifact(path, e.to_string()))?;
        for (i, row) in table.rows.iter().enumerate() {
            let diff = |d: &[f64]| d.get(i).map_or(String::new(), |v| v.to_string());
            w.write_record([
                row.h.to_string(),
                row.a1.to_string(),
                row.v0.to_string(),
                row.max_residual.to_string(),
                row.verified.to_string(),
                diff(&table.a1_diffs),
                diff(&table.v0_diffs),
            ])
            .map_err(|e| CliError::artifact(path, e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    write_file(path, &out)
}

/// Artifact path inside an output directory.
pub fn in_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_maps_to_full_retention_columns() {
        assert_eq!(family_params(Family::Proportional, &RetainedLossSpec::Identity), vec![1.0]);
        assert_eq!(family_params(Family::Xl, &RetainedLossSpec::Identity), vec![f64::INFINITY]);
        assert_eq!(family_params(Family::Xl, &RetainedLossSpec::Xl { m: 2.5 }), vec![2.5]);
        assert!(family_columns(Family::Identity).is_empty());
    }

    #[test]
    fn stamped_json_has_header_fields() {
        let doc = serde_json::to_value(Stamped::new("abc", serde_json::json!({ "k": 1 }))).unwrap();
        assert_eq!(doc["tool"], TOOL);
        assert_eq!(doc["version"], VERSION);
        assert_eq!(doc["config_hash"], "abc");
        assert_eq!(doc["k"], 1);
    }
}
