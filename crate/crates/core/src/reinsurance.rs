//! Retained-loss functions and their effect on claim laws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{bucket_index, LatticeDistribution};
use crate::model::SeverityLaw;

/// Default cap on the size of a Cartesian candidate product.
pub const DEFAULT_CANDIDATE_CAP: usize = 200_000;

/// Part of a claim `alpha` kept by the insurer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RetainedLossSpec {
    Identity,
    /// `b alpha`.
    Proportional { b: f64 },
    /// `min(alpha, M)`.
    Xl {
        #[serde(with = "limit")]
        m: f64,
    },
    /// `min(alpha, M) + (alpha - M - L)^+`.
    Lxl {
        #[serde(with = "limit")]
        m: f64,
        #[serde(with = "limit")]
        l: f64,
    },
}

/// Serializes an infinite priority or limit as the string `"inf"`.
pub mod limit {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => {
                Ok(f64::INFINITY)
            }
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

impl RetainedLossSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RetainedLossSpec::Identity => true,
            RetainedLossSpec::Proportional { b } => (0.0..=1.0).contains(&b),
            RetainedLossSpec::Xl { m } => m >= 0.0,
            RetainedLossSpec::Lxl { m, l } => m >= 0.0 && l >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidContract(format!("{self:?}")))
        }
    }

    /// Retained amount of a claim of size `alpha >= 0`.
    pub fn apply(&self, alpha: f64) -> f64 {
        match *self {
            RetainedLossSpec::Identity => alpha,
            RetainedLossSpec::Proportional { b } => b * alpha,
            RetainedLossSpec::Xl { m } => alpha.min(m),
            RetainedLossSpec::Lxl { m, l } => {
                if alpha <= m {
                    alpha
                } else {
                    m + (alpha - m - l).max(0.0)
                }
            }
        }
    }

    /// True when the contract cedes nothing.
    pub fn is_identity(&self) -> bool {
        match *self {
            RetainedLossSpec::Identity => true,
            RetainedLossSpec::Proportional { b } => b == 1.0,
            RetainedLossSpec::Xl { m } => m.is_infinite(),
            RetainedLossSpec::Lxl { m, l } => m.is_infinite() || l == 0.0,
        }
    }

    /// Move the priority and limit onto the lattice `{k h}`; the ceded layer
    /// then starts and ends at grid points.
    pub fn snapped(&self, h: f64) -> Self {
        let snap = |x: f64| if x.is_finite() { (x / h).round() * h } else { x };
        match *self {
            RetainedLossSpec::Xl { m } => RetainedLossSpec::Xl { m: snap(m) },
            RetainedLossSpec::Lxl { m, l } => RetainedLossSpec::Lxl {
                m: snap(m),
                l: snap(l),
            },
            other => other,
        }
    }

    /// `P(R(U) > y)`.
    pub fn retained_survival(&self, law: &SeverityLaw, y: f64) -> f64 {
        if y < 0.0 {
            return 1.0;
        }
        match *self {
            RetainedLossSpec::Identity => law.survival(y),
            RetainedLossSpec::Proportional { b } => {
                if b == 0.0 {
                    0.0
                } else {
                    law.survival(y / b)
                }
            }
            RetainedLossSpec::Xl { m } => {
                if y >= m {
                    0.0
                } else {
                    law.survival(y)
                }
            }
            RetainedLossSpec::Lxl { m, l } => {
                if y < m {
                    law.survival(y)
                } else {
                    law.survival(y + l)
                }
            }
        }
    }

    /// Stop-loss transform of the retained claim, `E[(R(U) - t)^+]`.
    pub fn retained_stop_loss(&self, law: &SeverityLaw, t: f64) -> f64 {
        let t = t.max(0.0);
        match *self {
            RetainedLossSpec::Identity => law.stop_loss(t),
            RetainedLossSpec::Proportional { b } => {
                if b == 0.0 {
                    0.0
                } else {
                    b * law.stop_loss(t / b)
                }
            }
            RetainedLossSpec::Xl { m } => {
                if t >= m {
                    0.0
                } else {
                    law.stop_loss(t) - law.stop_loss(m)
                }
            }
            RetainedLossSpec::Lxl { m, l } => {
                if t < m {
                    law.stop_loss(t) - law.stop_loss(m) + law.stop_loss(m + l)
                } else {
                    law.stop_loss(t + l)
                }
            }
        }
    }

    /// Exact `E[R(U)]`.
    pub fn retained_mean(&self, law: &SeverityLaw) -> f64 {
        self.retained_stop_loss(law, 0.0).max(0.0)
    }

    /// Short label used in reports and CSV columns.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            RetainedLossSpec::Identity => &[],
            RetainedLossSpec::Proportional { .. } => &["b"],
            RetainedLossSpec::Xl { .. } => &["M"],
            RetainedLossSpec::Lxl { .. } => &["M", "L"],
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            RetainedLossSpec::Identity => vec![],
            RetainedLossSpec::Proportional { b } => vec![b],
            RetainedLossSpec::Xl { m } => vec![m],
            RetainedLossSpec::Lxl { m, l } => vec![m, l],
        }
    }

    /// Bitwise key for memoization.
    pub(crate) fn key(&self) -> (u8, u64, u64) {
        match *self {
            RetainedLossSpec::Identity => (0, 0, 0),
            RetainedLossSpec::Proportional { b } => (1, b.to_bits(), 0),
            RetainedLossSpec::Xl { m } => (2, m.to_bits(), 0),
            RetainedLossSpec::Lxl { m, l } => (3, m.to_bits(), l.to_bits()),
        }
    }
}

/// Law of `R(U)` on the lattice, bucketed exactly from the claim law.
///
/// Priorities and limits are snapped to the lattice first, so an XL atom
/// lands at `round(M/h) h`.
pub fn pushforward_law(
    spec: &RetainedLossSpec,
    law: &SeverityLaw,
    h: f64,
    k: usize,
) -> Result<LatticeDistribution> {
    spec.validate()?;
    if spec.is_identity() {
        return LatticeDistribution::from_severity(law, h, k);
    }
    let spec = spec.snapped(h);
    if let RetainedLossSpec::Proportional { b } = spec {
        if b == 0.0 {
            return Ok(LatticeDistribution::point_mass_zero(h, k));
        }
    }
    if let SeverityLaw::EmpiricalLattice { step, masses } = law {
        // Atoms map to atoms; bucket each image.
        let mut out = vec![0.0; k + 1];
        let mut tail = 0.0;
        let mut moment = 0.0;
        for (idx, m) in masses.iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            let y = spec.apply(idx as f64 * step);
            let j = bucket_index(y, h);
            if j <= k {
                out[j] += m;
            } else {
                tail += m;
                moment += m * y;
            }
        }
        return Ok(LatticeDistribution::from_masses(h, out, tail)?.with_tail_moment(moment));
    }
    match spec {
        RetainedLossSpec::Xl { m } | RetainedLossSpec::Lxl { m, .. } => {
            // Integer comparisons avoid rounding at the snapped priority.
            let km = (m / h).round();
            let survival = |y: f64| {
                let j = (y / h).round();
                match spec {
                    RetainedLossSpec::Xl { .. } => {
                        if j >= km {
                            0.0
                        } else {
                            law.survival(y)
                        }
                    }
                    RetainedLossSpec::Lxl { l, .. } => {
                        if j < km {
                            law.survival(y)
                        } else {
                            law.survival(y + l)
                        }
                    }
                    _ => unreachable!(),
                }
            };
            Ok(LatticeDistribution::from_tail_functions(h, k, survival, |t| {
                spec.retained_stop_loss(law, t)
            }))
        }
        _ => Ok(LatticeDistribution::from_tail_functions(
            h,
            k,
            |y| spec.retained_survival(law, y),
            |t| spec.retained_stop_loss(law, t),
        )),
    }
}

/// Law of `R(U)` when only a lattice law of `U` is available. Mass at `j h`
/// is mapped to the bucket of `R(j h)`; base tail mass stays in the tail.
pub fn pushforward(
    spec: &RetainedLossSpec,
    base: &LatticeDistribution,
    h: f64,
    k: usize,
) -> Result<LatticeDistribution> {
    spec.validate()?;
    if (base.h() - h).abs() > 1e-12 * h {
        return Err(Error::StepMismatch {
            left: base.h(),
            right: h,
        });
    }
    if spec.is_identity() {
        return Ok(if k >= base.k() {
            base.padded(k)
        } else {
            base.truncated(k)
        });
    }
    let spec = spec.snapped(h);
    let mut out = vec![0.0; k + 1];
    let mut tail = base.tail_mass();
    let mut moment = 0.0;
    if let RetainedLossSpec::Xl { m } = spec {
        // Everything beyond the lattice is capped at M.
        let km = bucket_index(m, h);
        if km <= k {
            out[km] += tail;
            tail = 0.0;
        }
    }
    for (j, m) in base.masses().iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        let y = spec.apply(j as f64 * h);
        let idx = bucket_index(y, h);
        if idx <= k {
            out[idx] += m;
        } else {
            tail += m;
            moment += m * y;
        }
    }
    // Retention never exceeds the claim, so the base tail moment bounds the
    // retained one.
    let carried = if tail > 0.0 { base.tail_moment() } else { 0.0 };
    let tail_moment = moment + spec_scale(&spec) * carried;
    Ok(LatticeDistribution::from_masses(h, out, tail)?.with_tail_moment(tail_moment))
}

fn spec_scale(spec: &RetainedLossSpec) -> f64 {
    match *spec {
        RetainedLossSpec::Proportional { b } => b,
        _ => 1.0,
    }
}

/// One retained-loss function per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinsuranceVector {
    pub specs: Vec<RetainedLossSpec>,
    #[serde(default)]
    pub shared: bool,
}

impl ReinsuranceVector {
    pub fn new(specs: Vec<RetainedLossSpec>) -> Self {
        ReinsuranceVector {
            specs,
            shared: false,
        }
    }

    pub fn shared(spec: RetainedLossSpec, lines: usize) -> Self {
        ReinsuranceVector {
            specs: vec![spec; lines],
            shared: true,
        }
    }

    pub fn identity(lines: usize) -> Self {
        ReinsuranceVector::new(vec![RetainedLossSpec::Identity; lines])
    }

    pub fn lines(&self) -> usize {
        self.specs.len()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.specs {
            s.validate()?;
        }
        if self.shared && self.specs.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidContract(
                "shared vector must use one contract on every line".into(),
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.specs.iter().all(|s| s.is_identity())
    }
}

/// Contract family chosen for a line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Identity,
    Proportional,
    Xl,
    Lxl,
}

/// Candidate parameters for one line. `m` and `l` may end with the
/// infinite sentinel, which counts as a grid point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LineGrid {
    #[serde(default)]
    pub b: Vec<f64>,
    #[serde(default, with = "limit_vec")]
    pub m: Vec<f64>,
    #[serde(default, with = "limit_vec")]
    pub l: Vec<f64>,
}

mod limit_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::limit")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| Wrap(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Wrap>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub lines: Vec<LineGrid>,
}

fn check_axis(name: &str, v: &[f64], lo: f64, hi: f64, allow_inf: bool) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidContract(format!("{name}-grid must not be empty")));
    }
    for (i, x) in v.iter().enumerate() {
        let last = i + 1 == v.len();
        let ok_inf = allow_inf && last && x.is_infinite() && *x > 0.0;
        if !(ok_inf || (x.is_finite() && *x >= lo && *x <= hi)) {
            return Err(Error::InvalidContract(format!(
                "{name}-grid entry {x} is outside [{lo}, {hi}]"
            )));
        }
    }
    if v.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidContract(format!(
            "{name}-grid must be strictly ascending"
        )));
    }
    Ok(())
}

impl LineGrid {
    /// Contract options of this line for a family, identity appended when no
    /// option already cedes nothing.
    pub fn options(&self, family: Family) -> Result<Vec<RetainedLossSpec>> {
        let mut out = match family {
            Family::Identity => vec![],
            Family::Proportional => {
                check_axis("b", &self.b, 0.0, 1.0, false)?;
                self.b
                    .iter()
                    .map(|&b| RetainedLossSpec::Proportional { b })
                    .collect()
            }
            Family::Xl => {
                check_axis("M", &self.m, 0.0, f64::MAX, true)?;
                self.m.iter().map(|&m| RetainedLossSpec::Xl { m }).collect()
            }
            Family::Lxl => {
                check_axis("M", &self.m, 0.0, f64::MAX, true)?;
                check_axis("L", &self.l, 0.0, f64::MAX, true)?;
                let mut v = Vec::with_capacity(self.m.len() * self.l.len());
                for &m in &self.m {
                    for &l in &self.l {
                        v.push(RetainedLossSpec::Lxl { m, l });
                    }
                }
                v
            }
        };
        if !out.iter().any(|s| s.is_identity()) {
            out.push(RetainedLossSpec::Identity);
        }
        Ok(out)
    }
}

/// Per-line option lists for the given families.
pub fn line_options(grid: &ParameterGrid, families: &[Family]) -> Result<Vec<Vec<RetainedLossSpec>>> {
    if grid.lines.len() != families.len() {
        return Err(Error::InvalidContract(format!(
            "{} grids for {} families",
            grid.lines.len(),
            families.len()
        )));
    }
    grid.lines
        .iter()
        .zip(families)
        .map(|(g, f)| g.options(*f))
        .collect()
}

/// All candidate vectors: the Cartesian product of the line options, or
/// the common list when `shared`.
pub fn enumerate_candidates(
    grid: &ParameterGrid,
    families: &[Family],
    shared: bool,
    cap: usize,
) -> Result<Vec<ReinsuranceVector>> {
    let opts = line_options(grid, families)?;
    let n = opts.len();
    if shared {
        if opts.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidContract(
                "shared mode requires the same family and grid on every line".into(),
            ));
        }
        let list = opts.first().cloned().unwrap_or_default();
        if list.len() > cap {
            return Err(Error::CandidateCap {
                count: list.len(),
                cap,
            });
        }
        return Ok(list
            .into_iter()
            .map(|s| ReinsuranceVector::shared(s, n))
            .collect());
    }
    let count = opts
        .iter()
        .try_fold(1usize, |acc, o| acc.checked_mul(o.len()))
        .unwrap_or(usize::MAX);
    if count > cap {
        return Err(Error::CandidateCap { count, cap });
    }
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; n];
    loop {
        out.push(ReinsuranceVector::new(
            idx.iter().zip(&opts).map(|(i, o)| o[*i]).collect(),
        ));
        let mut z = 0;
        loop {
            if z == n {
                return Ok(out);
            }
            idx[z] += 1;
            if idx[z] < opts[z].len() {
                break;
            }
            idx[z] = 0;
            z += 1;
        }
    }
}
