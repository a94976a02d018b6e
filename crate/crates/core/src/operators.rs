//! HJB operators on grid functions and the associated consistency checks.
//!
//! For a candidate `R` with net premium `p_R` and aggregate law `g_R`,
//!
//! ```text
//! L_R(u)(x)   = p_R u'(x) - (delta + beta) u(x) + beta sum_j u(x - jh) g_R[j]
//! Lam_R(u)(x) = p_R       - (delta + beta) u(x) + beta sum_j u(x - jh) g_R[j]
//! ```
//!
//! The [`Discretization::Explicit`] variant evaluates the current-point terms
//! at `u(x - h)`, exactly as the marching scheme does, so a solved grid
//! function is a fixed point of it up to round-off.

use serde::Serialize;

use crate::aggregate::{AggregateLaw, PremiumTriple};
use crate::error::{Error, Result};
use crate::model::ThinningModel;
use crate::reinsurance::ReinsuranceVector;
use crate::search::CandidateSpace;

/// Values of a function on `{0, h, ..., K h}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub h: f64,
    pub values: Vec<f64>,
    /// Scheme derivative, when known; otherwise backward differences.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative: Option<Vec<f64>>,
}

impl GridFunction {
    pub fn new(h: f64, values: Vec<f64>) -> Self {
        GridFunction {
            h,
            values,
            derivative: None,
        }
    }

    pub fn with_derivative(h: f64, values: Vec<f64>, derivative: Vec<f64>) -> Self {
        GridFunction {
            h,
            values,
            derivative: Some(derivative),
        }
    }

    pub fn from_fn(h: f64, k: usize, f: impl Fn(f64) -> f64) -> Self {
        GridFunction::new(h, (0..=k).map(|i| f(i as f64 * h)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(u(x) - u(x-h)) / h`, the stored derivative when present; at 0 the
    /// one-sided difference to the right.
    pub fn slope(&self, i: usize) -> f64 {
        if let Some(d) = &self.derivative {
            return d[i];
        }
        let v = &self.values;
        if v.len() < 2 {
            return 0.0;
        }
        if i == 0 {
            (v[1] - v[0]) / self.h
        } else {
            (v[i] - v[i - 1]) / self.h
        }
    }

    /// Linear interpolation, constant slope beyond the last point.
    pub fn interpolate(&self, x: f64) -> f64 {
        let v = &self.values;
        let last = v.len() - 1;
        if x <= 0.0 {
            return v[0];
        }
        let r = x / self.h;
        let i = r.floor() as usize;
        if i >= last {
            let s = if last > 0 { (v[last] - v[last - 1]) / self.h } else { 0.0 };
            return v[last] + s * (x - last as f64 * self.h);
        }
        let t = r - i as f64;
        v[i] * (1.0 - t) + v[i + 1] * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// Current-point terms at `u(x)`.
    Exact,
    /// Current-point terms at `u(x - h)`, matching the marching scheme.
    Explicit,
}

fn check_index(u: &GridFunction, i: usize) -> Result<()> {
    if i >= u.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: u.len(),
        });
    }
    Ok(())
}

fn convolution_at(u: &GridFunction, i: usize, law: &AggregateLaw) -> f64 {
    let g = law.dist.masses();
    (0..=i.min(g.len() - 1)).map(|j| u.values[i - j] * g[j]).sum()
}

/// `L_R(u)` at index `i >= 1` with the backward difference for `u'`.
pub fn l_apply(
    u: &GridFunction,
    i: usize,
    law: &AggregateLaw,
    premium: &PremiumTriple,
    model: &ThinningModel,
) -> Result<f64> {
    check_index(u, i)?;
    if i == 0 {
        return Err(Error::IndexOutOfRange { index: 0, len: u.len() });
    }
    let beta = model.total_intensity();
    let du = (u.values[i] - u.values[i - 1]) / u.h;
    Ok(premium.p_net * du - (model.delta + beta) * u.values[i] + beta * convolution_at(u, i, law))
}

/// `Lam_R(u)` at index `i >= 0`.
pub fn lambda_apply(
    u: &GridFunction,
    i: usize,
    law: &AggregateLaw,
    premium: &PremiumTriple,
    model: &ThinningModel,
) -> Result<f64> {
    check_index(u, i)?;
    let beta = model.total_intensity();
    Ok(premium.p_net - (model.delta + beta) * u.values[i] + beta * convolution_at(u, i, law))
}

/// Suprema of both operators over a candidate space at every grid point.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorProfile {
    pub discretization: Discretization,
    pub sup_l: Vec<f64>,
    pub sup_lambda: Vec<f64>,
    /// Maximizer of `L` per point.
    pub best: Vec<ReinsuranceVector>,
}

/// Evaluate `sup_R L_R(u)` and `sup_R Lam_R(u)` along the whole grid.
pub fn operator_profile(
    u: &GridFunction,
    space: &CandidateSpace,
    disc: Discretization,
) -> Result<OperatorProfile> {
    if (u.h - space.h()).abs() > 1e-12 * u.h {
        return Err(Error::StepMismatch {
            left: u.h,
            right: space.h(),
        });
    }
    let model = space.model();
    let beta = model.total_intensity();
    let lead = model.delta + beta;
    let mut engine = space.engine()?;
    let n = u.len();
    let mut sup_l = Vec::with_capacity(n);
    let mut sup_lambda = Vec::with_capacity(n);
    let mut best = Vec::with_capacity(n);
    for i in 0..n {
        let cur = match disc {
            Discretization::Explicit if i > 0 => u.values[i - 1],
            _ => u.values[i],
        };
        let s = u.slope(i);
        let l = engine.search(cur, &|p, c| -(p * s - lead * cur + beta * c))?;
        let lam = engine.search(cur, &|p, c| -(p - lead * cur + beta * c))?;
        sup_l.push(-l.score);
        sup_lambda.push(-lam.score);
        best.push(l.vector);
        engine.commit(u.values[i], cur)?;
    }
    Ok(OperatorProfile {
        discretization: disc,
        sup_l,
        sup_lambda,
        best,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub discretization: Discretization,
    /// `max(1 - u'(x), sup_R L_R(u)(x))` per point.
    pub residual: Vec<f64>,
    pub sup_l: Vec<f64>,
    pub sup_lambda: Vec<f64>,
    pub best: Vec<ReinsuranceVector>,
    pub max_abs: f64,
    pub argmax: usize,
    /// `5e-3 (delta + beta) max u` unless overridden.
    pub tolerance: f64,
}

impl ResidualReport {
    pub fn passes(&self) -> bool {
        self.max_abs <= self.tolerance
    }

    /// Maximal runs of consecutive grid points whose residual exceeds the
    /// tolerance, as `(first, last)` indices.
    pub fn violations(&self) -> Vec<(usize, usize)> {
        runs(self.residual.iter().map(|r| r.abs() > self.tolerance))
    }
}

pub(crate) fn runs(flags: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut last = 0;
    for (i, f) in flags.enumerate() {
        last = i;
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, last));
    }
    out
}

/// Default residual tolerance, `5e-3 (delta + beta) max u`.
pub fn residual_tolerance(u: &GridFunction, model: &ThinningModel) -> f64 {
    5e-3 * (model.delta + model.total_intensity()) * u.max_value().abs()
}

pub fn hjb_residual(
    u: &GridFunction,
    space: &CandidateSpace,
    disc: Discretization,
) -> Result<ResidualReport> {
    let tol = residual_tolerance(u, space.model());
    hjb_residual_with_tolerance(u, space, disc, tol)
}

pub fn hjb_residual_with_tolerance(
    u: &GridFunction,
    space: &CandidateSpace,
    disc: Discretization,
    tolerance: f64,
) -> Result<ResidualReport> {
    let prof = operator_profile(u, space, disc)?;
    Ok(residual_from_profile(u, prof, tolerance))
}

pub fn residual_from_profile(u: &GridFunction, prof: OperatorProfile, tolerance: f64) -> ResidualReport {
    let residual: Vec<f64> = prof
        .sup_l
        .iter()
        .enumerate()
        .map(|(i, l)| (1.0 - u.slope(i)).max(*l))
        .collect();
    let (argmax, max_abs) = residual
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, r)| if r.abs() > bv { (i, r.abs()) } else { (bi, bv) });
    ResidualReport {
        discretization: prof.discretization,
        residual,
        sup_l: prof.sup_l,
        sup_lambda: prof.sup_lambda,
        best: prof.best,
        max_abs,
        argmax,
        tolerance,
    }
}

/// `V(0) = sup_R p_R / (delta + beta - beta P(R(Z) = 0))`.
pub fn v0_closed_form(space: &CandidateSpace) -> Result<f64> {
    let model = space.model();
    let beta = model.total_intensity();
    let lead = model.delta + beta;
    let mut engine = space.engine()?;
    // With an empty history and unit atom weight the convolution is P(Z = 0).
    let c = engine.search(1.0, &|p, p0| -p / (lead - beta * p0))?;
    Ok(-c.score)
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundViolation {
    pub kind: &'static str,
    pub x: f64,
    pub y: Option<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub lower_intercept: f64,
    pub upper_intercept: f64,
    pub slack: f64,
    pub min_slope: f64,
    pub violations: Vec<BoundViolation>,
}

impl BoundsReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Envelope `x + p/(beta+delta) <= u(x) <= x + p/delta` and the growth
/// condition `u(y) - u(x) >= y - x`, both with slack `2h`.
pub fn check_bounds(u: &GridFunction, model: &ThinningModel) -> BoundsReport {
    let slack = 2.0 * u.h;
    let lo = model.value_lower_intercept();
    let hi = model.value_upper_intercept();
    let mut violations = Vec::new();
    for (i, v) in u.values.iter().enumerate() {
        let x = u.x(i);
        if *v < x + lo - slack {
            violations.push(BoundViolation {
                kind: "lower envelope",
                x,
                y: None,
                margin: v - (x + lo),
            });
        }
        if *v > x + hi + slack {
            violations.push(BoundViolation {
                kind: "upper envelope",
                x,
                y: None,
                margin: x + hi - v,
            });
        }
    }
    // The pairwise condition follows from adjacent increments; a running
    // minimum of u(y) - y catches any pair at once.
    let mut min_slope = f64::INFINITY;
    let mut best_shift = f64::NEG_INFINITY;
    let mut best_at = 0usize;
    for (i, v) in u.values.iter().enumerate() {
        let shifted = v - u.x(i);
        if i > 0 {
            min_slope = min_slope.min((v - u.values[i - 1]) / u.h);
            if shifted < best_shift - slack {
                violations.push(BoundViolation {
                    kind: "growth",
                    x: u.x(best_at),
                    y: Some(u.x(i)),
                    margin: shifted - best_shift,
                });
            }
        }
        if shifted > best_shift {
            best_shift = shifted;
            best_at = i;
        }
    }
    BoundsReport {
        lower_intercept: lo,
        upper_intercept: hi,
        slack,
        min_slope,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{build_aggregate, premiums};
    use crate::model::SeverityLaw;
    use crate::reinsurance::RetainedLossSpec as R;
    use crate::search::SearchConfig;
    use proptest::prelude::*;

    fn model() -> ThinningModel {
        ThinningModel::new(
            vec![2.0, 1.0],
            vec![vec![1.0, 0.3], vec![0.2, 1.0]],
            vec![SeverityLaw::exponential(1.0), SeverityLaw::exponential(2.0)],
            0.5,
            0.8,
            0.1,
        )
    }

    fn laws(m: &ThinningModel, h: f64, k: usize) -> (AggregateLaw, PremiumTriple) {
        let gross = build_aggregate(m, &ReinsuranceVector::identity(2), h, k).unwrap();
        let r = ReinsuranceVector::new(vec![R::Proportional { b: 0.6 }, R::Xl { m: 0.8 }]);
        let net = build_aggregate(m, &r, h, k).unwrap();
        let p = premiums(m, &gross, &net);
        (net, p)
    }

    #[test]
    fn zero_function() {
        let m = model();
        let (g, p) = laws(&m, 0.05, 200);
        let u = GridFunction::new(0.05, vec![0.0; 201]);
        for i in 1..=200 {
            assert_eq!(l_apply(&u, i, &g, &p, &m).unwrap(), 0.0);
            assert_eq!(lambda_apply(&u, i, &g, &p, &m).unwrap(), p.p_net);
        }
        assert!(l_apply(&u, 0, &g, &p, &m).is_err());
        assert!(l_apply(&u, 201, &g, &p, &m).is_err());
    }

    #[test]
    fn constant_function() {
        let m = ThinningModel::single_line(1.5, SeverityLaw::exponential(1.0), 0.5, 0.5, 0.2);
        let g = build_aggregate(&m, &ReinsuranceVector::identity(1), 0.05, 800).unwrap();
        let p = premiums(&m, &g, &g);
        let u = GridFunction::new(0.05, vec![1.0; 801]);
        let mut last = f64::NEG_INFINITY;
        for i in 1..=800 {
            let l = l_apply(&u, i, &g, &p, &m).unwrap();
            let expected = -(0.2 + 1.5) + 1.5 * g.dist.cdf(i as f64 * 0.05);
            assert!((l - expected).abs() < 1e-12);
            assert!(l <= -0.2 + 1e-12);
            assert!(l >= last - 1e-15);
            last = l;
        }
        assert!((last + 0.2).abs() < 1e-6);
    }

    #[test]
    fn stationary_level_makes_lambda_vanish() {
        let m = ThinningModel::single_line(1.0, SeverityLaw::exponential(1.0), 0.5, 0.5, 0.1);
        let k = 4000;
        let g = build_aggregate(&m, &ReinsuranceVector::identity(1), 0.01, k).unwrap();
        let p = premiums(&m, &g, &g);
        let u = GridFunction::new(0.01, vec![p.p_net / m.delta; k + 1]);
        let lam = lambda_apply(&u, k, &g, &p, &m).unwrap();
        assert!(lam.abs() < 1e-10, "{lam}");
    }

    #[test]
    fn operators_coincide_at_unit_slope() {
        let m = model();
        let (g, p) = laws(&m, 0.05, 300);
        let u = GridFunction::from_fn(0.05, 300, |x| x + 3.0);
        for i in 1..=300 {
            let l = l_apply(&u, i, &g, &p, &m).unwrap();
            let lam = lambda_apply(&u, i, &g, &p, &m).unwrap();
            assert!((l - lam).abs() <= 1e-12 * (1.0 + lam.abs()) * 10.0);
        }
    }

    #[test]
    fn pure_payout_has_zero_residual_where_l_negative() {
        let m = model();
        let space = CandidateSpace::shared(&m, vec![R::Identity], 0.05, 200, SearchConfig::default()).unwrap();
        let u = GridFunction::from_fn(0.05, 200, |x| x);
        let r = hjb_residual(&u, &space, Discretization::Exact).unwrap();
        for i in 1..=200 {
            if r.sup_l[i] < 0.0 {
                assert!(r.residual[i].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_v0_identity_only() {
        let m = ThinningModel::single_line(2.0, SeverityLaw::exponential(1.5), 0.4, 0.6, 0.05);
        let space = CandidateSpace::shared(&m, vec![R::Identity], 0.02, 100, SearchConfig::default()).unwrap();
        let v0 = v0_closed_form(&space).unwrap();
        let p = m.gross_premium();
        assert!((v0 - p / (0.05 + 2.0)).abs() < 1e-12);
        assert!((v0 - m.value_lower_intercept()).abs() < 1e-12);
    }

    #[test]
    fn bound_checks() {
        let m = model();
        let hi = m.value_upper_intercept();
        let upper = GridFunction::from_fn(0.05, 200, |x| x + hi);
        assert!(check_bounds(&upper, &m).passes());
        let bare = GridFunction::from_fn(0.05, 200, |x| x);
        let r = check_bounds(&bare, &m);
        assert!(r.violations.iter().any(|v| v.kind == "lower envelope"));
        let dip = GridFunction::from_fn(0.05, 200, |x| hi + x - if x > 5.0 { 1.0 } else { 0.0 });
        assert!(check_bounds(&dip, &m).violations.iter().any(|v| v.kind == "growth"));
    }

    #[test]
    fn violation_runs() {
        assert_eq!(runs([false, true, true, false, true].into_iter()), vec![(1, 2), (4, 4)]);
    }

    proptest! {
        #[test]
        fn operators_are_linear(a in -3.0f64..3.0, c in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let m = model();
            let (g, p) = laws(&m, 0.1, 60);
            let u1 = GridFunction::from_fn(0.1, 60, |x| c[0] + c[1] * x + (c[2] * x).sin());
            let u2 = GridFunction::from_fn(0.1, 60, |x| c[3] * x * x);
            let comb = GridFunction::new(0.1, u1.values.iter().zip(&u2.values).map(|(x, y)| a * x + y).collect());
            let zero = GridFunction::new(0.1, vec![0.0; 61]);
            for i in 1..=60 {
                let l = l_apply(&comb, i, &g, &p, &m).unwrap();
                let l1 = l_apply(&u1, i, &g, &p, &m).unwrap();
                let l2 = l_apply(&u2, i, &g, &p, &m).unwrap();
                prop_assert!((l - (a * l1 + l2)).abs() < 1e-10 * (1.0 + l.abs()));
                // The operator is affine: remove the constant p_net.
                let k0 = lambda_apply(&zero, i, &g, &p, &m).unwrap();
                let lam = lambda_apply(&comb, i, &g, &p, &m).unwrap() - k0;
                let lam1 = lambda_apply(&u1, i, &g, &p, &m).unwrap() - k0;
                let lam2 = lambda_apply(&u2, i, &g, &p, &m).unwrap() - k0;
                prop_assert!((lam - (a * lam1 + lam2)).abs() < 1e-10 * (1.0 + lam.abs()));
            }
        }
    }
}
