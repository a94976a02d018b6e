//! Grid value of a fixed band policy.
//!
//! The same recursion as the solver, but with the contract at every grid
//! point dictated by the policy instead of optimized: march from `f(0) = 1`
//! to the first level and normalize by `f'` there, then follow the lump
//! bands with slope one and re-march continuation stretches from the value
//! at their lower end.

use super::{BandPolicy, GridSolution};
use crate::error::{Error, Result};
use crate::lattice::bucket_index;
use crate::model::ThinningModel;
use crate::operators::GridFunction;
use crate::reinsurance::ReinsuranceVector;
use crate::search::{CandidateSpace, SearchConfig};

/// Value of `policy` on the grid `0, h, ..., (len - 1) h`, as a solution
/// whose barriers and bands are those of the policy.
pub fn policy_value(model: &ThinningModel, policy: &BandPolicy, len: usize) -> Result<GridSolution> {
    let h = policy.h;
    let Some(&first_level) = policy.levels.first() else {
        return Err(Error::PolicyMismatch("policy has no barrier".into()));
    };
    let first = bucket_index(first_level, h);
    let last = bucket_index(*policy.levels.last().unwrap(), h);
    if len <= last + 1 {
        return Err(Error::InvalidArgument(format!("grid of {len} points ends below the last barrier")));
    }
    let mut distinct: Vec<ReinsuranceVector> = Vec::new();
    let mut slot = Vec::with_capacity(policy.reinsurance.len());
    for r in &policy.reinsurance {
        let j = match distinct.iter().position(|d| d == r) {
            Some(j) => j,
            None => {
                distinct.push(r.clone());
                distinct.len() - 1
            }
        };
        slot.push(j);
    }
    let space = CandidateSpace::listed(model, distinct, h, len, SearchConfig::default())?;
    let beta = model.total_intensity();
    let lead = model.delta + beta;
    let cell = |i: usize| slot[i.min(slot.len() - 1)];

    let mut engine = space.engine()?;
    let mut f = Vec::with_capacity(first + 1);
    let mut fp = Vec::with_capacity(first + 1);
    let mut p_net = Vec::with_capacity(len);
    for i in 0..=first {
        let cur = if i == 0 { 1.0 } else { f[i - 1] };
        let (p, c) = engine.evaluate(cell(i), cur)?;
        let d = (lead * cur - beta * c) / p;
        f.push(if i == 0 { 1.0 } else { cur + h * d });
        fp.push(d);
        p_net.push(p);
        engine.commit(f[i], cur)?;
    }
    let scale = fp[first];
    let mut v: Vec<f64> = f.iter().map(|x| x / scale).collect();
    let mut dv: Vec<f64> = fp.iter().map(|x| x / scale).collect();

    let mut engine = space.engine()?;
    for x in &v {
        engine.commit(*x, *x)?;
    }
    for i in first + 1..len {
        let x = i as f64 * h;
        if let Some(lower) = policy.lump_target(x) {
            let lo = bucket_index(lower, h);
            let value = v[lo] + (i - lo) as f64 * h;
            v.push(value);
            dv.push(1.0);
            p_net.push(p_net[lo.min(p_net.len() - 1)]);
            engine.commit(value, value)?;
        } else {
            let cur = v[i - 1];
            let (p, c) = engine.evaluate(cell(i), cur)?;
            let d = (lead * cur - beta * c) / p;
            v.push(cur + h * d);
            dv.push(d);
            p_net.push(p);
            engine.commit(cur + h * d, cur)?;
        }
    }
    let mut lump_bands = Vec::new();
    for b in &policy.lump_bands {
        if b.upper.is_finite() {
            lump_bands.push((bucket_index(b.lower, h), bucket_index(b.upper, h)));
        }
    }
    let argmin_candidate = (0..len).map(|i| policy.reinsurance[i.min(last)].clone()).collect();
    let mut full_fp = fp;
    full_fp.extend(dv[first + 1..].iter().map(|d| d * scale));
    Ok(GridSolution {
        h,
        f: GridFunction::new(h, v.iter().map(|x| x * scale).collect()),
        fprime: GridFunction::new(h, full_fp),
        v: GridFunction::with_derivative(h, v, dv),
        argmin_candidate,
        p_net,
        barriers: policy.levels.iter().map(|a| bucket_index(*a, h)).collect(),
        lump_bands,
        bands: Some(policy.clone()),
        residual_report: None,
        scheme_profile: None,
        verified: false,
        notes: Vec::new(),
    })
}
