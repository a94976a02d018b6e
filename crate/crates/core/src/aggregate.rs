//! Law of one aggregate retained claim and the premium quantities.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::LatticeDistribution;
use crate::model::{line_claim_weights, SubsetWeights, ThinningModel};
use crate::reinsurance::{pushforward_law, ReinsuranceVector, RetainedLossSpec};

/// Net premiums at or below this level make a candidate infeasible.
pub const PREMIUM_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct AggregateLaw {
    pub dist: LatticeDistribution,
    pub p_claim_zero: f64,
    /// Exact `E(Z)` from the claim laws, not from the buckets.
    pub mean: f64,
    pub beta_total: f64,
}

impl AggregateLaw {
    pub fn lattice_mean(&self) -> f64 {
        self.dist.mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PremiumTriple {
    pub p_gross: f64,
    pub q_r: f64,
    pub p_net: f64,
}

impl PremiumTriple {
    pub fn is_feasible(&self) -> bool {
        self.p_net > PREMIUM_EPS
    }
}

/// `E(Z) = sum_z c_z E R_z(U_z)` with `c_z` the line hit probability.
pub fn retained_mean(model: &ThinningModel, r: &ReinsuranceVector) -> f64 {
    (0..model.lines())
        .map(|z| model.line_hit_probability(z) * r.specs[z].retained_mean(&model.severities[z]))
        .sum()
}

/// Cost of ceding on line `z`: `(1+eta1) beta c_z (E U_z - E R_z(U_z))`.
pub fn ceded_premium(model: &ThinningModel, z: usize, spec: &RetainedLossSpec) -> f64 {
    let law = &model.severities[z];
    let ceded = (law.mean() - spec.retained_mean(law)).max(0.0);
    (1.0 + model.eta1) * model.total_intensity() * model.line_hit_probability(z) * ceded
}

/// Net premium of a contract vector, computed line by line.
pub fn net_premium(model: &ThinningModel, r: &ReinsuranceVector) -> f64 {
    let cost: f64 = (0..model.lines())
        .map(|z| ceded_premium(model, z, &r.specs[z]))
        .sum();
    model.gross_premium() - cost
}

type SpecKey = (u8, u64, u64);

/// Memo tables for pushforwards per line and convolutions per subset.
#[derive(Default)]
pub struct AggregateCache {
    lines: RwLock<HashMap<(usize, SpecKey), Arc<LatticeDistribution>>>,
    subsets: RwLock<HashMap<(usize, Vec<SpecKey>), Arc<LatticeDistribution>>>,
}

impl AggregateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn line_law(
        &self,
        model: &ThinningModel,
        z: usize,
        spec: &RetainedLossSpec,
        h: f64,
        k: usize,
    ) -> Result<Arc<LatticeDistribution>> {
        let key = (z, spec.key());
        if let Some(d) = self.lines.read().expect("cache poisoned").get(&key) {
            if d.k() == k && d.h() == h {
                return Ok(d.clone());
            }
        }
        let d = Arc::new(pushforward_law(spec, &model.severities[z], h, k)?);
        self.lines.write().expect("cache poisoned").insert(key, d.clone());
        Ok(d)
    }

    fn subset_law(
        &self,
        model: &ThinningModel,
        mask: usize,
        r: &ReinsuranceVector,
        h: f64,
        k: usize,
    ) -> Result<Arc<LatticeDistribution>> {
        let members: Vec<usize> = (0..model.lines()).filter(|z| mask & (1 << z) != 0).collect();
        let key = (mask, members.iter().map(|z| r.specs[*z].key()).collect::<Vec<_>>());
        if let Some(d) = self.subsets.read().expect("cache poisoned").get(&key) {
            if d.k() == k && d.h() == h {
                return Ok(d.clone());
            }
        }
        let d = match members.as_slice() {
            [] => Arc::new(LatticeDistribution::point_mass_zero(h, k)),
            [z] => self.line_law(model, *z, &r.specs[*z], h, k)?,
            _ => {
                let last = *members.last().unwrap();
                let rest = self.subset_law(model, mask & !(1 << last), r, h, k)?;
                let line = self.line_law(model, last, &r.specs[last], h, k)?;
                Arc::new(rest.convolve(&line)?)
            }
        };
        self.subsets.write().expect("cache poisoned").insert(key, d.clone());
        Ok(d)
    }
}

/// `G^R = sum_S w_S (conv over z in S of the law of R_z(U_z))`, with the
/// empty pattern contributing an atom at zero.
pub fn build_aggregate(
    model: &ThinningModel,
    r: &ReinsuranceVector,
    h: f64,
    k: usize,
) -> Result<AggregateLaw> {
    let weights = line_claim_weights(model)?;
    build_aggregate_with(model, &weights, r, h, k, &AggregateCache::new())
}

pub fn build_aggregate_with(
    model: &ThinningModel,
    weights: &SubsetWeights,
    r: &ReinsuranceVector,
    h: f64,
    k: usize,
    cache: &AggregateCache,
) -> Result<AggregateLaw> {
    if r.lines() != model.lines() {
        return Err(Error::InvalidContract(format!(
            "{} contracts for {} lines",
            r.lines(),
            model.lines()
        )));
    }
    r.validate()?;
    let mut parts = Vec::new();
    for (mask, w) in weights.iter_nonzero() {
        parts.push((w, cache.subset_law(model, mask, r, h, k)?));
    }
    // Rescale away round-off in the weights before mixing.
    let total: f64 = parts.iter().map(|(w, _)| w).sum();
    let comps: Vec<(f64, &LatticeDistribution)> =
        parts.iter().map(|(w, d)| (w / total, d.as_ref())).collect();
    let dist = LatticeDistribution::mixture(&comps)?;
    Ok(AggregateLaw {
        p_claim_zero: dist.masses()[0],
        mean: retained_mean(model, r),
        beta_total: model.total_intensity(),
        dist,
    })
}

/// Expected-value premiums for insurer and reinsurer.
pub fn premiums(model: &ThinningModel, gross: &AggregateLaw, net_law: &AggregateLaw) -> PremiumTriple {
    let beta = model.total_intensity();
    let p_gross = (1.0 + model.eta) * beta * gross.mean;
    let q_r = (1.0 + model.eta1) * beta * (gross.mean - net_law.mean);
    PremiumTriple {
        p_gross,
        q_r,
        p_net: p_gross - q_r,
    }
}
