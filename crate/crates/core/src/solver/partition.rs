//! Classification of the grid into barrier points, lump bands and
//! continuation, and the resulting stationary policy.

use serde::{Deserialize, Serialize};

use super::{lump_allowance, scheme_scale, GridSolution, SolverConfig};
use crate::error::{Error, Result};
use crate::lattice::bucket_index;
use crate::operators::{operator_profile, Discretization};
use crate::reinsurance::ReinsuranceVector;
use crate::search::CandidateSpace;

/// Where a reserve level sits in the band partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Barrier level: pay the premium surplus as dividends.
    Barrier,
    /// Pay a lump sum down to the band's lower end.
    Lump,
    /// No dividends.
    Continuation,
}

/// Interval `(lower, upper]` paid down to `lower`. `upper` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumpBand {
    pub lower: f64,
    #[serde(with = "crate::reinsurance::limit")]
    pub upper: f64,
}

/// Stationary band strategy extracted from a solved grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPolicy {
    pub h: f64,
    /// Barrier levels, ascending.
    pub levels: Vec<f64>,
    pub lump_bands: Vec<LumpBand>,
    /// Classification of every grid point.
    pub regions: Vec<Region>,
    /// Reinsurance for grid cells `0..=last level`; cell `i` covers
    /// `((i - 1) h, i h]`.
    pub reinsurance: Vec<ReinsuranceVector>,
    /// Digest of the model the policy was solved for, if recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
}

impl BandPolicy {
    fn band_of(&self, x: f64) -> Option<&LumpBand> {
        self.lump_bands.iter().find(|b| x > b.lower && x <= b.upper)
    }

    /// Region containing the reserve level `x`.
    pub fn region(&self, x: f64) -> Region {
        if self.band_of(x).is_some() {
            Region::Lump
        } else if self.levels.iter().any(|a| (x - a).abs() <= 1e-9 * self.h) {
            Region::Barrier
        } else {
            Region::Continuation
        }
    }

    /// Lower end of the lump band containing `x`.
    pub fn lump_target(&self, x: f64) -> Option<f64> {
        self.band_of(x).map(|b| b.lower)
    }

    /// Smallest barrier level at or above `x`.
    pub fn next_level(&self, x: f64) -> Option<f64> {
        self.levels.iter().copied().find(|a| *a >= x - 1e-9 * self.h)
    }

    /// Reinsurance in force at reserve `x`.
    pub fn reinsurance_at(&self, x: f64) -> &ReinsuranceVector {
        let i = bucket_index(x.max(0.0), self.h).min(self.reinsurance.len() - 1);
        &self.reinsurance[i]
    }

    pub fn with_model_hash(mut self, hash: String) -> Self {
        self.model_hash = Some(hash);
        self
    }
}

/// Classify every grid point with the scheme-consistent operators. Points
/// with `|sup Lam(V)| <= tol` are barriers, as are solver barriers whose
/// only slack is the slope crossing one between grid points. Remaining
/// points with `V' = 1` and `sup Lam(V)` below the lump allowance are lump
/// points; the rest is continuation. `tol = config.partition_tol` is
/// relative to `(delta + beta) max V`.
pub fn extract_partition(sol: &GridSolution, space: &CandidateSpace, config: &SolverConfig) -> Result<BandPolicy> {
    let tol = config.partition_tol;
    let owned;
    let profile = match &sol.scheme_profile {
        Some(p) => p,
        None => {
            owned = operator_profile(&sol.v, space, Discretization::Explicit)?;
            &owned
        }
    };
    let n = sol.len();
    let abs_tol = tol * scheme_scale(sol, space);
    let allowance = lump_allowance(sol, space, config);
    let regions: Vec<Region> = (0..n)
        .map(|i| {
            let lam = profile.sup_lambda[i];
            let slope = sol.v.slope(i);
            let solver_barrier = sol.barriers.contains(&i)
                && lam.abs() <= abs_tol + sol.p_net[i] * (slope - 1.0).abs();
            if lam.abs() <= abs_tol || solver_barrier {
                Region::Barrier
            } else if (slope - 1.0).abs() <= tol && lam <= allowance {
                Region::Lump
            } else {
                Region::Continuation
            }
        })
        .collect();

    let barrier_idx: Vec<usize> = (0..n).filter(|i| regions[*i] == Region::Barrier).collect();
    let Some(&last) = barrier_idx.last() else {
        return Err(Error::PartitionStructure("no barrier point: sup Lam(V) never vanishes".into()));
    };
    if last + 1 >= n || regions[last + 1..].iter().any(|r| *r != Region::Lump) {
        let bad = (last + 1..n).find(|i| regions[*i] != Region::Lump).unwrap_or(last);
        return Err(Error::PartitionStructure(format!(
            "grid beyond the last barrier x = {} is not a lump region (x = {})",
            last as f64 * sol.h,
            bad as f64 * sol.h
        )));
    }
    let mut lump_bands = Vec::new();
    let mut i = 0;
    while i < n {
        if regions[i] != Region::Lump {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && regions[i] == Region::Lump {
            i += 1;
        }
        if start == 0 || regions[start - 1] != Region::Barrier {
            return Err(Error::PartitionStructure(format!(
                "lump band starting at x = {} does not sit on a barrier",
                start as f64 * sol.h
            )));
        }
        let upper = if i == n { f64::INFINITY } else { (i - 1) as f64 * sol.h };
        lump_bands.push(LumpBand {
            lower: (start - 1) as f64 * sol.h,
            upper,
        });
    }
    Ok(BandPolicy {
        h: sol.h,
        levels: barrier_idx.iter().map(|i| *i as f64 * sol.h).collect(),
        lump_bands,
        regions,
        reinsurance: sol.argmin_candidate[..=last].to_vec(),
        model_hash: None,
    })
}
