//! Additional bands above the last barrier.
//!
//! When the one-band value function violates `sup L(V) <= 0` above its barrier
//! `a`, a new continuation region is opened: for each `b > a` the scheme is
//! re-marched from `f2(b) = V(b)` with `V` as convolution history below `b`,
//! and the next barrier sits where `f2(j) - j` peaks. Continuity at `b` fixes
//! the scale of `f2`, so no further normalization is applied.
//!
//! On the grid the peak `j*` satisfies `f2'(j*) >= 1 > f2'(j* + 1)`. The
//! barrier is placed one step below the peak so that continuing with slope
//! one from `j* - 1` keeps `L(V)(j*) = p (1 - f2'(j*)) <= 0`.

use super::{first_violation, lump_allowance, GridSolution, SolverConfig};
use crate::error::Result;
use crate::operators::{operator_profile, Discretization, GridFunction};
use crate::reinsurance::ReinsuranceVector;
use crate::search::CandidateSpace;

struct Candidate {
    b: usize,
    a2: usize,
    score: f64,
    f2: Vec<f64>,
    fp2: Vec<f64>,
    choices: Vec<ReinsuranceVector>,
    p_net: Vec<f64>,
}

/// Add bands until `sup L(V) <= 0` holds above the last barrier in the
/// scheme's own discretization, or the cap of `config.band_cap` barriers is
/// reached.
pub fn extend_bands(mut sol: GridSolution, space: &CandidateSpace, config: &SolverConfig) -> Result<GridSolution> {
    let h = sol.h;
    let n = sol.len();
    loop {
        let profile = operator_profile(&sol.v, space, Discretization::Explicit)?;
        let tol = lump_allowance(&sol, space, config);
        let Some(viol) = first_violation(&sol, &profile, tol) else {
            sol.scheme_profile = Some(profile);
            return Ok(sol);
        };
        if sol.barriers.len() >= config.band_cap {
            sol.notes.push(format!(
                "band cap {} reached; scheme violated at x = {}",
                config.band_cap,
                viol as f64 * h
            ));
            sol.scheme_profile = Some(profile);
            return Ok(sol);
        }
        let last = sol.last_barrier();
        let mut engine = space.engine()?;
        for i in 0..=viol {
            engine.commit(sol.v.values[i], sol.v.values[i])?;
        }
        let mut best: Option<Candidate> = None;
        // Descending starts keep the history below each start intact.
        for b in (last + 1..=viol).rev() {
            engine.truncate(b + 1);
            let mut f2 = Vec::new();
            let mut fp2 = Vec::new();
            let mut choices = Vec::new();
            let mut p_net = Vec::new();
            let mut prev = sol.v.values[b];
            // First local peak of f2(j) - j h: slope at least one at j, below
            // one at j + 1.
            let mut peak: Option<usize> = None;
            for j in b + 1..n {
                let c = super::derivative_step(&mut engine, space, prev)?;
                let fj = prev + h * c.score;
                engine.commit(fj, prev)?;
                let above = fp2.last().is_some_and(|s: &f64| *s >= 1.0);
                if above && c.score < 1.0 {
                    peak = Some(j - 1);
                    break;
                }
                f2.push(fj);
                fp2.push(c.score);
                choices.push(c.vector);
                p_net.push(c.p_net);
                prev = fj;
            }
            let Some(peak) = peak else { continue };
            let score = f2[peak - b - 1] - peak as f64 * h;
            let a2 = if peak > b + 1 { peak - 1 } else { peak };
            if best.as_ref().is_none_or(|c| score > c.score) {
                best = Some(Candidate {
                    b,
                    a2,
                    score,
                    f2,
                    fp2,
                    choices,
                    p_net,
                });
            }
        }
        let Some(c) = best else {
            sol.notes.push(format!(
                "no admissible second band below the grid end; scheme violated at x = {}",
                viol as f64 * h
            ));
            sol.scheme_profile = Some(profile);
            return Ok(sol);
        };
        splice(&mut sol, c);
    }
}

fn splice(sol: &mut GridSolution, c: Candidate) {
    let h = sol.h;
    let n = sol.len();
    let mut v = sol.v.values.clone();
    let mut dv: Vec<f64> = (0..n).map(|i| sol.v.slope(i)).collect();
    for j in c.b + 1..=c.a2 {
        let k = j - c.b - 1;
        v[j] = c.f2[k];
        dv[j] = c.fp2[k];
        sol.argmin_candidate[j] = c.choices[k].clone();
        sol.p_net[j] = c.p_net[k];
    }
    for j in c.a2 + 1..n {
        v[j] = v[c.a2] + (j - c.a2) as f64 * h;
        dv[j] = 1.0;
    }
    let last = sol.last_barrier();
    sol.lump_bands.push((last, c.b));
    sol.barriers.push(c.a2);
    sol.v = GridFunction::with_derivative(h, v, dv);
}
