//! Aggregate retained-claim law against an event-level simulation that
//! never touches the lattice code.

use divband::aggregate::build_aggregate;
use divband::model::{SeverityLaw, ThinningModel};
use divband::reinsurance::{ReinsuranceVector, RetainedLossSpec as R};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Draw the retained claim total of a single event, given that the event
/// hits at least one line.
fn event_total(rng: &mut ChaCha8Rng, beta: &[f64], p: &[Vec<f64>], rates: &[f64], r: &[R]) -> f64 {
    let total: f64 = beta.iter().sum();
    loop {
        let mut u = rng.random::<f64>() * total;
        let mut class = 0;
        while u >= beta[class] && class + 1 < beta.len() {
            u -= beta[class];
            class += 1;
        }
        let mut claim = 0.0;
        let mut any = false;
        for z in 0..rates.len() {
            if rng.random::<f64>() < p[class][z] {
                any = true;
                claim += r[z].apply(exp_draw(rng, rates[z]));
            }
        }
        if any {
            return claim;
        }
    }
}

fn sup_cdf_gap(model: &ThinningModel, rates: &[f64], r: &[R], h: f64, k: usize, events: usize, seed: u64) -> f64 {
    let g = build_aggregate(model, &ReinsuranceVector::new(r.to_vec()), h, k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = (0..events)
        .map(|_| event_total(&mut rng, &model.beta, &model.thinning, rates, r))
        .collect();
    draws.sort_by(f64::total_cmp);
    // The lattice cell ((j-1)h, jh] sits at jh, so compare at grid points.
    let mut sup: f64 = 0.0;
    for j in 0..=k {
        let x = j as f64 * h;
        let emp = draws.partition_point(|d| *d <= x) as f64 / events as f64;
        sup = sup.max((emp - g.dist.cdf(x)).abs());
    }
    sup
}

#[test]
fn common_shock_identity_matches_event_simulation() {
    let rates = [1.0, 0.6];
    let m = ThinningModel::new(
        vec![2.0, 3.0, 1.5],
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        rates.iter().map(|r| SeverityLaw::exponential(*r)).collect(),
        0.5,
        0.7,
        0.1,
    );
    let gap = sup_cdf_gap(&m, &rates, &[R::Identity, R::Identity], 0.01, 4000, 1_000_000, 11);
    assert!(gap <= 0.01, "sup gap {gap}");
}

#[test]
fn thinned_three_lines_with_mixed_contracts() {
    let rates = [0.5, 3.0, 2.0];
    let m = ThinningModel::new(
        vec![8.0, 4.0, 5.0],
        vec![vec![1.0, 0.06, 0.05], vec![0.03, 1.0, 0.01], vec![0.007, 0.005, 1.0]],
        rates.iter().map(|r| SeverityLaw::exponential(*r)).collect(),
        3.0,
        3.5,
        0.3,
    );
    let r = [R::Xl { m: 2.5 }, R::Proportional { b: 0.5 }, R::Lxl { m: 0.4, l: 0.6 }];
    let gap = sup_cdf_gap(&m, &rates, &r, 0.01, 4000, 400_000, 12);
    assert!(gap <= 0.01, "sup gap {gap}");
}
