//! Monte Carlo evaluation of a band policy.
//!
//! Events are simulated class by class: an event of class `i` hits each line
//! independently with its thinning probability, and every hit draws a fresh
//! claim from the line's severity law. None of the lattice or aggregate
//! machinery is used, so agreement with the grid value is an independent
//! check of the whole pipeline.
//!
//! Between events the surplus drifts at the net premium of the grid cell
//! it occupies. The premium is constant on each cell, so the time needed to
//! climb from one level to another is a sum of `h / p_i` terms, and the
//! drift is inverted exactly from a table of cumulative travel times.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::aggregate::net_premium;
use crate::error::{Error, Result};
use crate::lattice::bucket_index;
use crate::model::{SeverityLaw, ThinningModel};
use crate::solver::BandPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub paths: usize,
    /// Nominal drift step. The travel-time inversion is exact, so this
    /// only has to be positive.
    pub dt: f64,
    /// Horizon; `None` means `40 / delta`.
    pub t_max: Option<f64>,
    pub seed: u64,
    pub x0: f64,
    /// Worker threads, `0` for all available cores. Results do not depend
    /// on it.
    pub threads: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            paths: 100_000,
            dt: 0.01,
            t_max: None,
            seed: 1,
            x0: 0.0,
            threads: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::InvalidSimulation("paths must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidSimulation(format!("dt must be positive, got {}", self.dt)));
        }
        if let Some(t) = self.t_max {
            if !(t > 0.0) {
                return Err(Error::InvalidSimulation(format!("t_max must be positive, got {t}")));
            }
        }
        if !(self.x0 >= 0.0 && self.x0.is_finite()) {
            return Err(Error::InvalidSimulation(format!("x0 must be finite and nonnegative, got {}", self.x0)));
        }
        Ok(())
    }

    pub fn horizon(&self, model: &ThinningModel) -> f64 {
        self.t_max.unwrap_or(40.0 / model.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub x0: f64,
    pub paths: usize,
    pub seed: u64,
    pub mean_discounted_dividends: f64,
    /// Zero when undefined (a single path); see `std_error_defined`.
    pub std_error: f64,
    pub std_error_defined: bool,
    pub ruin_fraction: f64,
    /// `None` when no path was ruined.
    pub mean_ruin_time_given_ruin: Option<f64>,
    /// `exp(-delta t_max) (max(x0, a_last) + p / delta)`.
    pub horizon_truncation_bound: f64,
}

/// Outcome of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    pub dividends: f64,
    pub ruin_time: Option<f64>,
}

enum Sampler {
    Exp(Exp<f64>),
    Lattice { step: f64, cumulative: Vec<f64> },
}

impl Sampler {
    fn new(law: &SeverityLaw) -> Result<Self> {
        law.validate().map_err(Error::InvalidSeverity)?;
        Ok(match law {
            SeverityLaw::Exponential { rate } => Sampler::Exp(Exp::new(*rate).map_err(|e| Error::InvalidSeverity(e.to_string()))?),
            SeverityLaw::EmpiricalLattice { step, masses } => {
                let mut acc = 0.0;
                let cumulative = masses
                    .iter()
                    .map(|m| {
                        acc += m;
                        acc
                    })
                    .collect();
                Sampler::Lattice { step: *step, cumulative }
            }
        })
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Sampler::Exp(d) => d.sample(rng),
            Sampler::Lattice { step, cumulative } => {
                let u = rng.random::<f64>() * cumulative.last().unwrap();
                let k = cumulative.partition_point(|c| *c <= u).min(cumulative.len() - 1);
                k as f64 * step
            }
        }
    }
}

/// Policy compiled against a model: premiums per cell and travel times.
struct Controlled<'a> {
    model: &'a ThinningModel,
    policy: &'a BandPolicy,
    h: f64,
    /// Net premium of every cell `0..=last`.
    rate: Vec<f64>,
    /// `time[i]`: time to climb from 0 to `i h`.
    time: Vec<f64>,
    samplers: Vec<Sampler>,
    classes: WeightedIndex<f64>,
    inter_arrival: Exp<f64>,
}

impl<'a> Controlled<'a> {
    fn new(model: &'a ThinningModel, policy: &'a BandPolicy) -> Result<Self> {
        model.validate().into_result()?;
        if policy.levels.is_empty() || policy.reinsurance.is_empty() {
            return Err(Error::PolicyMismatch("policy has no barrier".into()));
        }
        if let Some(v) = policy.reinsurance.iter().find(|v| v.lines() != model.lines()) {
            return Err(Error::PolicyMismatch(format!(
                "policy contracts cover {} lines, model has {}",
                v.lines(),
                model.lines()
            )));
        }
        let h = policy.h;
        let last = *policy.levels.last().unwrap();
        if bucket_index(last, h) + 1 != policy.reinsurance.len() {
            return Err(Error::PolicyMismatch(format!(
                "{} reinsurance cells for a last barrier at {last} with step {h}",
                policy.reinsurance.len()
            )));
        }
        let rate: Vec<f64> = policy.reinsurance.iter().map(|r| net_premium(model, r)).collect();
        if let Some(i) = rate.iter().position(|p| *p <= 0.0) {
            return Err(Error::PolicyMismatch(format!("nonpositive net premium in cell {i}")));
        }
        let mut time = Vec::with_capacity(rate.len());
        time.push(0.0);
        for p in &rate[1..] {
            time.push(time.last().unwrap() + h / p);
        }
        let samplers = model.severities.iter().map(Sampler::new).collect::<Result<_>>()?;
        let classes = WeightedIndex::new(&model.beta).map_err(|e| Error::InvalidModel(e.to_string()))?;
        let inter_arrival = Exp::new(model.total_intensity()).map_err(|e| Error::InvalidModel(e.to_string()))?;
        Ok(Controlled {
            model,
            policy,
            h,
            rate,
            time,
            samplers,
            classes,
            inter_arrival,
        })
    }

    fn cell(&self, x: f64) -> usize {
        bucket_index(x, self.h).min(self.rate.len() - 1)
    }

    /// Travel time from 0 up to `x`.
    fn clock(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let i = self.cell(x);
        self.time[i - 1] + (x - (i - 1) as f64 * self.h) / self.rate[i]
    }

    /// Level reached from 0 after climbing for `tau`.
    fn position(&self, tau: f64) -> f64 {
        let i = self.time.partition_point(|t| *t < tau).clamp(1, self.time.len() - 1);
        (i - 1) as f64 * self.h + (tau - self.time[i - 1]) * self.rate[i]
    }

    fn at_barrier(&self, x: f64) -> bool {
        self.policy.levels.iter().any(|a| (x - a).abs() <= 1e-9 * self.h)
    }

    fn path(&self, x0: f64, t_max: f64, rng: &mut impl Rng) -> PathOutcome {
        let delta = self.model.delta;
        let mut x = x0;
        let mut t = 0.0;
        let mut paid = 0.0;
        if let Some(lower) = self.policy.lump_target(x) {
            paid += x - lower;
            x = lower;
        }
        loop {
            let next = t + self.inter_arrival.sample(rng);
            let end = next.min(t_max);
            if self.at_barrier(x) {
                let p = self.rate[self.cell(x)];
                paid += p * ((-delta * t).exp() - (-delta * end).exp()) / delta;
            } else {
                let target = self.policy.next_level(x).expect("a lump band covers everything above the last level");
                let start = self.clock(x);
                let reach = t + self.clock(target) - start;
                if reach <= end {
                    let p = self.rate[self.cell(target)];
                    paid += p * ((-delta * reach).exp() - (-delta * end).exp()) / delta;
                    x = target;
                } else {
                    x = self.position(start + end - t).min(target);
                }
            }
            if next >= t_max {
                return PathOutcome {
                    dividends: paid,
                    ruin_time: None,
                };
            }
            t = next;
            // Contracts of the cell holding the pre-claim surplus.
            let contracts = &self.policy.reinsurance[self.cell(x)];
            let class = self.classes.sample(rng);
            let mut claim = 0.0;
            for (z, hit) in self.model.thinning[class].iter().enumerate() {
                if *hit > 0.0 && rng.random::<f64>() < *hit {
                    claim += contracts.specs[z].apply(self.samplers[z].draw(rng));
                }
            }
            x -= claim;
            if x < 0.0 {
                return PathOutcome {
                    dividends: paid,
                    ruin_time: Some(t),
                };
            }
            if let Some(lower) = self.policy.lump_target(x) {
                paid += (-delta * t).exp() * (x - lower);
                x = lower;
            }
        }
    }
}

fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// One path under `policy` starting from `cfg.x0`.
pub fn simulate_path(
    model: &ThinningModel,
    policy: &BandPolicy,
    cfg: &SimulationConfig,
    rng: &mut impl Rng,
) -> Result<PathOutcome> {
    cfg.validate()?;
    let sys = Controlled::new(model, policy)?;
    Ok(sys.path(cfg.x0, cfg.horizon(model), rng))
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn thread_count(requested: usize, paths: usize) -> usize {
    let n = if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    };
    n.clamp(1, paths.max(1))
}

/// Estimate the value of `policy` at every starting level in `x0_list`.
/// Path `k` always uses stream `k` of `cfg.seed`, so results are identical
/// for every thread count and the starting levels share random numbers.
pub fn estimate_value(
    model: &ThinningModel,
    policy: &BandPolicy,
    cfg: &SimulationConfig,
    x0_list: &[f64],
) -> Result<Vec<SimulationResult>> {
    cfg.validate()?;
    let sys = Controlled::new(model, policy)?;
    let t_max = cfg.horizon(model);
    let threads = thread_count(cfg.threads, cfg.paths);
    let last = *policy.levels.last().unwrap();
    let mut out = Vec::with_capacity(x0_list.len());
    for &x0 in x0_list {
        SimulationConfig { x0, ..cfg.clone() }.validate()?;
        let mut outcomes = vec![
            PathOutcome {
                dividends: 0.0,
                ruin_time: None,
            };
            cfg.paths
        ];
        let chunk = cfg.paths.div_ceil(threads);
        std::thread::scope(|s| {
            for (c, slot) in outcomes.chunks_mut(chunk).enumerate() {
                let sys = &sys;
                s.spawn(move || {
                    for (j, o) in slot.iter_mut().enumerate() {
                        let mut rng = path_rng(cfg.seed, (c * chunk + j) as u64);
                        *o = sys.path(x0, t_max, &mut rng);
                    }
                });
            }
        });
        let n = cfg.paths as f64;
        let values: Vec<f64> = outcomes.iter().map(|o| o.dividends).collect();
        let mean = pairwise_sum(&values) / n;
        let squares: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let (std_error, std_error_defined) = if cfg.paths > 1 {
            ((pairwise_sum(&squares) / (n - 1.0) / n).sqrt(), true)
        } else {
            (0.0, false)
        };
        let ruin: Vec<f64> = outcomes.iter().filter_map(|o| o.ruin_time).collect();
        out.push(SimulationResult {
            x0,
            paths: cfg.paths,
            seed: cfg.seed,
            mean_discounted_dividends: mean,
            std_error,
            std_error_defined,
            ruin_fraction: ruin.len() as f64 / n,
            mean_ruin_time_given_ruin: (!ruin.is_empty()).then(|| pairwise_sum(&ruin) / ruin.len() as f64),
            horizon_truncation_bound: (-model.delta * t_max).exp()
                * (x0.max(last) + model.value_upper_intercept()),
        });
    }
    Ok(out)
}
