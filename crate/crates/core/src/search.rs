//! Inner optimization over reinsurance candidates.
//!
//! At grid index `i` every candidate `R` is scored through two numbers: its
//! net premium and the convolution `sum_j g_R[j] u(i - j)` of its aggregate
//! claim law with the history of a grid function `u`. The current value
//! `u(i)` enters only through the atom `g_R[0]`; callers pass the value to
//! use for it (`u(i-1)` in the explicit scheme, `u(i)` for exact residuals).
//!
//! Two back-ends compute the convolutions:
//!
//! * a list of precomputed aggregate laws, dotted with the history (shared
//!   contracts and explicit candidate lists);
//! * for independent per-line contracts, a table of partial histories
//!   `H_{S,r}(j) = (u * g_{S,r})(j)` for every proper line subset `S` that
//!   occurs in the subset expansion of `G^R`. Each candidate then costs one
//!   dot product per maximal subset instead of a full aggregate law.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregate::{
    build_aggregate_with, ceded_premium, AggregateCache, PREMIUM_EPS,
};
use crate::error::{Error, Result};
use crate::lattice::LatticeDistribution;
use crate::model::{line_claim_weights, SubsetWeights, ThinningModel};
use crate::reinsurance::{ReinsuranceVector, RetainedLossSpec, DEFAULT_CANDIDATE_CAP};

/// Trailing lattice mass below this level is dropped from dot products.
const TRIM_MASS: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Local refinement around the incumbent (spacing halved twice).
    pub refine: bool,
    /// Largest Cartesian product searched exhaustively.
    pub candidate_cap: usize,
    /// Coordinate-descent sweeps beyond the cap.
    pub cd_sweeps: usize,
    /// Upper bound on the number of cached history values.
    pub history_budget: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            refine: false,
            candidate_cap: DEFAULT_CANDIDATE_CAP,
            cd_sweeps: 3,
            history_budget: 60_000_000,
        }
    }
}

/// A lattice law stored reversed and trimmed, ready for history dots.
#[derive(Debug, Clone)]
struct Kernel {
    rev: Vec<f64>,
    g0: f64,
}

impl Kernel {
    fn new(d: &LatticeDistribution) -> Self {
        let m = d.masses();
        let mut end = m.len();
        let mut dropped = 0.0;
        while end > 1 && dropped + m[end - 1] <= TRIM_MASS {
            dropped += m[end - 1];
            end -= 1;
        }
        let rev: Vec<f64> = m[..end].iter().rev().copied().collect();
        Kernel { rev, g0: m[0] }
    }

    fn support(&self) -> usize {
        self.rev.len() - 1
    }

    /// `sum_{k=1}^{min(i, s)} g[k] hist[i - k]` with `i = hist.len()`.
    fn dot_history(&self, hist: &[f64]) -> f64 {
        let i = hist.len();
        let s = self.support();
        let m = i.min(s);
        dot(&hist[i - m..], &self.rev[s - m..s])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for t in 0..8 {
            acc[t] += x[t] * y[t];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone)]
struct LineOption {
    spec: RetainedLossSpec,
    kernel: Kernel,
    ceded: f64,
}

/// A candidate with a fully built aggregate law.
#[derive(Debug, Clone)]
pub struct ListedCandidate {
    pub vector: ReinsuranceVector,
    pub p_net: f64,
    pub p_claim_zero: f64,
    kernel: Kernel,
}

/// Parameter axes of one line, used to place refinement points.
#[derive(Debug, Clone, Default)]
struct Axes {
    b: Vec<f64>,
    m: Vec<f64>,
    l: Vec<f64>,
}

impl Axes {
    fn from_specs(specs: &[RetainedLossSpec]) -> Self {
        let mut a = Axes::default();
        for s in specs {
            match *s {
                RetainedLossSpec::Proportional { b } => a.b.push(b),
                RetainedLossSpec::Xl { m } if m.is_finite() => a.m.push(m),
                RetainedLossSpec::Lxl { m, l } => {
                    if m.is_finite() {
                        a.m.push(m);
                    }
                    if l.is_finite() {
                        a.l.push(l);
                    }
                }
                _ => {}
            }
        }
        for v in [&mut a.b, &mut a.m, &mut a.l] {
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v.dedup();
        }
        a
    }

    /// Local spacing and bounds of `v` on an axis.
    fn spacing(axis: &[f64], v: f64) -> Option<(f64, f64, f64)> {
        let pos = axis.iter().position(|x| *x == v)?;
        let left = pos.checked_sub(1).map(|p| v - axis[p]);
        let right = axis.get(pos + 1).map(|x| x - v);
        let d = match (left, right) {
            (Some(l), Some(r)) => l.min(r),
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => return None,
        };
        Some((d, axis[0], *axis.last().unwrap()))
    }

    /// Refinement moves: each returns specs at `center +- frac * spacing`.
    fn neighbours(&self, anchor: &RetainedLossSpec, center: &RetainedLossSpec, frac: f64) -> Vec<RetainedLossSpec> {
        let mut out = Vec::new();
        let around = |axis: &[f64], a: f64, c: f64| -> Vec<f64> {
            match Self::spacing(axis, a) {
                Some((d, lo, hi)) => [c - frac * d, c + frac * d]
                    .into_iter()
                    .filter(|x| *x >= lo && *x <= hi)
                    .collect(),
                None => vec![],
            }
        };
        match (*anchor, *center) {
            (RetainedLossSpec::Proportional { b: a }, RetainedLossSpec::Proportional { b: c }) => {
                for b in around(&self.b, a, c) {
                    out.push(RetainedLossSpec::Proportional { b: b.clamp(0.0, 1.0) });
                }
            }
            (RetainedLossSpec::Xl { m: a }, RetainedLossSpec::Xl { m: c }) => {
                for m in around(&self.m, a, c) {
                    out.push(RetainedLossSpec::Xl { m });
                }
            }
            (RetainedLossSpec::Lxl { m: am, l: al }, RetainedLossSpec::Lxl { m: cm, l: cl }) => {
                for m in around(&self.m, am, cm) {
                    out.push(RetainedLossSpec::Lxl { m, l: cl });
                }
                for l in around(&self.l, al, cl) {
                    out.push(RetainedLossSpec::Lxl { m: cm, l });
                }
            }
            _ => {}
        }
        out
    }
}

enum Layout {
    /// Full aggregate laws per candidate.
    Listed {
        candidates: Vec<ListedCandidate>,
        /// Axes of the common contract when the list is a shared family.
        shared_axes: Option<Axes>,
    },
    /// Independent contracts per line.
    PerLine {
        options: Vec<Vec<LineOption>>,
        axes: Vec<Axes>,
        /// All lines offer the same specs, so diagonal vectors exist.
        identical: bool,
        identity: Vec<usize>,
    },
}

/// Candidate set together with everything needed to score it.
pub struct CandidateSpace {
    model: ThinningModel,
    weights: SubsetWeights,
    h: f64,
    k: usize,
    config: SearchConfig,
    cache: AggregateCache,
    layout: Layout,
}

impl std::fmt::Debug for CandidateSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CandidateSpace")
            .field("h", &self.h)
            .field("k", &self.k)
            .field("size", &self.size())
            .finish()
    }
}

fn snap_all(specs: &[RetainedLossSpec], h: f64) -> Vec<RetainedLossSpec> {
    let mut out: Vec<RetainedLossSpec> = Vec::with_capacity(specs.len());
    for s in specs {
        let s = s.snapped(h);
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

impl CandidateSpace {
    /// Independent contracts: one option list per line.
    pub fn per_line(
        model: &ThinningModel,
        options: Vec<Vec<RetainedLossSpec>>,
        h: f64,
        k: usize,
        config: SearchConfig,
    ) -> Result<Self> {
        model.validate().into_result()?;
        if options.len() != model.lines() {
            return Err(Error::InvalidContract(format!(
                "{} option lists for {} lines",
                options.len(),
                model.lines()
            )));
        }
        let weights = line_claim_weights(model)?;
        let cache = AggregateCache::new();
        let mut lines = Vec::with_capacity(options.len());
        let mut axes = Vec::new();
        let mut identity = Vec::new();
        let mut snapped_lists = Vec::new();
        for (z, specs) in options.iter().enumerate() {
            let mut specs = snap_all(specs, h);
            if !specs.iter().any(|s| s.is_identity()) {
                specs.push(RetainedLossSpec::Identity);
            }
            let mut opts = Vec::with_capacity(specs.len());
            for s in &specs {
                s.validate()?;
                let law = cache.line_law(model, z, s, h, k)?;
                opts.push(LineOption {
                    spec: *s,
                    kernel: Kernel::new(&law),
                    ceded: ceded_premium(model, z, s),
                });
            }
            identity.push(specs.iter().position(|s| s.is_identity()).unwrap());
            axes.push(Axes::from_specs(&specs));
            snapped_lists.push(specs);
            lines.push(opts);
        }
        let identical = snapped_lists.windows(2).all(|w| w[0] == w[1]);
        Ok(CandidateSpace {
            model: model.clone(),
            weights,
            h,
            k,
            config,
            cache,
            layout: Layout::PerLine {
                options: lines,
                axes,
                identical,
                identity,
            },
        })
    }

    /// One common contract on every line, drawn from `specs`.
    pub fn shared(
        model: &ThinningModel,
        specs: Vec<RetainedLossSpec>,
        h: f64,
        k: usize,
        config: SearchConfig,
    ) -> Result<Self> {
        let mut specs = snap_all(&specs, h);
        if !specs.iter().any(|s| s.is_identity()) {
            specs.push(RetainedLossSpec::Identity);
        }
        let axes = Axes::from_specs(&specs);
        let vectors = specs
            .iter()
            .map(|s| ReinsuranceVector::shared(*s, model.lines()))
            .collect();
        let mut space = Self::listed(model, vectors, h, k, config)?;
        if let Layout::Listed { shared_axes, .. } = &mut space.layout {
            *shared_axes = Some(axes);
        }
        Ok(space)
    }

    /// An explicit list of contract vectors, searched exhaustively.
    pub fn listed(
        model: &ThinningModel,
        vectors: Vec<ReinsuranceVector>,
        h: f64,
        k: usize,
        config: SearchConfig,
    ) -> Result<Self> {
        model.validate().into_result()?;
        let weights = line_claim_weights(model)?;
        let cache = AggregateCache::new();
        let mut candidates = Vec::with_capacity(vectors.len());
        for v in vectors {
            let v = ReinsuranceVector {
                specs: v.specs.iter().map(|s| s.snapped(h)).collect(),
                shared: v.shared,
            };
            let c = Self::build_listed(model, &weights, &cache, v, h, k)?;
            candidates.push(c);
        }
        if candidates.is_empty() {
            return Err(Error::InvalidContract("candidate list is empty".into()));
        }
        Ok(CandidateSpace {
            model: model.clone(),
            weights,
            h,
            k,
            config,
            cache,
            layout: Layout::Listed {
                candidates,
                shared_axes: None,
            },
        })
    }

    fn build_listed(
        model: &ThinningModel,
        weights: &SubsetWeights,
        cache: &AggregateCache,
        vector: ReinsuranceVector,
        h: f64,
        k: usize,
    ) -> Result<ListedCandidate> {
        let law = build_aggregate_with(model, weights, &vector, h, k, cache)?;
        let p_net = crate::aggregate::net_premium(model, &vector);
        Ok(ListedCandidate {
            p_claim_zero: law.p_claim_zero,
            kernel: Kernel::new(&law.dist),
            vector,
            p_net,
        })
    }

    pub fn model(&self) -> &ThinningModel {
        &self.model
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Lattice size of the candidate laws.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn is_shared(&self) -> bool {
        matches!(&self.layout, Layout::Listed { shared_axes: Some(_), .. })
    }

    /// Number of coarse candidates (saturating).
    pub fn size(&self) -> usize {
        match &self.layout {
            Layout::Listed { candidates, .. } => candidates.len(),
            Layout::PerLine { options, .. } => options
                .iter()
                .try_fold(1usize, |a, o| a.checked_mul(o.len()))
                .unwrap_or(usize::MAX),
        }
    }

    pub fn exhaustive(&self) -> bool {
        match &self.layout {
            Layout::Listed { .. } => true,
            Layout::PerLine { .. } => self.size() <= self.config.candidate_cap,
        }
    }

    /// Every coarse candidate, when the set is small enough to list.
    pub fn vectors(&self) -> Result<Vec<(ReinsuranceVector, f64)>> {
        match &self.layout {
            Layout::Listed { candidates, .. } => Ok(candidates
                .iter()
                .map(|c| (c.vector.clone(), c.p_net))
                .collect()),
            Layout::PerLine { options, .. } => {
                if self.size() > self.config.candidate_cap {
                    return Err(Error::CandidateCap {
                        count: self.size(),
                        cap: self.config.candidate_cap,
                    });
                }
                let mut out = Vec::new();
                let mut t = vec![0usize; options.len()];
                loop {
                    let v = ReinsuranceVector::new(
                        t.iter().zip(options).map(|(r, o)| o[*r].spec).collect(),
                    );
                    let p = self.model.gross_premium() - t.iter().zip(options).map(|(r, o)| o[*r].ceded).sum::<f64>();
                    out.push((v, p));
                    if !advance(&mut t, options.iter().map(|o| o.len())) {
                        return Ok(out);
                    }
                }
            }
        }
    }

    /// Whether any candidate has a positive net premium.
    pub fn has_feasible(&self) -> bool {
        match &self.layout {
            Layout::Listed { candidates, .. } => candidates.iter().any(|c| c.p_net > PREMIUM_EPS),
            Layout::PerLine { options, .. } => {
                let best: f64 = options
                    .iter()
                    .map(|o| o.iter().map(|x| x.ceded).fold(f64::INFINITY, f64::min))
                    .sum();
                self.model.gross_premium() - best > PREMIUM_EPS
            }
        }
    }

    pub fn engine(&self) -> Result<SearchEngine<'_>> {
        SearchEngine::new(self)
    }
}

/// Mixed-radix increment; false once all tuples were visited.
fn advance(t: &mut [usize], radix: impl Iterator<Item = usize>) -> bool {
    for (slot, n) in t.iter_mut().zip(radix) {
        *slot += 1;
        if *slot < n {
            return true;
        }
        *slot = 0;
    }
    false
}

/// Where a search result came from, kept for warm starts.
#[derive(Debug, Clone, PartialEq)]
enum Origin {
    Listed(usize),
    Tuple(Vec<usize>),
}

/// Best candidate found at one grid point.
#[derive(Debug, Clone)]
pub struct Choice {
    pub vector: ReinsuranceVector,
    pub p_net: f64,
    /// `sum_j g_R[j] u(i-j)` with the atom weighted by the supplied value.
    pub conv: f64,
    /// Objective value (minimized).
    pub score: f64,
    origin: Origin,
}

struct Entry {
    line: usize,
    option: usize,
    /// Entry of `mask \ line` holding the partial history, `None` for `u`.
    sub: Option<usize>,
    atom: f64,
}

struct StoredMask {
    lines: Vec<usize>,
    strides: Vec<usize>,
    entries: Vec<Entry>,
    hist: Vec<Vec<f64>>,
    current: Vec<f64>,
}

struct Tops {
    /// `(mask, weight, stored position)` of every weighted nonempty subset.
    list: Vec<(usize, f64, Option<usize>)>,
    empty_weight: f64,
}

/// Per-line history tables.
struct Tables {
    stored: Vec<StoredMask>,
    position: Vec<Option<usize>>,
    tops: Tops,
}

/// Stateful evaluator marching along one grid function.
pub struct SearchEngine<'a> {
    space: &'a CandidateSpace,
    base: Vec<f64>,
    tables: Option<Tables>,
    prepared: Option<(usize, u64)>,
    warm: Option<Origin>,
    refined_lines: HashMap<(usize, (u8, u64, u64)), Arc<LineOption>>,
    refined_shared: HashMap<(u8, u64, u64), Arc<ListedCandidate>>,
}

impl<'a> SearchEngine<'a> {
    fn new(space: &'a CandidateSpace) -> Result<Self> {
        let tables = match &space.layout {
            Layout::Listed { .. } => None,
            Layout::PerLine { options, .. } => Some(Self::build_tables(space, options)?),
        };
        Ok(SearchEngine {
            space,
            base: Vec::new(),
            tables,
            prepared: None,
            warm: None,
            refined_lines: HashMap::new(),
            refined_shared: HashMap::new(),
        })
    }

    fn build_tables(space: &CandidateSpace, options: &[Vec<LineOption>]) -> Result<Tables> {
        let n = options.len();
        let full = 1usize << n;
        let weighted: Vec<(usize, f64)> =
            space.weights.iter_nonzero().filter(|(m, _)| *m != 0).collect();
        // Downward closure of the proper subsets of weighted patterns.
        let mut needed = vec![false; full];
        for (mask, _) in &weighted {
            let mut sub = (mask - 1) & mask;
            while sub != 0 {
                needed[sub] = true;
                sub = (sub - 1) & mask;
            }
        }
        let mut order: Vec<usize> = (1..full).filter(|m| needed[*m]).collect();
        order.sort_by_key(|m| (m.count_ones(), *m));
        let mut position = vec![None; full];
        let mut stored: Vec<StoredMask> = Vec::with_capacity(order.len());
        let mut total_entries = 0usize;
        for mask in order {
            let lines: Vec<usize> = (0..n).filter(|z| mask & (1 << z) != 0).collect();
            let mut strides = Vec::with_capacity(lines.len());
            let mut count = 1usize;
            for &z in &lines {
                strides.push(count);
                count = count.saturating_mul(options[z].len());
            }
            total_entries = total_entries.saturating_add(count);
            if total_entries.saturating_mul(64) > space.config.history_budget {
                return Err(Error::HistoryBudget {
                    needed: total_entries.saturating_mul(64),
                    budget: space.config.history_budget,
                });
            }
            let mut entries = Vec::with_capacity(count);
            let mut t = vec![0usize; lines.len()];
            for _ in 0..count {
                // Split off the line with the shortest kernel.
                let (p, _) = lines
                    .iter()
                    .enumerate()
                    .map(|(p, z)| (p, options[*z][t[p]].kernel.support()))
                    .min_by_key(|(_, s)| *s)
                    .unwrap();
                let z = lines[p];
                let sub_mask = mask & !(1 << z);
                let sub = if sub_mask == 0 {
                    None
                } else {
                    let sp = position[sub_mask].expect("subsets stored first");
                    let sm: &StoredMask = &stored[sp];
                    let idx: usize = sm
                        .lines
                        .iter()
                        .zip(&sm.strides)
                        .map(|(zz, st)| t[lines.iter().position(|x| x == zz).unwrap()] * st)
                        .sum();
                    Some(idx)
                };
                let atom = lines
                    .iter()
                    .enumerate()
                    .map(|(q, zz)| options[*zz][t[q]].kernel.g0)
                    .product();
                entries.push(Entry {
                    line: z,
                    option: t[p],
                    sub,
                    atom,
                });
                advance(&mut t, lines.iter().map(|z| options[*z].len()));
            }
            position[mask] = Some(stored.len());
            stored.push(StoredMask {
                lines,
                strides,
                hist: (0..count).map(|_| Vec::new()).collect(),
                current: vec![0.0; count],
                entries,
            });
        }
        let list = weighted
            .iter()
            .map(|(m, w)| (*m, *w, position[*m]))
            .collect();
        Ok(Tables {
            stored,
            position,
            tops: Tops {
                list,
                empty_weight: space.weights.get(0),
            },
        })
    }

    /// Number of committed history values.
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn history(&self) -> &[f64] {
        &self.base
    }

    /// Forget history beyond `len` entries.
    pub fn truncate(&mut self, len: usize) {
        self.base.truncate(len);
        if let Some(t) = &mut self.tables {
            for sm in &mut t.stored {
                for hst in &mut sm.hist {
                    hst.truncate(len);
                }
            }
        }
        self.prepared = None;
    }

    pub fn set_warm_start(&mut self, choice: Option<&Choice>) {
        self.warm = choice.map(|c| c.origin.clone());
    }

    /// Fill the current-step partial convolutions for the atom value `cur`.
    fn prepare(&mut self, cur: f64) {
        let key = (self.base.len(), cur.to_bits());
        if self.prepared == Some(key) {
            return;
        }
        let Layout::PerLine { options, .. } = &self.space.layout else {
            self.prepared = Some(key);
            return;
        };
        let tables = self.tables.as_mut().expect("per-line tables");
        let base = &self.base;
        for s in 0..tables.stored.len() {
            let (done, rest) = tables.stored.split_at_mut(s);
            let sm = &mut rest[0];
            let lines = &sm.lines;
            for (e, entry) in sm.entries.iter().enumerate() {
                let k = &options[entry.line][entry.option].kernel;
                let value = match entry.sub {
                    None => k.dot_history(base) + k.g0 * cur,
                    Some(sub) => {
                        let sub_mask = lines
                            .iter()
                            .filter(|z| **z != entry.line)
                            .fold(0usize, |m, z| m | (1 << z));
                        let sp = tables.position[sub_mask].unwrap();
                        let sm2 = &done[sp];
                        k.dot_history(&sm2.hist[sub]) + k.g0 * sm2.current[sub]
                    }
                };
                sm.current[e] = value;
            }
        }
        self.prepared = Some(key);
    }

    /// Append the next history value. `cur` must match the value used for
    /// the atom in the preceding search (any value is valid if none ran).
    pub fn commit(&mut self, u: f64, cur: f64) -> Result<()> {
        self.prepare(cur);
        if let Some(t) = &mut self.tables {
            let mut total = 0usize;
            for sm in &mut t.stored {
                for (e, entry) in sm.entries.iter().enumerate() {
                    sm.hist[e].push(sm.current[e] + entry.atom * (u - cur));
                }
                total += sm.hist.len() * (self.base.len() + 1);
            }
            if total > self.space.config.history_budget {
                return Err(Error::HistoryBudget {
                    needed: total,
                    budget: self.space.config.history_budget,
                });
            }
        }
        self.base.push(u);
        self.prepared = None;
        Ok(())
    }

    /// Best candidate at the next grid index for the objective `obj(p_net,
    /// conv)`, which is minimized. Candidates with `p_net <= 1e-9` are skipped.
    pub fn search(&mut self, cur: f64, obj: &dyn Fn(f64, f64) -> f64) -> Result<Choice> {
        self.prepare(cur);
        let choice = match &self.space.layout {
            Layout::Listed { .. } => self.search_listed(cur, obj)?,
            Layout::PerLine { .. } => self.search_lines(cur, obj)?,
        };
        self.warm = Some(choice.origin.clone());
        Ok(choice)
    }

    /// `(p_net, conv)` of the `index`-th vector of a listed space, without
    /// searching.
    pub fn evaluate(&mut self, index: usize, cur: f64) -> Result<(f64, f64)> {
        let Layout::Listed { candidates, .. } = &self.space.layout else {
            return Err(Error::InvalidArgument("evaluate needs a listed candidate space".into()));
        };
        let c = candidates.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: candidates.len(),
        })?;
        Ok((c.p_net, self.listed_conv(c, cur)))
    }

    fn listed_conv(&self, c: &ListedCandidate, cur: f64) -> f64 {
        c.kernel.dot_history(&self.base) + c.kernel.g0 * cur
    }

    fn search_listed(&mut self, cur: f64, obj: &dyn Fn(f64, f64) -> f64) -> Result<Choice> {
        let space: &'a CandidateSpace = self.space;
        let Layout::Listed {
            candidates,
            shared_axes,
        } = &space.layout
        else {
            unreachable!()
        };
        let mut best: Option<Choice> = None;
        for (idx, c) in candidates.iter().enumerate() {
            if c.p_net <= PREMIUM_EPS {
                continue;
            }
            let conv = self.listed_conv(c, cur);
            let score = obj(c.p_net, conv);
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(Choice {
                    vector: c.vector.clone(),
                    p_net: c.p_net,
                    conv,
                    score,
                    origin: Origin::Listed(idx),
                });
            }
        }
        let mut best = best.ok_or(Error::NoFeasibleCandidate(PREMIUM_EPS))?;
        if self.space.config.refine {
            if let Some(axes) = shared_axes {
                let anchor = best.vector.specs[0];
                best = self.refine_shared(axes, anchor, best, cur, obj)?;
            }
        }
        Ok(best)
    }

    fn shared_refined(&mut self, spec: RetainedLossSpec) -> Result<Arc<ListedCandidate>> {
        let key = spec.key();
        if let Some(c) = self.refined_shared.get(&key) {
            return Ok(c.clone());
        }
        let s = self.space;
        let vector = ReinsuranceVector::shared(spec, s.model.lines());
        let c = Arc::new(CandidateSpace::build_listed(
            &s.model, &s.weights, &s.cache, vector, s.h, s.k,
        )?);
        self.refined_shared.insert(key, c.clone());
        Ok(c)
    }

    /// Two halvings of the common parameter around `anchor`.
    fn refine_shared(
        &mut self,
        axes: &Axes,
        anchor: RetainedLossSpec,
        mut best: Choice,
        cur: f64,
        obj: &dyn Fn(f64, f64) -> f64,
    ) -> Result<Choice> {
        let mut center = anchor;
        for frac in [0.5, 0.25] {
            let mut next = center;
            for spec in axes.neighbours(&anchor, &center, frac) {
                let spec = spec.snapped(self.space.h);
                if spec == center || spec == anchor {
                    continue;
                }
                let c = self.shared_refined(spec)?;
                if c.p_net <= PREMIUM_EPS {
                    continue;
                }
                let conv = self.listed_conv(&c, cur);
                let score = obj(c.p_net, conv);
                if score < best.score {
                    best = Choice {
                        vector: c.vector.clone(),
                        p_net: c.p_net,
                        conv,
                        score,
                        origin: best.origin.clone(),
                    };
                    next = spec;
                }
            }
            center = next;
        }
        Ok(best)
    }

    /// Partial convolution of a weighted subset under the coarse tuple `t`,
    /// optionally with line `swap.0` replaced by the kernel `swap.1`.
    fn subset_value(
        &self,
        tables: &Tables,
        options: &[Vec<LineOption>],
        mask: usize,
        stored: Option<usize>,
        t: &[usize],
        cur: f64,
        swap: Option<(usize, &Kernel)>,
    ) -> f64 {
        let (split, kernel) = match swap {
            Some((z, k)) if mask & (1 << z) != 0 => (z, k),
            _ => {
                if let Some(sp) = stored {
                    let sm = &tables.stored[sp];
                    let idx: usize = sm.lines.iter().zip(&sm.strides).map(|(z, st)| t[*z] * st).sum();
                    return sm.current[idx];
                }
                let z = (0..options.len())
                    .filter(|z| mask & (1 << z) != 0)
                    .min_by_key(|z| options[*z][t[*z]].kernel.support())
                    .unwrap();
                (z, &options[z][t[z]].kernel)
            }
        };
        let sub = mask & !(1 << split);
        if sub == 0 {
            return kernel.dot_history(&self.base) + kernel.g0 * cur;
        }
        let sm = &tables.stored[tables.position[sub].expect("proper subsets are stored")];
        let idx: usize = sm.lines.iter().zip(&sm.strides).map(|(z, st)| t[*z] * st).sum();
        kernel.dot_history(&sm.hist[idx]) + kernel.g0 * sm.current[idx]
    }

    fn tuple_conv(
        &self,
        tables: &Tables,
        options: &[Vec<LineOption>],
        t: &[usize],
        cur: f64,
        swap: Option<(usize, &Kernel)>,
    ) -> f64 {
        let mut acc = tables.tops.empty_weight * cur;
        for (mask, w, stored) in &tables.tops.list {
            acc += w * self.subset_value(tables, options, *mask, *stored, t, cur, swap);
        }
        acc
    }

    fn tuple_premium(&self, options: &[Vec<LineOption>], t: &[usize]) -> f64 {
        let ceded: f64 = t.iter().zip(options).map(|(r, o)| o[*r].ceded).sum();
        self.space.model.gross_premium() - ceded
    }

    fn score_tuple(
        &self,
        tables: &Tables,
        options: &[Vec<LineOption>],
        t: &[usize],
        cur: f64,
        obj: &dyn Fn(f64, f64) -> f64,
    ) -> Option<(f64, f64, f64)> {
        let p = self.tuple_premium(options, t);
        if p <= PREMIUM_EPS {
            return None;
        }
        let conv = self.tuple_conv(tables, options, t, cur, None);
        Some((obj(p, conv), p, conv))
    }

    fn search_lines(&mut self, cur: f64, obj: &dyn Fn(f64, f64) -> f64) -> Result<Choice> {
        let space: &'a CandidateSpace = self.space;
        let Layout::PerLine {
            options,
            axes,
            identical,
            identity,
        } = &space.layout
        else {
            unreachable!()
        };
        let tables = self.tables.as_ref().unwrap();
        let n = options.len();
        let radix = || options.iter().map(|o| o.len());
        let mut best: Option<(f64, f64, f64, Vec<usize>)> = None;
        let consider = |best: &mut Option<(f64, f64, f64, Vec<usize>)>, t: &[usize]| {
            if let Some((s, p, c)) = self.score_tuple(tables, options, t, cur, obj) {
                if best.as_ref().is_none_or(|b| s < b.0) {
                    *best = Some((s, p, c, t.to_vec()));
                }
            }
        };
        let mut best_diag: Option<(f64, f64, f64, Vec<usize>)> = None;
        if *identical {
            for r in 0..options[0].len() {
                consider(&mut best_diag, &vec![r; n]);
            }
        }
        if self.space.size() <= self.space.config.candidate_cap {
            let mut t = vec![0usize; n];
            loop {
                consider(&mut best, &t);
                if !advance(&mut t, radix()) {
                    break;
                }
            }
        } else {
            // Coordinate descent from the best of the warm starts.
            let mut starts: Vec<Vec<usize>> = Vec::new();
            if let Some(Origin::Tuple(t)) = &self.warm {
                starts.push(t.clone());
            }
            starts.push(identity.clone());
            if let Some(d) = &best_diag {
                starts.push(d.3.clone());
            }
            for s in &starts {
                consider(&mut best, s);
            }
            if let Some(start) = best.clone() {
                let mut t = start.3.clone();
                for _ in 0..self.space.config.cd_sweeps {
                    let before = t.clone();
                    for z in 0..n {
                        for o in 0..options[z].len() {
                            let mut c = t.clone();
                            c[z] = o;
                            consider(&mut best, &c);
                        }
                        t = best.as_ref().unwrap().3.clone();
                    }
                    if t == before {
                        break;
                    }
                }
            }
        }
        let (score, p_net, conv, t) = best.ok_or(Error::NoFeasibleCandidate(PREMIUM_EPS))?;
        let specs: Vec<RetainedLossSpec> = t.iter().zip(options).map(|(r, o)| o[*r].spec).collect();
        let mut choice = Choice {
            vector: ReinsuranceVector::new(specs),
            p_net,
            conv,
            score,
            origin: Origin::Tuple(t.clone()),
        };
        if self.space.config.refine {
            for z in 0..n {
                choice = self.refine_line(z, &t, &axes[z], choice, cur, obj)?;
            }
            if let (true, Some(d)) = (*identical, best_diag) {
                // Moves of the common contract keep the shared set a subset.
                let anchor = options[0][d.3[0]].spec;
                choice = self.refine_diagonal(&axes[0], anchor, choice, cur, obj)?;
            }
        }
        Ok(choice)
    }

    fn line_refined(&mut self, z: usize, spec: RetainedLossSpec) -> Result<Arc<LineOption>> {
        let key = (z, spec.key());
        if let Some(o) = self.refined_lines.get(&key) {
            return Ok(o.clone());
        }
        let s = self.space;
        let law = s.cache.line_law(&s.model, z, &spec, s.h, s.k)?;
        let o = Arc::new(LineOption {
            spec,
            kernel: Kernel::new(&law),
            ceded: ceded_premium(&s.model, z, &spec),
        });
        self.refined_lines.insert(key, o.clone());
        Ok(o)
    }

    fn refine_line(
        &mut self,
        z: usize,
        t: &[usize],
        axes: &Axes,
        mut best: Choice,
        cur: f64,
        obj: &dyn Fn(f64, f64) -> f64,
    ) -> Result<Choice> {
        let space: &'a CandidateSpace = self.space;
        let Layout::PerLine { options, .. } = &space.layout else {
            unreachable!()
        };
        let anchor = options[z][t[z]].spec;
        let base_ceded: f64 = t
            .iter()
            .enumerate()
            .filter(|(q, _)| *q != z)
            .map(|(q, r)| options[q][*r].ceded)
            .sum();
        let mut center = anchor;
        for frac in [0.5, 0.25] {
            let mut next = center;
            for spec in axes.neighbours(&anchor, &center, frac) {
                let spec = spec.snapped(self.space.h);
                if spec == center || spec == anchor {
                    continue;
                }
                let opt = self.line_refined(z, spec)?;
                let p = self.space.model.gross_premium() - base_ceded - opt.ceded;
                if p <= PREMIUM_EPS {
                    continue;
                }
                let tables = self.tables.as_ref().unwrap();
                let conv = self.tuple_conv(tables, options, t, cur, Some((z, &opt.kernel)));
                let score = obj(p, conv);
                if score < best.score {
                    let mut specs = best.vector.specs.clone();
                    for (q, r) in t.iter().enumerate() {
                        specs[q] = options[q][*r].spec;
                    }
                    specs[z] = spec;
                    best = Choice {
                        vector: ReinsuranceVector::new(specs),
                        p_net: p,
                        conv,
                        score,
                        origin: best.origin.clone(),
                    };
                    next = spec;
                }
            }
            center = next;
        }
        Ok(best)
    }

    fn refine_diagonal(
        &mut self,
        axes: &Axes,
        anchor: RetainedLossSpec,
        best: Choice,
        cur: f64,
        obj: &dyn Fn(f64, f64) -> f64,
    ) -> Result<Choice> {
        let origin = best.origin.clone();
        let mut out = self.refine_shared(axes, anchor, best, cur, obj)?;
        out.vector.shared = false;
        out.origin = origin;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::build_aggregate;
    use crate::model::SeverityLaw;
    use crate::reinsurance::RetainedLossSpec as R;

    fn two_line_model() -> ThinningModel {
        ThinningModel::new(
            vec![3.0, 2.0, 1.0],
            vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![0.6, 0.7]],
            vec![SeverityLaw::exponential(1.0), SeverityLaw::exponential(2.0)],
            0.4,
            0.6,
            0.1,
        )
    }

    fn three_line_model() -> ThinningModel {
        ThinningModel::new(
            vec![8.0, 4.0, 5.0],
            vec![
                vec![1.0, 0.06, 0.05],
                vec![0.03, 1.0, 0.01],
                vec![0.007, 0.005, 1.0],
            ],
            vec![
                SeverityLaw::exponential(0.5),
                SeverityLaw::exponential(3.0),
                SeverityLaw::exponential(2.0),
            ],
            3.0,
            3.5,
            0.3,
        )
    }

    fn history(len: usize) -> Vec<f64> {
        (0..len).map(|j| 1.0 + 0.3 * j as f64 + 0.01 * (j as f64).sin()).collect()
    }

    /// Per-line tables reproduce direct dot products with full aggregates.
    #[test]
    fn tables_match_direct_convolution() {
        for model in [two_line_model(), three_line_model()] {
            let h = 0.1;
            let k = 400;
            let n = model.lines();
            let opts: Vec<Vec<RetainedLossSpec>> = (0..n)
                .map(|z| match z {
                    0 => vec![R::Proportional { b: 0.4 }, R::Proportional { b: 1.0 }],
                    1 => vec![R::Xl { m: 0.5 }, R::Xl { m: 1.5 }, R::Identity],
                    _ => vec![R::Lxl { m: 0.3, l: 0.8 }, R::Identity],
                })
                .collect();
            let space = CandidateSpace::per_line(&model, opts, h, k, SearchConfig::default()).unwrap();
            let vectors = space.vectors().unwrap();
            let mut eng = space.engine().unwrap();
            let u = history(60);
            for (i, ui) in u.iter().enumerate() {
                let cur = if i == 0 { *ui } else { u[i - 1] };
                eng.prepare(cur);
                let tables = eng.tables.as_ref().unwrap();
                let Layout::PerLine { options, .. } = &space.layout else { unreachable!() };
                let mut t = vec![0usize; n];
                for (v, _) in &vectors {
                    let g = build_aggregate(&model, v, h, k).unwrap();
                    let m = g.dist.masses();
                    let mut direct = m[0] * cur;
                    for j in 1..=i {
                        direct += m[j] * u[i - j];
                    }
                    let via = eng.tuple_conv(tables, options, &t, cur, None);
                    assert!((via - direct).abs() < 1e-10 * direct.abs().max(1.0), "i={i} {v:?}: {via} vs {direct}");
                    advance(&mut t, options.iter().map(|o| o.len()));
                }
                eng.commit(*ui, cur).unwrap();
            }
        }
    }

    #[test]
    fn coordinate_descent_never_worse_than_identity() {
        let model = three_line_model();
        let b: Vec<RetainedLossSpec> = (0..=20).map(|i| R::Proportional { b: i as f64 / 20.0 }).collect();
        let config = SearchConfig {
            candidate_cap: 100,
            ..Default::default()
        };
        let space = CandidateSpace::per_line(&model, vec![b.clone(), b.clone(), b], 0.05, 600, config).unwrap();
        assert!(!space.exhaustive());
        let mut eng = space.engine().unwrap();
        let u = history(80);
        let beta = model.total_intensity();
        let delta = model.delta;
        for (i, ui) in u.iter().enumerate() {
            let cur = if i == 0 { *ui } else { u[i - 1] };
            let obj = |p: f64, c: f64| ((delta + beta) * cur - beta * c) / p;
            let best = eng.search(cur, &obj).unwrap();
            let tables = eng.tables.as_ref().unwrap();
            let Layout::PerLine { options, identity, .. } = &space.layout else { unreachable!() };
            let (s_id, _, _) = eng.score_tuple(tables, options, identity, cur, &obj).unwrap();
            assert!(best.score <= s_id);
            eng.commit(*ui, cur).unwrap();
        }
    }

    #[test]
    fn exhaustive_matches_listed_search() {
        let model = two_line_model();
        let opts = vec![
            vec![R::Proportional { b: 0.5 }, R::Proportional { b: 0.8 }, R::Identity],
            vec![R::Xl { m: 0.4 }, R::Xl { m: 1.0 }, R::Identity],
        ];
        let h = 0.05;
        let space = CandidateSpace::per_line(&model, opts, h, 500, SearchConfig::default()).unwrap();
        let listed = CandidateSpace::listed(
            &model,
            space.vectors().unwrap().into_iter().map(|(v, _)| v).collect(),
            h,
            500,
            SearchConfig::default(),
        )
        .unwrap();
        let mut a = space.engine().unwrap();
        let mut b = listed.engine().unwrap();
        let u = history(100);
        let beta = model.total_intensity();
        for (i, ui) in u.iter().enumerate() {
            let cur = if i == 0 { *ui } else { u[i - 1] };
            let obj = |p: f64, c: f64| ((0.1 + beta) * cur - beta * c) / p;
            let x = a.search(cur, &obj).unwrap();
            let y = b.search(cur, &obj).unwrap();
            assert!((x.score - y.score).abs() < 1e-10 * x.score.abs().max(1.0));
            a.commit(*ui, cur).unwrap();
            b.commit(*ui, cur).unwrap();
        }
    }

    #[test]
    fn infeasible_candidates_are_skipped() {
        let model = two_line_model();
        let space = CandidateSpace::shared(
            &model,
            vec![R::Proportional { b: 0.0 }, R::Proportional { b: 1.0 }],
            0.1,
            100,
            SearchConfig::default(),
        )
        .unwrap();
        let mut eng = space.engine().unwrap();
        let c = eng.search(1.0, &|p, _| -p).unwrap();
        assert!(c.vector.is_identity());
    }

    #[test]
    fn truncation_replays_equal_history() {
        let model = three_line_model();
        let b: Vec<RetainedLossSpec> = [0.3, 0.7, 1.0].iter().map(|b| R::Proportional { b: *b }).collect();
        let space = CandidateSpace::per_line(&model, vec![b.clone(), b.clone(), b], 0.05, 300, SearchConfig::default()).unwrap();
        let mut eng = space.engine().unwrap();
        let u = history(50);
        for ui in &u {
            eng.commit(*ui, *ui).unwrap();
        }
        let obj = |p: f64, c: f64| c / p;
        let reference = eng.search(u[49], &obj).unwrap().score;
        eng.truncate(30);
        for ui in &u[30..] {
            eng.commit(*ui, 0.0).unwrap();
        }
        let again = eng.search(u[49], &obj).unwrap().score;
        assert!((reference - again).abs() < 1e-12 * reference.abs());
    }

    #[test]
    fn history_budget_is_enforced() {
        let model = three_line_model();
        let b: Vec<RetainedLossSpec> = (0..=30).map(|i| R::Proportional { b: i as f64 / 30.0 }).collect();
        let config = SearchConfig {
            history_budget: 10_000,
            ..Default::default()
        };
        let space = CandidateSpace::per_line(&model, vec![b.clone(), b.clone(), b], 0.05, 100, config).unwrap();
        assert!(matches!(space.engine(), Err(Error::HistoryBudget { .. })));
    }
}
