//! The dual chain on connected compact subsets of the compactified graph.
//!
//! A dual state is a connected compact subset of the graph plus its points
//! at infinity: a (possibly empty) set of center vertices together with one
//! extent per branch. Connectivity is a representation invariant, not a
//! runtime check: with a nonempty center part every touched branch is a
//! prefix (or the full branch with its infinite point), and a state with an
//! empty center part lives on a single branch as a segment or an infinite
//! half segment. Growth adds an adjacent vertex; removing a vertex splits
//! the set and one connected component is kept, with probability
//! proportional to its stationary mass.

use std::io::Write;

use crate::interval_dual::{
    DualError, DualStep, DualTerminal, DualTrajectory, ExplodedBound, ExplosionPolicy,
    ExplosionRecord, StepKind,
};
use crate::logspace::{log_add, log_sub, log_sum_exp, LOG_ZERO};
use crate::rng::{SeedSpec, TrialRng};
use crate::state_space::{GraphChain, GraphMassCache, GraphMeasure, GraphModel, Vertex};

/// How much of one branch a dual state covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchExtent {
    Empty,
    /// `φ([0, k])`, attached to the center part.
    Prefix(u32),
    /// The whole branch including its infinite point, attached to the center.
    Full,
    /// `φ([a, b])` with no center part (pure-branch state).
    Segment(u32, u32),
    /// `φ([a, ∞])` including the infinite point, no center part.
    HalfSegment(u32),
}

impl BranchExtent {
    pub fn has_infinity(self) -> bool {
        matches!(self, BranchExtent::Full | BranchExtent::HalfSegment(_))
    }

    fn is_pure(self) -> bool {
        matches!(self, BranchExtent::Segment(..) | BranchExtent::HalfSegment(_))
    }

    /// Deepest covered site when the extent has a finite outward end; this
    /// is the end that can explode.
    fn outward_end(self) -> Option<u32> {
        match self {
            BranchExtent::Prefix(k) => Some(k),
            BranchExtent::Segment(_, b) => Some(b),
            _ => None,
        }
    }

    /// State after the outward end explodes: the extent gains the branch's
    /// infinite point.
    fn exploded(self) -> BranchExtent {
        match self {
            BranchExtent::Prefix(_) => BranchExtent::Full,
            BranchExtent::Segment(a, _) => BranchExtent::HalfSegment(a),
            e => e,
        }
    }
}

/// A dual state: center bitmask plus one extent per branch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DualSet {
    pub mask: u64,
    pub extents: Vec<BranchExtent>,
}

impl DualSet {
    pub fn center_vertex(c: u8, branches: usize) -> Self {
        Self {
            mask: 1 << c,
            extents: vec![BranchExtent::Empty; branches],
        }
    }

    pub fn branch_vertex(i: u8, k: u32, branches: usize) -> Self {
        let mut extents = vec![BranchExtent::Empty; branches];
        extents[i as usize] = BranchExtent::Segment(k, k);
        Self { mask: 0, extents }
    }

    /// Singleton `{x}`.
    pub fn vertex(x: Vertex, branches: usize) -> Self {
        match x {
            Vertex::Center(c) => Self::center_vertex(c, branches),
            Vertex::Branch { branch, depth } => Self::branch_vertex(branch, depth, branches),
        }
    }

    /// The absorbing state: the whole compactified graph.
    pub fn whole(model: &GraphModel) -> Self {
        let c = model.center_count();
        let mask = if c == 64 { u64::MAX } else { (1u64 << c) - 1 };
        Self {
            mask,
            extents: vec![BranchExtent::Full; model.branch_count()],
        }
    }

    pub fn is_whole(&self, model: &GraphModel) -> bool {
        *self == Self::whole(model)
    }

    /// Number of infinite points in the state (the stratum index).
    pub fn stratum(&self) -> u8 {
        self.extents
            .iter()
            .filter(|e| e.has_infinity())
            .count() as u8
    }

    pub fn contains(&self, x: Vertex) -> bool {
        match x {
            Vertex::Center(c) => self.mask & (1 << c) != 0,
            Vertex::Branch { branch, depth } => match self.extents[branch as usize] {
                BranchExtent::Empty => false,
                BranchExtent::Prefix(k) => depth <= k,
                BranchExtent::Full => true,
                BranchExtent::Segment(a, b) => a <= depth && depth <= b,
                BranchExtent::HalfSegment(a) => depth >= a,
            },
        }
    }

    /// Representation invariant: attached extents need their attach vertex,
    /// pure extents need an otherwise empty state.
    pub fn is_valid(&self, model: &GraphModel) -> bool {
        if self.extents.len() != model.branch_count() {
            return false;
        }
        let pure = self.extents.iter().filter(|e| e.is_pure()).count();
        if self.mask == 0 {
            return pure == 1
                && self
                    .extents
                    .iter()
                    .all(|e| e.is_pure() || *e == BranchExtent::Empty);
        }
        if pure > 0 {
            return false;
        }
        self.extents.iter().enumerate().all(|(i, e)| match e {
            BranchExtent::Empty => true,
            BranchExtent::Prefix(_) | BranchExtent::Full => {
                self.mask & (1 << model.branch(i as u8).attach) != 0
            }
            _ => false,
        })
    }

    /// Stable text encoding, e.g. `C:1;B0:P3;B1:F;B2:-`.
    pub fn encode(&self) -> String {
        let mut s = format!("C:{:x}", self.mask);
        for (i, e) in self.extents.iter().enumerate() {
            s.push_str(&format!(";B{i}:"));
            match e {
                BranchExtent::Empty => s.push('-'),
                BranchExtent::Prefix(k) => s.push_str(&format!("P{k}")),
                BranchExtent::Full => s.push('F'),
                BranchExtent::Segment(a, b) => s.push_str(&format!("S{a}-{b}")),
                BranchExtent::HalfSegment(a) => s.push_str(&format!("H{a}")),
            }
        }
        s
    }
}

/// `log μ(Q)` of a dual set under a graph measure with its cache.
pub fn log_dual_mass(q: &DualSet, cache: &mut GraphMassCache) -> f64 {
    let mut total = LOG_ZERO;
    let mut mask = q.mask;
    while mask != 0 {
        let c = mask.trailing_zeros() as u8;
        mask &= mask - 1;
        total = log_add(total, cache.log_center(c));
    }
    for (i, e) in q.extents.iter().enumerate() {
        let i = i as u8;
        let part = match *e {
            BranchExtent::Empty => continue,
            BranchExtent::Prefix(k) => cache.log_seg(i, 0, k),
            BranchExtent::Full => cache.log_tail(i, 0),
            BranchExtent::Segment(a, b) => cache.log_seg(i, a, b),
            BranchExtent::HalfSegment(a) => cache.log_tail(i, a),
        };
        total = log_add(total, part);
    }
    total
}

/// Same, straight off the measure without extension (for windowed states).
pub fn log_dual_mass_measure(q: &DualSet, measure: &GraphMeasure) -> Option<f64> {
    let mut parts = Vec::new();
    let mut mask = q.mask;
    while mask != 0 {
        let c = mask.trailing_zeros() as u8;
        mask &= mask - 1;
        parts.push(measure.log_center(c));
    }
    for (i, e) in q.extents.iter().enumerate() {
        let i = i as u8;
        let part = match *e {
            BranchExtent::Empty => continue,
            BranchExtent::Prefix(k) => measure.log_prefix(i, k)?,
            BranchExtent::Full => measure.log_branch_tail(i, 0)?,
            BranchExtent::Segment(a, b) => measure.log_branch_range(i, a, b)?,
            BranchExtent::HalfSegment(a) => measure.log_branch_tail(i, a)?,
        };
        parts.push(part);
    }
    Some(log_sum_exp(&parts))
}

/// One candidate transition with its target, rate, and target log-mass.
type Move = (DualSet, f64, f64);

/// Enumerates the dual transitions from `Q`: growth by any adjacent vertex,
/// and for every removable vertex one move per connected component of the
/// remainder. Rates are stationary-mass ratios times the underlying jump
/// rates into (growth) or out of (removal) the set.
pub fn dual_transitions(
    q: &DualSet,
    chain: &GraphChain,
) -> Result<Vec<(DualSet, f64)>, DualError> {
    if q.is_whole(&chain.model) {
        return Err(DualError::AbsorbingState);
    }
    let mut cache = GraphMassCache::new(&chain.model, &chain.measure);
    let logm = log_dual_mass(q, &mut cache);
    let moves = enumerate_moves(q, &chain.model, &mut cache, logm);
    Ok(moves.into_iter().map(|(s, r, _)| (s, r)).collect())
}

fn enumerate_moves(
    q: &DualSet,
    model: &GraphModel,
    cache: &mut GraphMassCache,
    logm: f64,
) -> Vec<Move> {
    let mut out = Vec::new();
    let nb = model.branch_count();

    // ----- growth -----
    if q.mask != 0 {
        // center vertices adjacent to the mask
        let mut frontier = 0u64;
        let mut m = q.mask;
        while m != 0 {
            let v = m.trailing_zeros() as u8;
            m &= m - 1;
            frontier |= model.center_adjacency(v);
        }
        frontier &= !q.mask;
        while frontier != 0 {
            let v = frontier.trailing_zeros() as u8;
            frontier &= frontier - 1;
            let mut rate_in = 0.0;
            let mut adj = model.center_adjacency(v) & q.mask;
            while adj != 0 {
                let u = adj.trailing_zeros() as u8;
                adj &= adj - 1;
                rate_in += model.center_rate(v, u);
            }
            let mut grown = q.clone();
            grown.mask |= 1 << v;
            let new_logm = log_add(logm, cache.log_center(v));
            out.push((grown, (new_logm - logm).exp() * rate_in, new_logm));
        }
        // branch growth
        for i in 0..nb {
            let b = model.branch(i as u8);
            match q.extents[i] {
                BranchExtent::Empty => {
                    if q.mask & (1 << b.attach) != 0 {
                        let mut grown = q.clone();
                        grown.extents[i] = BranchExtent::Prefix(0);
                        let new_logm = log_add(logm, cache.log_site(i as u8, 0));
                        out.push((grown, (new_logm - logm).exp() * b.attach_in, new_logm));
                    }
                }
                BranchExtent::Prefix(k) => {
                    let mut grown = q.clone();
                    grown.extents[i] = BranchExtent::Prefix(k + 1);
                    let new_logm = log_add(logm, cache.log_site(i as u8, k + 1));
                    out.push((grown, (new_logm - logm).exp() * b.inn(k), new_logm));
                }
                BranchExtent::Full => {}
                BranchExtent::Segment(..) | BranchExtent::HalfSegment(_) => {
                    unreachable!("pure extent with nonempty center mask")
                }
            }
        }
    } else {
        // pure-branch state
        let (i, e) = q
            .extents
            .iter()
            .enumerate()
            .find(|(_, e)| e.is_pure())
            .expect("pure-branch state");
        let i_u8 = i as u8;
        let b = model.branch(i_u8);
        match *e {
            BranchExtent::Segment(a, bb) => {
                // outward end
                let mut grown = q.clone();
                grown.extents[i] = BranchExtent::Segment(a, bb + 1);
                let new_logm = log_add(logm, cache.log_site(i_u8, bb + 1));
                out.push((grown, (new_logm - logm).exp() * b.inn(bb), new_logm));
                if a > 0 {
                    let mut grown = q.clone();
                    grown.extents[i] = BranchExtent::Segment(a - 1, bb);
                    let new_logm = log_add(logm, cache.log_site(i_u8, a - 1));
                    out.push((grown, (new_logm - logm).exp() * b.out(a - 1), new_logm));
                } else {
                    // absorb the attach vertex: the state reattaches
                    let mut grown = q.clone();
                    grown.mask = 1 << b.attach;
                    grown.extents[i] = BranchExtent::Prefix(bb);
                    let new_logm = log_add(logm, cache.log_center(b.attach));
                    out.push((grown, (new_logm - logm).exp() * b.attach_out, new_logm));
                }
            }
            BranchExtent::HalfSegment(a) => {
                if a > 0 {
                    let mut grown = q.clone();
                    grown.extents[i] = BranchExtent::HalfSegment(a - 1);
                    let new_logm = log_add(logm, cache.log_site(i_u8, a - 1));
                    out.push((grown, (new_logm - logm).exp() * b.out(a - 1), new_logm));
                } else {
                    let mut grown = q.clone();
                    grown.mask = 1 << b.attach;
                    grown.extents[i] = BranchExtent::Full;
                    let new_logm = log_add(logm, cache.log_center(b.attach));
                    out.push((grown, (new_logm - logm).exp() * b.attach_out, new_logm));
                }
            }
            _ => unreachable!(),
        }
    }

    // ----- removal -----
    // branch tips (single-component removals)
    for i in 0..nb {
        let i_u8 = i as u8;
        let b = model.branch(i_u8);
        match q.extents[i] {
            BranchExtent::Prefix(k) => {
                let mut shrunk = q.clone();
                shrunk.extents[i] = if k == 0 {
                    BranchExtent::Empty
                } else {
                    BranchExtent::Prefix(k - 1)
                };
                let new_logm = shrink_logm(cache, logm, &shrunk, i_u8, k);
                out.push((shrunk, (new_logm - logm).exp() * b.out(k), new_logm));
            }
            BranchExtent::Segment(a, bb) => {
                if a < bb {
                    let mut shrunk = q.clone();
                    shrunk.extents[i] = BranchExtent::Segment(a, bb - 1);
                    let new_logm = shrink_logm(cache, logm, &shrunk, i_u8, bb);
                    out.push((shrunk, (new_logm - logm).exp() * b.out(bb), new_logm));
                    let mut shrunk = q.clone();
                    shrunk.extents[i] = BranchExtent::Segment(a + 1, bb);
                    let new_logm = shrink_logm(cache, logm, &shrunk, i_u8, a);
                    let inward = if a == 0 { b.attach_in } else { b.inn(a - 1) };
                    out.push((shrunk, (new_logm - logm).exp() * inward, new_logm));
                }
                // a singleton segment keeps both moves off: the empty set is
                // not a state
            }
            BranchExtent::HalfSegment(a) => {
                let mut shrunk = q.clone();
                shrunk.extents[i] = BranchExtent::HalfSegment(a + 1);
                let new_logm = shrink_logm(cache, logm, &shrunk, i_u8, a);
                let inward = if a == 0 { b.attach_in } else { b.inn(a - 1) };
                out.push((shrunk, (new_logm - logm).exp() * inward, new_logm));
            }
            BranchExtent::Empty | BranchExtent::Full => {}
        }
    }

    // center removals: the remainder may split; one move per component
    let mut mask = q.mask;
    while mask != 0 {
        let v = mask.trailing_zeros() as u8;
        mask &= mask - 1;
        let mut exit = 0.0;
        let mut adj_out = model.center_adjacency(v) & !q.mask;
        while adj_out != 0 {
            let u = adj_out.trailing_zeros() as u8;
            adj_out &= adj_out - 1;
            exit += model.center_rate(v, u);
        }
        for i in 0..nb {
            let b = model.branch(i as u8);
            if b.attach == v && q.extents[i] == BranchExtent::Empty {
                exit += b.attach_out;
            }
        }
        if exit == 0.0 {
            continue;
        }
        for (comp, comp_logm) in remainder_components(q, v, model, cache) {
            out.push((comp, (comp_logm - logm).exp() * exit, comp_logm));
        }
    }

    out
}

/// Connected components of `Q \ {v}` for a center vertex `v`, with their
/// log masses: flood fill over the remaining mask, plus one pure-branch
/// component per branch that was attached at `v`.
fn remainder_components(
    q: &DualSet,
    v: u8,
    model: &GraphModel,
    cache: &mut GraphMassCache,
) -> Vec<(DualSet, f64)> {
    let mut out = Vec::new();
    let rest = q.mask & !(1u64 << v);
    let mut unseen = rest;
    while unseen != 0 {
        let start = unseen.trailing_zeros() as u8;
        let mut comp = 1u64 << start;
        loop {
            let mut next = comp;
            let mut m = comp;
            while m != 0 {
                let u = m.trailing_zeros() as u8;
                m &= m - 1;
                next |= model.center_adjacency(u) & rest;
            }
            if next == comp {
                break;
            }
            comp = next;
        }
        unseen &= !comp;
        let mut part = DualSet {
            mask: comp,
            extents: vec![BranchExtent::Empty; q.extents.len()],
        };
        for (i, e) in q.extents.iter().enumerate() {
            let attach = model.branch(i as u8).attach;
            if comp & (1 << attach) != 0 {
                part.extents[i] = *e;
            }
        }
        let logm = log_dual_mass(&part, cache);
        out.push((part, logm));
    }
    // branches attached at the removed vertex detach as pure-branch states
    for (i, e) in q.extents.iter().enumerate() {
        if model.branch(i as u8).attach != v {
            continue;
        }
        let detached = match *e {
            BranchExtent::Prefix(k) => BranchExtent::Segment(0, k),
            BranchExtent::Full => BranchExtent::HalfSegment(0),
            BranchExtent::Empty => continue,
            _ => unreachable!("pure extent while the center is nonempty"),
        };
        let mut part = DualSet {
            mask: 0,
            extents: vec![BranchExtent::Empty; q.extents.len()],
        };
        part.extents[i] = detached;
        let logm = log_dual_mass(&part, cache);
        out.push((part, logm));
    }
    out
}

/// Mass after dropping one branch site, with a resummation fallback when the
/// dropped site dominates.
fn shrink_logm(
    cache: &mut GraphMassCache,
    logm: f64,
    shrunk: &DualSet,
    branch: u8,
    site: u32,
) -> f64 {
    let w = cache.log_site(branch, site);
    if (w - logm).exp() < 0.999 {
        if let Some(v) = log_sub(logm, w) {
            return v;
        }
    }
    log_dual_mass(shrunk, cache)
}

/// Comparison birth-death rates along one branch.
///
/// With `base == None` these are the level dynamics of the maximal states
/// (everything but the deep tail of branch `i`), whose explosion is no
/// faster than the dual's: a lower comparison chain. With `base == Some(n)`
/// they are the segment dynamics `φ([n, p])`, an upper comparison chain; its
/// downward rate at `p == n` vanishes.
#[derive(Debug, Clone)]
pub struct BranchComparisonRates {
    pub branch: u8,
    pub base: Option<u32>,
    /// `(up, down)` per level, starting at `base` (or 0).
    pub levels: Vec<(f64, f64)>,
}

pub fn branch_comparison(
    i: u8,
    base: Option<u32>,
    chain: &GraphChain,
    levels: usize,
) -> BranchComparisonRates {
    let mut cache = GraphMassCache::new(&chain.model, &chain.measure);
    let b = chain.model.branch(i);
    let mut out = Vec::with_capacity(levels);
    match base {
        None => {
            // log μ(G^i_p) = log(1 - tail_i(p+1)) for the normalized measure
            let g_mass = |cache: &mut GraphMassCache, p: u32| -> f64 {
                let tail = cache.log_tail(i, p + 1);
                log_sub(0.0, tail).expect("tail below total mass")
            };
            for p in 0..levels as u32 {
                let here = g_mass(&mut cache, p);
                let up = (g_mass(&mut cache, p + 1) - here).exp() * b.inn(p);
                let down = if p == 0 {
                    0.0
                } else {
                    (g_mass(&mut cache, p - 1) - here).exp() * b.out(p)
                };
                out.push((up, down));
            }
        }
        Some(n) => {
            for p in n..n + levels as u32 {
                let here = cache.log_seg(i, n, p);
                let up = (log_add(here, cache.log_site(i, p + 1)) - here).exp() * b.inn(p);
                let down = if p == n {
                    0.0
                } else {
                    let rest = cache.log_seg(i, n, p - 1);
                    (rest - here).exp() * b.out(p)
                };
                out.push((up, down));
            }
        }
    }
    BranchComparisonRates {
        branch: i,
        base,
        levels: out,
    }
}

/// Reusable graph-dual simulator with per-branch explosion fast-forward.
#[derive(Debug)]
pub struct GraphDualRunner<'a> {
    chain: &'a GraphChain,
    policy: ExplosionPolicy,
    branch_tails: Vec<BranchTail>,
}

#[derive(Debug, Clone)]
struct BranchTail {
    diverges: bool,
    tails: Vec<f64>,
}

const TAIL_SCAN_CAP: usize = 200_000;

impl<'a> GraphDualRunner<'a> {
    pub fn new(chain: &'a GraphChain, policy: ExplosionPolicy) -> Self {
        let threshold = policy.bound_threshold.max(0) as u32;
        let cutoff = policy.tail_time_budget * 1e-6;
        let branch_tails = chain
            .model
            .branches()
            .iter()
            .map(|b| {
                let mut steps = Vec::new();
                let mut converged = false;
                for j in 0..TAIL_SCAN_CAP {
                    let rate = b.inn(threshold + j as u32);
                    if !rate.is_finite() {
                        break;
                    }
                    let dt = 1.0 / rate;
                    steps.push(dt);
                    if dt < cutoff {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return BranchTail {
                        diverges: true,
                        tails: Vec::new(),
                    };
                }
                let mut tails = vec![0.0f64; steps.len()];
                let mut acc = 0.0;
                for (j, &dt) in steps.iter().enumerate().rev() {
                    acc += dt;
                    tails[j] = acc;
                }
                BranchTail {
                    diverges: false,
                    tails,
                }
            })
            .collect();
        Self {
            chain,
            policy,
            branch_tails,
        }
    }

    pub fn policy(&self) -> &ExplosionPolicy {
        &self.policy
    }

    pub fn chain(&self) -> &GraphChain {
        self.chain
    }

    /// Does the tail test certify an explosion of branch `i` at depth `k`?
    pub fn branch_explodes(&self, i: u8, k: u32) -> bool {
        let threshold = self.policy.bound_threshold.max(0) as u32;
        if k < threshold {
            return false;
        }
        let t = &self.branch_tails[i as usize];
        if t.diverges {
            return false;
        }
        let j = ((k - threshold) as usize).min(t.tails.len().saturating_sub(1));
        t.tails.get(j).is_some_and(|&v| v < self.policy.tail_time_budget)
    }

    /// Fast-forward remainder for branch `i` whose prefix ends at depth `k`.
    pub(crate) fn sample_remainder(
        &self,
        cache: &mut GraphMassCache,
        logm: f64,
        i: u8,
        k: u32,
        rng: &mut TrialRng,
    ) -> f64 {
        let delta = self.policy.tail_time_budget;
        let b = self.chain.model.branch(i);
        let mut total = 0.0f64;
        let mut logm = logm;
        let mut n = k;
        for _ in 0..TAIL_SCAN_CAP {
            let grown = log_add(logm, cache.log_site(i, n + 1));
            let rate = (grown - logm).exp() * b.inn(n);
            if !rate.is_finite() {
                break;
            }
            let dt = rng.exponential(rate);
            total += dt;
            if dt < delta {
                break;
            }
            logm = grown;
            n += 1;
        }
        total
    }

    pub fn simulate(
        &self,
        init: DualSet,
        horizon: f64,
        seed: SeedSpec,
    ) -> DualTrajectory<DualSet> {
        let mut rng = TrialRng::new(seed);
        self.simulate_with(init, horizon, &mut rng)
    }

    pub fn simulate_with(
        &self,
        init: DualSet,
        horizon: f64,
        rng: &mut TrialRng,
    ) -> DualTrajectory<DualSet> {
        let model = &self.chain.model;
        debug_assert!(init.is_valid(model), "invalid initial dual set");
        let mut cache = GraphMassCache::new(model, &self.chain.measure);
        let mut steps = vec![DualStep {
            time: 0.0,
            state: init.clone(),
            kind: StepKind::Init,
        }];
        let mut explosions = Vec::new();

        if init.is_whole(model) {
            steps.push(DualStep {
                time: 0.0,
                state: init,
                kind: StepKind::Absorption,
            });
            return DualTrajectory {
                steps,
                explosions,
                absorption_time: Some(0.0),
                terminal: DualTerminal::Absorbed,
            };
        }

        let mut state = init;
        let mut logm = log_dual_mass(&state, &mut cache);
        let mut t = 0.0f64;
        let mut excursion_jumps = 0usize;
        let mut pending = self.explosion_queue(&state);

        let terminal = 'outer: loop {
            while let Some(i) = pending.pop() {
                let ext = state.extents[i as usize];
                let Some(k) = ext.outward_end() else {
                    continue; // the extent changed since it was queued
                };
                if !self.branch_explodes(i, k) {
                    continue;
                }
                let remainder = self.sample_remainder(&mut cache, logm, i, k, rng);
                let t_expl = t + remainder;
                if t_expl > horizon {
                    break 'outer DualTerminal::HorizonReached;
                }
                let before = state.stratum();
                state.extents[i as usize] = ext.exploded();
                t = t_expl;
                logm = log_dual_mass(&state, &mut cache);
                excursion_jumps = 0;
                explosions.push(ExplosionRecord {
                    time: t,
                    bound: ExplodedBound::Branch(i),
                    stratum_before: before,
                    stratum_after: state.stratum(),
                });
                steps.push(DualStep {
                    time: t,
                    state: state.clone(),
                    kind: StepKind::Explosion,
                });
                if state.is_whole(model) {
                    steps.push(DualStep {
                        time: t,
                        state: state.clone(),
                        kind: StepKind::Absorption,
                    });
                    break 'outer DualTerminal::Absorbed;
                }
            }

            let moves = enumerate_moves(&state, model, &mut cache, logm);
            let total: f64 = moves.iter().map(|&(_, r, _)| r).sum();
            if total <= 0.0 {
                steps.push(DualStep {
                    time: t,
                    state: state.clone(),
                    kind: StepKind::Absorption,
                });
                break DualTerminal::Absorbed;
            }
            let dt = rng.exponential(total);
            if !total.is_finite() || dt <= 0.0 {
                break DualTerminal::NoExplosionDetected;
            }
            if t + dt > horizon {
                break DualTerminal::HorizonReached;
            }
            t += dt;

            let mut target = rng.uniform() * total;
            let mut idx = moves.len() - 1;
            for (j, m) in moves.iter().enumerate() {
                if target < m.1 {
                    idx = j;
                    break;
                }
                target -= m.1;
            }
            let (next, _, new_logm) = moves.into_iter().nth(idx).expect("chosen move");
            debug_assert!(next.is_valid(model), "transition left the state space");

            // any outward end that moved past the threshold queues its test
            for (i, (e_new, e_old)) in next.extents.iter().zip(&state.extents).enumerate() {
                if e_new == e_old {
                    continue;
                }
                if let Some(k) = e_new.outward_end() {
                    if self.branch_explodes(i as u8, k) {
                        pending.push(i as u8);
                    }
                }
            }
            state = next;
            logm = new_logm;
            steps.push(DualStep {
                time: t,
                state: state.clone(),
                kind: StepKind::Jump,
            });
            excursion_jumps += 1;
            if excursion_jumps > self.policy.jump_budget {
                break DualTerminal::NoExplosionDetected;
            }
        };

        let absorption_time = (terminal == DualTerminal::Absorbed).then_some(t);
        DualTrajectory {
            steps,
            explosions,
            absorption_time,
            terminal,
        }
    }

    fn explosion_queue(&self, state: &DualSet) -> Vec<u8> {
        let mut pending = Vec::new();
        for (i, e) in state.extents.iter().enumerate() {
            if let Some(k) = e.outward_end() {
                if self.branch_explodes(i as u8, k) {
                    pending.push(i as u8);
                }
            }
        }
        pending
    }
}

/// One-shot convenience wrapper around [`GraphDualRunner`].
pub fn simulate_dual_graph(
    chain: &GraphChain,
    init: DualSet,
    horizon: f64,
    policy: ExplosionPolicy,
    seed: SeedSpec,
) -> DualTrajectory<DualSet> {
    GraphDualRunner::new(chain, policy).simulate(init, horizon, seed)
}

/// CSV dump of a graph dual trajectory: `time,set,stratum,event`.
pub fn write_graph_dual_csv<W: Write>(
    traj: &DualTrajectory<DualSet>,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "# sstlab dual-trajectory v1")?;
    writeln!(w, "time,set,stratum,event")?;
    for s in &traj.steps {
        let kind = match s.kind {
            StepKind::Init => "init",
            StepKind::Jump => "jump",
            StepKind::Explosion => "explosion",
            StepKind::Absorption => "absorption",
        };
        writeln!(w, "{},{},{},{}", s.time, s.state.encode(), s.state.stratum(), kind)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::{compute_center, BDRates, BranchRates, RawGraphSpec, RawRay};

    fn star(bases: [BranchKind; 3]) -> GraphChain {
        let raw = RawGraphSpec {
            vertices: vec!["hub".into()],
            edges: vec![],
            rays: bases
                .iter()
                .map(|kind| RawRay {
                    attach: 0,
                    attach_out: 1.0,
                    attach_in: 1.0,
                    rates: BranchRates::new(match kind {
                        BranchKind::Fast => BDRates::exponential(2.0),
                        BranchKind::Slow => BDRates::uniform_birth(1.0, 2.0),
                    }),
                })
                .collect(),
        };
        GraphChain::new(compute_center(&raw).unwrap(), 64).unwrap()
    }

    #[derive(Clone, Copy)]
    enum BranchKind {
        Fast,
        Slow,
    }

    use BranchKind::*;

    #[test]
    fn singleton_center_only_grows() {
        let chain = star([Fast, Fast, Fast]);
        let q = DualSet::center_vertex(0, 3);
        let moves = dual_transitions(&q, &chain).unwrap();
        assert_eq!(moves.len(), 3);
        for (s, _) in &moves {
            assert_eq!(s.mask, 1);
            assert_eq!(
                s.extents.iter().filter(|e| **e == BranchExtent::Prefix(0)).count(),
                1
            );
        }
    }

    #[test]
    fn removal_split_rates_sum_correctly() {
        let chain = star([Fast, Fast, Fast]);
        let mut q = DualSet::center_vertex(0, 3);
        q.extents[0] = BranchExtent::Prefix(0);
        let moves = dual_transitions(&q, &chain).unwrap();
        // removing the hub leaves the single component φ_0([0,0])
        let split: Vec<_> = moves
            .iter()
            .filter(|(s, _)| s.mask == 0)
            .collect();
        assert_eq!(split.len(), 1);
        let (comp, rate) = split[0];
        assert_eq!(comp.extents[0], BranchExtent::Segment(0, 0));

        // rate = (μ(comp)/μ(Q)) Σ_{q∉Q} L_{hub,q}; the hub exits toward the
        // two untouched branch roots at unit rate each
        let mut cache = GraphMassCache::new(&chain.model, &chain.measure);
        let logq = log_dual_mass(&q, &mut cache);
        let logc = log_dual_mass(comp, &mut cache);
        let want = (logc - logq).exp() * 2.0;
        assert!((rate - want).abs() < 1e-12 * want);
    }

    #[test]
    fn fan_out_bound_on_star() {
        // transitions from any reachable set on a 3-branch star with a
        // single center vertex: at most N + |C| growth moves, N branch-tip
        // removals, and one component per branch when the hub is removed
        let chain = star([Fast, Fast, Fast]);
        let mut frontier = vec![DualSet::center_vertex(0, 3)];
        let mut seen = std::collections::HashSet::new();
        let mut checked = 0;
        while let Some(q) = frontier.pop() {
            if !seen.insert(q.clone()) {
                continue;
            }
            let moves = dual_transitions(&q, &chain).unwrap();
            assert!(moves.len() <= 8, "{} moves from {}", moves.len(), q.encode());
            checked += 1;
            for (s, _) in moves {
                let deep = s.extents.iter().any(|e| match e {
                    BranchExtent::Prefix(k) => *k > 4,
                    BranchExtent::Segment(_, b) => *b > 4,
                    _ => false,
                });
                if !deep {
                    frontier.push(s);
                }
            }
        }
        assert!(checked > 50, "swept {checked} states");
    }

    #[test]
    fn transitions_preserve_validity() {
        let chain = star([Fast, Slow, Fast]);
        let mut rng = TrialRng::new(SeedSpec::new(500, 0));
        let mut q = DualSet::center_vertex(0, 3);
        for _ in 0..2000 {
            let moves = dual_transitions(&q, &chain).unwrap();
            assert!(!moves.is_empty());
            for (s, r) in &moves {
                assert!(s.is_valid(&chain.model), "invalid target {}", s.encode());
                assert!(*r > 0.0);
            }
            let idx = (rng.uniform() * moves.len() as f64) as usize;
            q = moves[idx.min(moves.len() - 1)].0.clone();
        }
    }

    #[test]
    fn lower_comparison_matches_maximal_states() {
        let chain = star([Fast, Fast, Fast]);
        let cmp = branch_comparison(1, None, &chain, 8);
        for p in 1..7u32 {
            // G^i_p: full center, other branches Full, branch 1 Prefix(p)
            let mut g = DualSet::whole(&chain.model);
            g.extents[1] = BranchExtent::Prefix(p);
            let moves = dual_transitions(&g, &chain).unwrap();
            let up = moves
                .iter()
                .find(|(s, _)| s.extents[1] == BranchExtent::Prefix(p + 1))
                .map(|&(_, r)| r)
                .unwrap();
            let down = moves
                .iter()
                .find(|(s, _)| s.extents[1] == BranchExtent::Prefix(p - 1))
                .map(|&(_, r)| r)
                .unwrap();
            let (want_up, want_down) = cmp.levels[p as usize];
            assert!((up - want_up).abs() < 1e-11 * want_up.max(1.0), "{up} vs {want_up}");
            assert!(
                (down - want_down).abs() < 1e-11 * want_down.max(1.0),
                "{down} vs {want_down}"
            );
        }
    }

    #[test]
    fn segment_comparison_matches_segment_states() {
        let chain = star([Fast, Fast, Fast]);
        let n = 2u32;
        let cmp = branch_comparison(0, Some(n), &chain, 6);
        assert_eq!(cmp.levels[0].1, 0.0, "segment cannot shrink past its base");
        for (j, &(want_up, want_down)) in cmp.levels.iter().enumerate() {
            let p = n + j as u32;
            let mut q = DualSet {
                mask: 0,
                extents: vec![BranchExtent::Empty; 3],
            };
            q.extents[0] = BranchExtent::Segment(n, p);
            let moves = dual_transitions(&q, &chain).unwrap();
            let up = moves
                .iter()
                .find(|(s, _)| s.extents[0] == BranchExtent::Segment(n, p + 1))
                .map(|&(_, r)| r)
                .unwrap();
            assert!((up - want_up).abs() < 1e-11 * want_up.max(1.0));
            let down = moves
                .iter()
                .find(|(s, _)| s.extents[0] == BranchExtent::Segment(n, p.saturating_sub(1)))
                .map(|&(_, r)| r);
            if p == n {
                assert!(down.is_none());
                assert_eq!(want_down, 0.0);
            } else {
                let down = down.unwrap();
                assert!((down - want_down).abs() < 1e-11 * want_down.max(1.0));
            }
        }
    }

    #[test]
    fn lower_comparison_dominated_by_dual_growth() {
        // any state whose branch-i tip sits at p grows along i at least as
        // fast as the lower comparison chain
        let chain = star([Fast, Slow, Fast]);
        let cmp = branch_comparison(0, None, &chain, 12);
        let mut rng = TrialRng::new(SeedSpec::new(501, 0));
        let mut q = DualSet::center_vertex(0, 3);
        for _ in 0..3000 {
            let moves = dual_transitions(&q, &chain).unwrap();
            if let BranchExtent::Prefix(p) = q.extents[0] {
                if (p as usize) < cmp.levels.len() {
                    let up = moves
                        .iter()
                        .find(|(s, _)| s.extents[0] == BranchExtent::Prefix(p + 1))
                        .map(|&(_, r)| r)
                        .expect("growth move exists");
                    let (want_up, _) = cmp.levels[p as usize];
                    assert!(up >= want_up - 1e-10 * want_up, "{up} < {want_up}");
                }
            }
            let idx = (rng.uniform() * moves.len() as f64) as usize;
            q = moves[idx.min(moves.len() - 1)].0.clone();
        }
    }

    #[test]
    fn whole_graph_is_absorbing() {
        let chain = star([Fast, Fast, Fast]);
        let q = DualSet::whole(&chain.model);
        assert!(matches!(
            dual_transitions(&q, &chain),
            Err(DualError::AbsorbingState)
        ));
        let traj = simulate_dual_graph(
            &chain,
            q,
            10.0,
            ExplosionPolicy::default(),
            SeedSpec::new(1, 0),
        );
        assert_eq!(traj.absorption_time, Some(0.0));
    }

    #[test]
    fn convergent_star_absorbs() {
        let chain = star([Fast, Fast, Fast]);
        let runner = GraphDualRunner::new(&chain, ExplosionPolicy::with_threshold(40));
        let mut absorbed = 0;
        for trial in 0..200u64 {
            let traj = runner.simulate(
                DualSet::center_vertex(0, 3),
                1000.0,
                SeedSpec::new(90, trial),
            );
            if traj.terminal == DualTerminal::Absorbed {
                absorbed += 1;
                // each branch explodes at least once; a branch dropped by a
                // whole-branch removal may explode again
                assert!(traj.explosions.len() >= 3);
            }
        }
        assert!(absorbed >= 198, "absorbed {absorbed}/200");
    }

    #[test]
    fn divergent_branch_never_reaches_infinity() {
        let chain = star([Fast, Slow, Fast]);
        let runner = GraphDualRunner::new(&chain, ExplosionPolicy::with_threshold(40));
        for trial in 0..60u64 {
            let traj = runner.simulate(
                DualSet::center_vertex(0, 3),
                200.0,
                SeedSpec::new(91, trial),
            );
            assert_ne!(traj.terminal, DualTerminal::Absorbed);
            for step in &traj.steps {
                assert!(
                    !step.state.extents[1].has_infinity(),
                    "slow branch reached infinity"
                );
            }
        }
    }

    #[test]
    fn strata_move_as_recorded() {
        let chain = star([Fast, Fast, Fast]);
        let runner = GraphDualRunner::new(&chain, ExplosionPolicy::with_threshold(32));
        for trial in 0..40u64 {
            let traj = runner.simulate(
                DualSet::center_vertex(0, 3),
                1000.0,
                SeedSpec::new(92, trial),
            );
            let mut prev = 0u8;
            for step in &traj.steps {
                let s = step.state.stratum();
                match step.kind {
                    StepKind::Explosion => assert_eq!(s, prev + 1),
                    StepKind::Init => {}
                    // a whole-branch removal may drop the stratum; it never
                    // rises outside an explosion
                    _ => assert!(s <= prev),
                }
                prev = s;
            }
        }
    }

    #[test]
    fn encode_shapes() {
        let chain = star([Fast, Fast, Fast]);
        let mut q = DualSet::whole(&chain.model);
        q.extents[1] = BranchExtent::Prefix(3);
        assert_eq!(q.encode(), "C:1;B0:F;B1:P3;B2:F");
        let mut p = DualSet {
            mask: 0,
            extents: vec![BranchExtent::Empty; 3],
        };
        p.extents[2] = BranchExtent::Segment(2, 5);
        assert_eq!(p.encode(), "C:0;B0:-;B1:-;B2:S2-5");
        p.extents[2] = BranchExtent::HalfSegment(1);
        assert_eq!(p.encode(), "C:0;B0:-;B1:-;B2:H1");
    }
}
