//! Graphs with a finite center and finitely many infinite branches.
//!
//! A raw description lists explicit vertices with rated edges plus "rays",
//! infinite half-lines of parametric rates attached to explicit vertices.
//! [`compute_center`] splits this into the center (the convex hull of all
//! vertices of degree other than two) and the branches, each isomorphic to
//! `N` and indexed outward from its center attach point.

use std::collections::HashMap;

use super::rates::BDRates;
use super::StateSpaceError;
use crate::logspace::{log_add, log_sum_exp, LOG_ZERO};

const TAIL_CONSECUTIVE: usize = 10;
const LOG_TAIL_REL_EPS: f64 = -34.538776394910684; // ln(1e-15)
const TAIL_CAP: usize = 1_000_000;
const REVERSIBILITY_TOL: f64 = 1e-9;

/// A vertex of the compactified graph, excluding the points at infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Vertex {
    Center(u8),
    Branch { branch: u8, depth: u32 },
}

/// Rate sequence along one infinite branch: `out(k)` is the rate of
/// `φ(k) -> φ(k+1)` (away from the center), `inn(k)` the rate of
/// `φ(k+1) -> φ(k)`. Backed by a birth-death family read on the half line.
#[derive(Debug, Clone)]
pub struct BranchRates {
    inner: BDRates,
}

impl BranchRates {
    pub fn new(inner: BDRates) -> Self {
        Self { inner }
    }

    pub fn out(&self, k: u32) -> f64 {
        self.inner.birth(k as i64).expect("half-line support")
    }

    pub fn inn(&self, k: u32) -> f64 {
        self.inner.death(k as i64 + 1).expect("half-line support")
    }

    pub fn log_out(&self, k: u32) -> f64 {
        self.inner.log_birth(k as i64).expect("half-line support")
    }

    pub fn log_inn(&self, k: u32) -> f64 {
        self.inner.log_death(k as i64 + 1).expect("half-line support")
    }
}

/// One infinite branch after center extraction. `prefix_out`/`prefix_in`
/// carry the rates of any explicit degree-2 chain that was absorbed into the
/// branch; beyond them the parametric ray takes over.
#[derive(Debug, Clone)]
pub struct Branch {
    pub attach: u8,
    pub attach_out: f64,
    pub attach_in: f64,
    prefix_out: Vec<f64>,
    prefix_in: Vec<f64>,
    ray: BranchRates,
}

impl Branch {
    /// `L_{φ(k), φ(k+1)}`.
    pub fn out(&self, k: u32) -> f64 {
        let m = self.prefix_out.len() as u32;
        if k < m {
            self.prefix_out[k as usize]
        } else {
            self.ray.out(k - m)
        }
    }

    /// `L_{φ(k+1), φ(k)}`.
    pub fn inn(&self, k: u32) -> f64 {
        let m = self.prefix_in.len() as u32;
        if k < m {
            self.prefix_in[k as usize]
        } else {
            self.ray.inn(k - m)
        }
    }

    pub fn log_out(&self, k: u32) -> f64 {
        let m = self.prefix_out.len() as u32;
        if k < m {
            self.prefix_out[k as usize].ln()
        } else {
            self.ray.log_out(k - m)
        }
    }

    pub fn log_inn(&self, k: u32) -> f64 {
        let m = self.prefix_in.len() as u32;
        if k < m {
            self.prefix_in[k as usize].ln()
        } else {
            self.ray.log_inn(k - m)
        }
    }
}

/// An explicit rated edge of a raw graph description, symmetric in adjacency
/// (both directed rates must be positive for a reversible chain).
#[derive(Debug, Clone)]
pub struct RawEdge {
    pub u: usize,
    pub v: usize,
    pub rate_uv: f64,
    pub rate_vu: f64,
}

/// An infinite half-line of states attached to an explicit vertex.
#[derive(Debug, Clone)]
pub struct RawRay {
    pub attach: usize,
    pub attach_out: f64,
    pub attach_in: f64,
    pub rates: BranchRates,
}

/// Raw graph description before center extraction.
#[derive(Debug, Clone)]
pub struct RawGraphSpec {
    pub vertices: Vec<String>,
    pub edges: Vec<RawEdge>,
    pub rays: Vec<RawRay>,
}

/// Validated model: finite center with rated edges plus indexed branches.
#[derive(Debug, Clone)]
pub struct GraphModel {
    center_names: Vec<String>,
    center_rate: Vec<f64>,
    center_adj: Vec<u64>,
    branches: Vec<Branch>,
}

impl GraphModel {
    pub fn center_count(&self) -> usize {
        self.center_names.len()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn center_name(&self, c: u8) -> &str {
        &self.center_names[c as usize]
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, i: u8) -> &Branch {
        &self.branches[i as usize]
    }

    /// Bitmask of center vertices adjacent to center vertex `c`.
    pub fn center_adjacency(&self, c: u8) -> u64 {
        self.center_adj[c as usize]
    }

    pub fn center_rate(&self, u: u8, v: u8) -> f64 {
        self.center_rate[u as usize * self.center_count() + v as usize]
    }

    /// Jump rate `L_{x,y}`; zero when `x` and `y` are not adjacent.
    pub fn rate(&self, x: Vertex, y: Vertex) -> f64 {
        match (x, y) {
            (Vertex::Center(u), Vertex::Center(v)) => {
                if u == v {
                    0.0
                } else {
                    self.center_rate(u, v)
                }
            }
            (Vertex::Center(u), Vertex::Branch { branch, depth: 0 }) => {
                let b = self.branch(branch);
                if b.attach == u {
                    b.attach_out
                } else {
                    0.0
                }
            }
            (Vertex::Branch { branch, depth: 0 }, Vertex::Center(u)) => {
                let b = self.branch(branch);
                if b.attach == u {
                    b.attach_in
                } else {
                    0.0
                }
            }
            (Vertex::Branch { branch: i, depth: k }, Vertex::Branch { branch: j, depth: l })
                if i == j =>
            {
                if l == k + 1 {
                    self.branch(i).out(k)
                } else if k == l + 1 {
                    self.branch(i).inn(l)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }

    pub fn neighbors(&self, x: Vertex) -> Vec<Vertex> {
        let mut out = Vec::new();
        match x {
            Vertex::Center(u) => {
                let mut adj = self.center_adj[u as usize];
                while adj != 0 {
                    let v = adj.trailing_zeros() as u8;
                    adj &= adj - 1;
                    out.push(Vertex::Center(v));
                }
                for (i, b) in self.branches.iter().enumerate() {
                    if b.attach == u {
                        out.push(Vertex::Branch {
                            branch: i as u8,
                            depth: 0,
                        });
                    }
                }
            }
            Vertex::Branch { branch, depth } => {
                if depth == 0 {
                    out.push(Vertex::Center(self.branch(branch).attach));
                } else {
                    out.push(Vertex::Branch {
                        branch,
                        depth: depth - 1,
                    });
                }
                out.push(Vertex::Branch {
                    branch,
                    depth: depth + 1,
                });
            }
        }
        out
    }

    /// Total exit rate `L_x`.
    pub fn exit_rate(&self, x: Vertex) -> f64 {
        self.neighbors(x).iter().map(|&y| self.rate(x, y)).sum()
    }
}

/// Splits a raw description into center and branches.
///
/// The center is the convex hull of all vertices of degree other than two;
/// every explicit degree-2 chain leading to a ray is absorbed into that
/// ray's branch. Fails with `EmptyCenter` when every vertex has degree two
/// (the graph is the bi-infinite line and belongs to the interval dual).
pub fn compute_center(raw: &RawGraphSpec) -> Result<GraphModel, StateSpaceError> {
    let n = raw.vertices.len();
    if n == 0 {
        return Err(StateSpaceError::InvalidGraph("no vertices".into()));
    }
    let mut adj: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n];
    for e in &raw.edges {
        if e.u >= n || e.v >= n || e.u == e.v {
            return Err(StateSpaceError::InvalidGraph(format!(
                "bad edge ({}, {})",
                e.u, e.v
            )));
        }
        if !(e.rate_uv > 0.0) || !(e.rate_vu > 0.0) {
            return Err(StateSpaceError::NonPositiveRate {
                kind: "edge",
                n: e.u as i64,
                value: e.rate_uv.min(e.rate_vu),
            });
        }
        if adj[e.u].iter().any(|&(w, _, _)| w == e.v) {
            return Err(StateSpaceError::InvalidGraph(format!(
                "duplicate edge ({}, {}); the graph must be simple",
                e.u, e.v
            )));
        }
        adj[e.u].push((e.v, e.rate_uv, e.rate_vu));
        adj[e.v].push((e.u, e.rate_vu, e.rate_uv));
    }
    let mut rays_at: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (ri, ray) in raw.rays.iter().enumerate() {
        if ray.attach >= n {
            return Err(StateSpaceError::InvalidGraph(format!(
                "ray attached to unknown vertex {}",
                ray.attach
            )));
        }
        if !(ray.attach_out > 0.0) || !(ray.attach_in > 0.0) {
            return Err(StateSpaceError::NonPositiveRate {
                kind: "attach edge",
                n: ray.attach as i64,
                value: ray.attach_out.min(ray.attach_in),
            });
        }
        rays_at[ray.attach].push(ri);
    }
    let degree = |v: usize| adj[v].len() + rays_at[v].len();

    if (0..n).all(|v| degree(v) == 2) {
        return Err(StateSpaceError::EmptyCenter);
    }

    // Walk inward from each ray through the degree-2 chain until a hub.
    // `owner[v]` marks explicit vertices absorbed into a branch.
    let mut owner: Vec<Option<usize>> = vec![None; n];
    // Per ray: ordered chain from the hub outward to the ray attach vertex.
    let mut chains: Vec<Vec<usize>> = vec![Vec::new(); raw.rays.len()];
    for (ri, ray) in raw.rays.iter().enumerate() {
        let mut chain_in = Vec::new(); // attach first, hub-adjacent last
        let mut cur = ray.attach;
        let mut used_ray = false;
        loop {
            if degree(cur) != 2 {
                break;
            }
            if owner[cur].is_some() {
                return Err(StateSpaceError::InvalidGraph(format!(
                    "vertex {} lies between two rays; the graph has a line component",
                    raw.vertices[cur]
                )));
            }
            owner[cur] = Some(ri);
            chain_in.push(cur);
            // the two incident half-edges of cur: one is where we came from
            let nexts: Vec<usize> = adj[cur]
                .iter()
                .map(|&(w, _, _)| w)
                .filter(|&w| Some(w) != chain_in.get(chain_in.len().wrapping_sub(2)).copied())
                .collect();
            if cur == ray.attach && !used_ray {
                used_ray = true;
            } else if !rays_at[cur].is_empty() {
                return Err(StateSpaceError::InvalidGraph(format!(
                    "degree-2 vertex {} joins two infinite rays",
                    raw.vertices[cur]
                )));
            }
            match nexts.len() {
                0 => {
                    return Err(StateSpaceError::InvalidGraph(format!(
                        "degree-2 vertex {} joins two infinite rays",
                        raw.vertices[cur]
                    )))
                }
                1 => cur = nexts[0],
                _ => unreachable!("degree-2 vertex with more than one onward edge"),
            }
        }
        chain_in.reverse();
        chains[ri] = chain_in;
    }

    let center: Vec<usize> = (0..n).filter(|&v| owner[v].is_none()).collect();
    if center.is_empty() {
        return Err(StateSpaceError::EmptyCenter);
    }
    if center.len() > 64 {
        return Err(StateSpaceError::InvalidGraph(format!(
            "center has {} vertices; at most 64 are supported",
            center.len()
        )));
    }
    let center_index: HashMap<usize, u8> = center
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i as u8))
        .collect();

    let c = center.len();
    let mut center_rate = vec![0.0f64; c * c];
    let mut center_adj = vec![0u64; c];
    for e in &raw.edges {
        if let (Some(&u), Some(&v)) = (center_index.get(&e.u), center_index.get(&e.v)) {
            center_rate[u as usize * c + v as usize] = e.rate_uv;
            center_rate[v as usize * c + u as usize] = e.rate_vu;
            center_adj[u as usize] |= 1 << v;
            center_adj[v as usize] |= 1 << u;
        }
    }

    let edge_rates = |a: usize, b: usize| -> (f64, f64) {
        adj[a]
            .iter()
            .find(|&&(w, _, _)| w == b)
            .map(|&(_, out, inn)| (out, inn))
            .expect("edge exists")
    };

    let mut branches = Vec::with_capacity(raw.rays.len());
    for (ri, ray) in raw.rays.iter().enumerate() {
        let chain = &chains[ri];
        let (attach_vertex, attach_out, attach_in, prefix_out, prefix_in);
        if chain.is_empty() {
            attach_vertex = ray.attach;
            attach_out = ray.attach_out;
            attach_in = ray.attach_in;
            prefix_out = Vec::new();
            prefix_in = Vec::new();
        } else {
            // hub adjacent to chain[0]
            let hub = adj[chain[0]]
                .iter()
                .map(|&(w, _, _)| w)
                .find(|&w| owner[w].is_none())
                .ok_or_else(|| {
                    StateSpaceError::InvalidGraph(format!(
                        "branch chain through {} never reaches the center",
                        raw.vertices[chain[0]]
                    ))
                })?;
            attach_vertex = hub;
            let (out0, in0) = edge_rates(hub, chain[0]);
            attach_out = out0;
            attach_in = in0;
            let mut po = Vec::with_capacity(chain.len());
            let mut pi = Vec::with_capacity(chain.len());
            for w in chain.windows(2) {
                let (o, i) = edge_rates(w[0], w[1]);
                po.push(o);
                pi.push(i);
            }
            po.push(ray.attach_out);
            pi.push(ray.attach_in);
            prefix_out = po;
            prefix_in = pi;
        }
        let attach = *center_index.get(&attach_vertex).ok_or_else(|| {
            StateSpaceError::InvalidGraph("ray attaches inside another branch".into())
        })?;
        branches.push(Branch {
            attach,
            attach_out,
            attach_in,
            prefix_out,
            prefix_in,
            ray: ray.rates.clone(),
        });
    }

    let model = GraphModel {
        center_names: center.iter().map(|&v| raw.vertices[v].clone()).collect(),
        center_rate,
        center_adj,
        branches,
    };
    validate_connectivity(&model)?;
    validate_reversibility(&model)?;
    Ok(model)
}

fn validate_connectivity(model: &GraphModel) -> Result<(), StateSpaceError> {
    let c = model.center_count();
    let mut seen = 1u64;
    let mut frontier = 1u64;
    while frontier != 0 {
        let mut next = 0u64;
        let mut f = frontier;
        while f != 0 {
            let v = f.trailing_zeros() as usize;
            f &= f - 1;
            next |= model.center_adj[v];
        }
        frontier = next & !seen;
        seen |= next;
    }
    let all = if c == 64 { u64::MAX } else { (1u64 << c) - 1 };
    if seen & all != all {
        return Err(StateSpaceError::InvalidGraph(
            "center is not connected".into(),
        ));
    }
    Ok(())
}

/// Propagates `log μ` over a spanning tree of the center and checks every
/// off-tree edge for detailed balance; a cycle whose rate-ratio product is
/// not 1 shows up here.
fn validate_reversibility(model: &GraphModel) -> Result<(), StateSpaceError> {
    let log_center = center_log_weights(model);
    let c = model.center_count();
    for u in 0..c {
        for v in (u + 1)..c {
            let luv = model.center_rate(u as u8, v as u8);
            if luv == 0.0 {
                continue;
            }
            let lvu = model.center_rate(v as u8, u as u8);
            let delta = (log_center[u] + luv.ln()) - (log_center[v] + lvu.ln());
            let deviation = delta.exp_m1().abs();
            if deviation > REVERSIBILITY_TOL {
                return Err(StateSpaceError::InconsistentReversibility {
                    u: model.center_name(u as u8).to_owned(),
                    v: model.center_name(v as u8).to_owned(),
                    deviation,
                });
            }
        }
    }
    Ok(())
}

/// Unnormalized `log μ` on the center, anchored at vertex 0, propagated over
/// a BFS tree by `μ(v) = μ(u) L_{u,v} / L_{v,u}`.
fn center_log_weights(model: &GraphModel) -> Vec<f64> {
    let c = model.center_count();
    let mut log_w = vec![f64::NAN; c];
    log_w[0] = 0.0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        let mut adj = model.center_adj[u];
        while adj != 0 {
            let v = adj.trailing_zeros() as usize;
            adj &= adj - 1;
            if log_w[v].is_nan() {
                log_w[v] = log_w[u] + model.center_rate(u as u8, v as u8).ln()
                    - model.center_rate(v as u8, u as u8).ln();
                queue.push_back(v);
            }
        }
    }
    log_w
}

/// Normalized stationary measure of a graph model: center weights, branch
/// site weights up to a working depth, prefix cumulative masses and branch
/// tails.
#[derive(Debug, Clone)]
pub struct GraphMeasure {
    depth: u32,
    log_center: Vec<f64>,
    /// `log μ(φ_i(k))` for `k <= depth`.
    log_branch: Vec<Vec<f64>>,
    /// `log μ(φ_i([0, k]))` for `k <= depth`.
    log_branch_cum: Vec<Vec<f64>>,
    /// `log μ(φ_i([k, ∞)))` for `k <= depth + 1`.
    log_branch_tail: Vec<Vec<f64>>,
}

/// Builds the normalized measure from detailed balance, summing each branch
/// tail adaptively. Detailed balance holds on every edge by construction;
/// consistency around center cycles was already checked at validation.
pub fn mu_graph(model: &GraphModel, depth: u32) -> Result<GraphMeasure, StateSpaceError> {
    let log_center_u = center_log_weights(model);
    let mut log_branch = Vec::with_capacity(model.branch_count());
    let mut tails = Vec::with_capacity(model.branch_count());
    for b in model.branches() {
        let mut w = Vec::with_capacity(depth as usize + 1);
        let mut cur =
            log_center_u[b.attach as usize] + b.attach_out.ln() - b.attach_in.ln();
        w.push(cur);
        for k in 0..depth {
            cur += b.log_out(k) - b.log_inn(k);
            w.push(cur);
        }
        // tail beyond the working depth
        let mut total = LOG_ZERO;
        let mut term = cur;
        let mut k = depth;
        let mut quiet = 0usize;
        let mut steps = 0usize;
        loop {
            term += b.log_out(k) - b.log_inn(k);
            k += 1;
            total = log_add(total, term);
            if term - total < LOG_TAIL_REL_EPS {
                quiet += 1;
                if quiet >= TAIL_CONSECUTIVE {
                    break;
                }
            } else {
                quiet = 0;
            }
            steps += 1;
            if steps >= TAIL_CAP {
                return Err(StateSpaceError::NonSummableTail {
                    side: "branch",
                    terms: steps,
                    ratio: 1.0,
                });
            }
        }
        log_branch.push(w);
        tails.push(total);
    }

    let mut parts = log_center_u.clone();
    for (w, t) in log_branch.iter().zip(&tails) {
        parts.extend_from_slice(w);
        parts.push(*t);
    }
    let log_norm = log_sum_exp(&parts);

    let log_center: Vec<f64> = log_center_u.iter().map(|w| w - log_norm).collect();
    let mut cums = Vec::with_capacity(model.branch_count());
    let mut tail_arrays = Vec::with_capacity(model.branch_count());
    for (w, deep_tail) in log_branch.iter_mut().zip(&tails) {
        for x in w.iter_mut() {
            *x -= log_norm;
        }
        let deep = deep_tail - log_norm;
        let mut cum = Vec::with_capacity(w.len());
        let mut acc = LOG_ZERO;
        for &x in w.iter() {
            acc = log_add(acc, x);
            cum.push(acc);
        }
        // tail[k] = mass of φ([k, ∞)); built backwards from the deep tail
        let mut tail = vec![0.0f64; w.len() + 1];
        tail[w.len()] = deep;
        for k in (0..w.len()).rev() {
            tail[k] = log_add(tail[k + 1], w[k]);
        }
        cums.push(cum);
        tail_arrays.push(tail);
    }

    Ok(GraphMeasure {
        depth,
        log_center,
        log_branch: log_branch.clone(),
        log_branch_cum: cums,
        log_branch_tail: tail_arrays,
    })
}

impl GraphMeasure {
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn log_center(&self, c: u8) -> f64 {
        self.log_center[c as usize]
    }

    /// `log μ(x)`; `None` for branch sites beyond the working depth.
    pub fn log_vertex(&self, x: Vertex) -> Option<f64> {
        match x {
            Vertex::Center(c) => Some(self.log_center[c as usize]),
            Vertex::Branch { branch, depth } => self.log_branch[branch as usize]
                .get(depth as usize)
                .copied(),
        }
    }

    /// `log μ(φ_i([0, k]))`.
    pub fn log_prefix(&self, i: u8, k: u32) -> Option<f64> {
        self.log_branch_cum[i as usize].get(k as usize).copied()
    }

    /// `log μ(φ_i([k, ∞)))`, including the tail beyond the working depth.
    pub fn log_branch_tail(&self, i: u8, k: u32) -> Option<f64> {
        self.log_branch_tail[i as usize].get(k as usize).copied()
    }

    /// `log μ(φ_i([a, b]))` by direct summation.
    pub fn log_branch_range(&self, i: u8, a: u32, b: u32) -> Option<f64> {
        let w = &self.log_branch[i as usize];
        if b as usize >= w.len() || a > b {
            return None;
        }
        Some(log_sum_exp(&w[a as usize..=b as usize]))
    }

    /// Mass of the whole compactified graph; 0 in log space once normalized.
    pub fn log_total(&self) -> f64 {
        let mut t = log_sum_exp(&self.log_center);
        for i in 0..self.log_branch.len() {
            t = log_add(t, self.log_branch_tail[i][0]);
        }
        t
    }
}

/// A validated graph chain: model plus its stationary measure.
#[derive(Debug, Clone)]
pub struct GraphChain {
    pub model: GraphModel,
    pub measure: GraphMeasure,
}

impl GraphChain {
    pub fn new(model: GraphModel, depth: u32) -> Result<Self, StateSpaceError> {
        let measure = mu_graph(&model, depth)?;
        Ok(Self { model, measure })
    }
}

/// Per-trial growable view of a [`GraphMeasure`]: extends branch weights
/// past the working depth on demand. Owned by one simulation at a time.
#[derive(Debug)]
pub struct GraphMassCache<'a> {
    model: &'a GraphModel,
    measure: &'a GraphMeasure,
    ext: Vec<Vec<f64>>,
    tail_memo: Vec<HashMap<u32, f64>>,
}

impl<'a> GraphMassCache<'a> {
    pub fn new(model: &'a GraphModel, measure: &'a GraphMeasure) -> Self {
        Self {
            model,
            measure,
            ext: vec![Vec::new(); model.branch_count()],
            tail_memo: vec![HashMap::new(); model.branch_count()],
        }
    }

    pub fn log_center(&self, c: u8) -> f64 {
        self.measure.log_center(c)
    }

    /// `log μ(φ_i(k))`, extending past the precomputed depth as needed.
    pub fn log_site(&mut self, i: u8, k: u32) -> f64 {
        if let Some(w) = self.measure.log_vertex(Vertex::Branch {
            branch: i,
            depth: k,
        }) {
            return w;
        }
        let depth = self.measure.depth();
        let ext = &mut self.ext[i as usize];
        let b = self.model.branch(i);
        while depth + (ext.len() as u32) < k {
            let m = depth + ext.len() as u32; // deepest cached site
            let prev = if ext.is_empty() {
                self.measure
                    .log_vertex(Vertex::Branch {
                        branch: i,
                        depth: m,
                    })
                    .expect("within depth")
            } else {
                ext[ext.len() - 1]
            };
            ext.push(prev + b.log_out(m) - b.log_inn(m));
        }
        ext[(k - depth - 1) as usize]
    }

    /// `log μ(φ_i([a, b]))` by direct summation.
    pub fn log_seg(&mut self, i: u8, a: u32, b: u32) -> f64 {
        let mut total = LOG_ZERO;
        for k in a..=b {
            total = log_add(total, self.log_site(i, k));
        }
        total
    }

    /// `log μ(φ_i([k, ∞)))`, adaptively summed and memoized.
    pub fn log_tail(&mut self, i: u8, k: u32) -> f64 {
        if let Some(t) = self.measure.log_branch_tail(i, k) {
            return t;
        }
        if let Some(&t) = self.tail_memo[i as usize].get(&k) {
            return t;
        }
        let mut total = LOG_ZERO;
        let mut quiet = 0usize;
        let mut n = k;
        while quiet < TAIL_CONSECUTIVE {
            let w = self.log_site(i, n);
            total = log_add(total, w);
            if w - total < LOG_TAIL_REL_EPS {
                quiet += 1;
            } else {
                quiet = 0;
            }
            n += 1;
            assert!(
                (n - k) < TAIL_CAP as u32,
                "tail of a validated measure failed to converge"
            );
        }
        self.tail_memo[i as usize].insert(k, total);
        total
    }
}
