//! The kernel `Λ`, the coupling generator, the algebraic duality residual,
//! and the trajectory-driven coupled construction of the dual given an
//! observed primal path.
//!
//! `Λ(Q, ·)` is the stationary measure restricted to the dual state `Q` and
//! renormalized. A primal generator `L` and a dual generator `L*` are in
//! algebraic duality when `L*Λ = ΛL`; the coupling generator below then
//! drives the pair `(X, X*)` so that the conditional law of `X_t` given the
//! dual history is exactly `Λ(X*_t, ·)`.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;
use std::io::Write;

use thiserror::Error;

use crate::ctmc::{RateOracle, Trajectory};
use crate::graph_dual::{self, BranchExtent, DualSet};
use crate::interval_dual::{log_interval_mass, IntervalDualRunner, IntervalState};
use crate::graph_dual::GraphDualRunner;
use crate::logspace::{log_sum_exp, TwoFloat, LOG_ZERO};
use crate::rng::TrialRng;
use crate::state_space::{GraphMassCache, MassCache, Vertex};

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("the dual state gives zero mass to the primal state")]
    OffSupport,
    #[error("initial pair is incompatible: Λ(dual, primal) = 0")]
    InconsistentInput,
    #[error("dual state has empty intersection with the graph")]
    EmptyIntersection,
}

/// The row `Λ(Q, ·)`: explicit entries inside the measure window plus the
/// log masses of the directions escaping it. Everything is conditional on
/// `Q`, so entries and tails together sum to one.
#[derive(Debug, Clone)]
pub struct LambdaRow<P> {
    pub entries: Vec<(P, f64)>,
    pub log_tails: Vec<f64>,
}

impl<P> LambdaRow<P> {
    /// `log Σ` over entries and tails; 0 for a complete row.
    pub fn log_total(&self) -> f64 {
        let mut parts: Vec<f64> = self.entries.iter().map(|&(_, w)| w).collect();
        parts.extend_from_slice(&self.log_tails);
        log_sum_exp(&parts)
    }
}

/// A dual chain in algebraic duality with a primal oracle: transition rates,
/// the kernel `Λ`, and the explosion policy hooks used by coupled runs.
pub trait DualChain {
    type Primal: Copy + Eq + Hash + Debug;
    type Dual: Clone + Eq + Hash + Debug;

    /// Off-diagonal dual rates out of `q`; empty for absorbing states.
    fn transitions(&self, q: &Self::Dual) -> Vec<(Self::Dual, f64)>;

    /// Total dual exit rate `L*_q`.
    fn exit_rate(&self, q: &Self::Dual) -> f64 {
        self.transitions(q).iter().map(|&(_, r)| r).sum()
    }

    fn is_absorbing(&self, q: &Self::Dual) -> bool;

    /// `log Λ(q, x)`; `None` where the kernel vanishes.
    fn log_lambda(&self, q: &Self::Dual, x: Self::Primal) -> Option<f64>;

    /// The full row `Λ(q, ·)`.
    fn lambda_row(&self, q: &Self::Dual) -> LambdaRow<Self::Primal>;

    /// Draws `X ~ Λ(q, ·)`.
    fn sample_lambda(&self, q: &Self::Dual, rng: &mut TrialRng) -> Self::Primal;

    /// The singleton dual state `{x}`.
    fn singleton(&self, x: Self::Primal) -> Self::Dual;

    /// Explosion fast-forward: when a component of `q` qualifies under the
    /// policy, samples the leftover climb time and returns the
    /// post-explosion state.
    fn explosion_step(
        &self,
        q: &Self::Dual,
        rng: &mut TrialRng,
    ) -> Option<(f64, Self::Dual)>;
}

/// `lambda_row` as a free function, with the domain checks of the kernel.
pub fn lambda_row<D: DualChain>(
    dual: &D,
    q: &D::Dual,
) -> Result<LambdaRow<D::Primal>, CouplingError> {
    let row = dual.lambda_row(q);
    if row.entries.is_empty() && row.log_tails.is_empty() {
        return Err(CouplingError::EmptyIntersection);
    }
    Ok(row)
}

/// Case tags of the coupling generator, mutually exclusive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoupledCase {
    Diagonal,
    /// The primal jumps, the dual stays.
    PrimalMove,
    /// The dual jumps, the primal stays.
    DualMove,
    /// Both move: the primal leaves the dual's support, the dual follows.
    JointMove,
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct CoupledRate {
    pub rate: f64,
    pub case: CoupledCase,
    /// `Γ(x*, y) = (L*Λ)(x*, y)`, filled when the joint case needs it.
    pub gamma: Option<f64>,
}

fn rate_between<O: RateOracle>(oracle: &O, x: O::State, y: O::State) -> f64 {
    if x == y {
        return -oracle.total_rate(x);
    }
    oracle
        .row(x)
        .into_iter()
        .find(|&(s, _)| s == y)
        .map_or(0.0, |(_, r)| r)
}

/// `Γ(x*, y) = Σ_{y*} L*_{x*, y*} Λ(y*, y)`, the off-diagonal part; the
/// diagonal contribution `-L*_{x*} Λ(x*, y)` is added by the caller when it
/// wants the full matrix entry.
fn gamma_positive<D: DualChain>(dual: &D, q: &D::Dual, y: D::Primal) -> f64 {
    let mut g = 0.0;
    for (q2, r) in dual.transitions(q) {
        if let Some(ll) = dual.log_lambda(&q2, y) {
            g += r * ll.exp();
        }
    }
    g
}

/// One coupling-generator entry, with its case tag.
///
/// The joint case uses the positive-rate gate (`Λ(x*, y) = 0` and
/// `L_{x,y} L*_{x*,y*} > 0`), under which `Γ(x*, y) > 0` is guaranteed.
pub fn coupled_rate<O, D>(
    x_bar: (O::State, D::Dual),
    y_bar: (O::State, D::Dual),
    primal: &O,
    dual: &D,
) -> Result<CoupledRate, CouplingError>
where
    O: RateOracle,
    D: DualChain<Primal = O::State>,
{
    let (x, xs) = x_bar;
    let (y, ys) = y_bar;
    let log_lam_x = dual.log_lambda(&xs, x).ok_or(CouplingError::OffSupport)?;
    if dual.log_lambda(&ys, y).is_none() {
        // target outside the coupled state space
        return Ok(CoupledRate {
            rate: 0.0,
            case: CoupledCase::Zero,
            gamma: None,
        });
    }

    if x == y && xs == ys {
        let lx = primal.total_rate(x);
        let ls = dual.exit_rate(&xs);
        let gamma_diag = gamma_positive(dual, &xs, x) - ls * log_lam_x.exp();
        let rate = -(lx + ls + gamma_diag / log_lam_x.exp());
        return Ok(CoupledRate {
            rate,
            case: CoupledCase::Diagonal,
            gamma: Some(gamma_diag),
        });
    }
    if y != x && ys == xs {
        return Ok(CoupledRate {
            rate: rate_between(primal, x, y),
            case: CoupledCase::PrimalMove,
            gamma: None,
        });
    }
    if y == x && ys != xs {
        let ls_rate = dual
            .transitions(&xs)
            .into_iter()
            .find(|(q2, _)| *q2 == ys)
            .map_or(0.0, |(_, r)| r);
        let rate = match dual.log_lambda(&ys, x) {
            Some(ll) => ls_rate * (ll - log_lam_x).exp(),
            None => 0.0,
        };
        return Ok(CoupledRate {
            rate,
            case: CoupledCase::DualMove,
            gamma: None,
        });
    }
    // both components differ
    let lxy = rate_between(primal, x, y);
    let lsxy = dual
        .transitions(&xs)
        .into_iter()
        .find(|(q2, _)| *q2 == ys)
        .map_or(0.0, |(_, r)| r);
    if dual.log_lambda(&xs, y).is_none() && lxy * lsxy > 0.0 {
        let gamma = gamma_positive(dual, &xs, y);
        let lam_ys_y = dual.log_lambda(&ys, y).expect("checked above").exp();
        let rate = lxy * lsxy * lam_ys_y / gamma;
        return Ok(CoupledRate {
            rate,
            case: CoupledCase::JointMove,
            gamma: Some(gamma),
        });
    }
    Ok(CoupledRate {
        rate: 0.0,
        case: CoupledCase::Zero,
        gamma: None,
    })
}

/// Enumerates the full coupling-generator row out of `x̄` (including the
/// diagonal), for conservation tests.
pub fn coupled_row<O, D>(
    x_bar: (O::State, D::Dual),
    primal: &O,
    dual: &D,
) -> Result<Vec<((O::State, D::Dual), CoupledRate)>, CouplingError>
where
    O: RateOracle,
    D: DualChain<Primal = O::State>,
{
    let (x, xs) = x_bar.clone();
    let mut out = Vec::new();
    // diagonal
    out.push((
        x_bar.clone(),
        coupled_rate(x_bar.clone(), (x, xs.clone()), primal, dual)?,
    ));
    // primal moves and joint moves
    for (y, _) in primal.row(x) {
        if dual.log_lambda(&xs, y).is_some() {
            let tgt = (y, xs.clone());
            out.push((tgt.clone(), coupled_rate(x_bar.clone(), tgt, primal, dual)?));
        } else {
            for (ys, _) in dual.transitions(&xs) {
                if dual.log_lambda(&ys, y).is_some() {
                    let tgt = (y, ys);
                    out.push((tgt.clone(), coupled_rate(x_bar.clone(), tgt, primal, dual)?));
                }
            }
        }
    }
    // dual-only moves
    for (ys, _) in dual.transitions(&xs) {
        if dual.log_lambda(&ys, x).is_some() {
            let tgt = (x, ys);
            out.push((tgt.clone(), coupled_rate(x_bar.clone(), tgt, primal, dual)?));
        }
    }
    Ok(out)
}

/// Report of the algebraic duality check `L*Λ = ΛL`.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub interior_max: f64,
    pub boundary_max: f64,
    pub interior_rows: usize,
    pub boundary_rows: usize,
}

/// Max residual `|(L*Λ)(Q, p) - (ΛL)(Q, p)|` over dual states and primal
/// points. The two routes are computed independently: the left through the
/// dual transition rates, the right through the primal generator applied
/// under the kernel. Rows of `boundary` states are kept out of the interior
/// maximum and reported separately.
pub fn algebraic_residual<O, D>(
    primal: &O,
    dual: &D,
    states: &[D::Dual],
    is_boundary: impl Fn(&D::Dual) -> bool,
    primal_points: &[O::State],
) -> ResidualReport
where
    O: RateOracle,
    D: DualChain<Primal = O::State>,
{
    // in-rates L_{m,p} per primal point (reversible chains: scan neighbors)
    let mut in_rates: HashMap<O::State, Vec<(O::State, f64)>> = HashMap::new();
    for &p in primal_points {
        let mut v = Vec::new();
        for (m, _) in primal.row(p) {
            let r = rate_between(primal, m, p);
            if r > 0.0 {
                v.push((m, r));
            }
        }
        v.push((p, -primal.total_rate(p)));
        in_rates.insert(p, v);
    }

    let mut interior_max = 0.0f64;
    let mut boundary_max = 0.0f64;
    let mut interior_rows = 0usize;
    let mut boundary_rows = 0usize;
    for q in states {
        let boundary = is_boundary(q);
        if boundary {
            boundary_rows += 1;
        } else {
            interior_rows += 1;
        }
        let trans = dual.transitions(q);
        let exit: f64 = trans.iter().map(|&(_, r)| r).sum();
        for &p in primal_points {
            // route one: through the dual generator
            let mut lhs = TwoFloat::zero();
            for (q2, r) in &trans {
                if let Some(ll) = dual.log_lambda(q2, p) {
                    lhs = lhs.add_prod(*r, ll.exp());
                }
            }
            if let Some(ll) = dual.log_lambda(q, p) {
                lhs = lhs.add_prod(-exit, ll.exp());
            }
            // route two: through the primal generator
            let mut rhs = TwoFloat::zero();
            for &(m, r) in &in_rates[&p] {
                if let Some(ll) = dual.log_lambda(q, m) {
                    rhs = rhs.add_prod(r, ll.exp());
                }
            }
            let resid = (lhs.value() - rhs.value()).abs();
            if boundary {
                boundary_max = boundary_max.max(resid);
            } else {
                interior_max = interior_max.max(resid);
            }
        }
    }
    ResidualReport {
        interior_max,
        boundary_max,
        interior_rows,
        boundary_rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoupledEventKind {
    Init,
    PrimalJump,
    DualJump,
    Explosion,
}

#[derive(Debug, Clone)]
pub struct CoupledEvent<P, D> {
    pub time: f64,
    pub primal: P,
    pub dual: D,
    pub kind: CoupledEventKind,
}

/// Event log of a coupled `(X, X*)` run. The primal component reproduces
/// the observed trajectory event for event; dual moves interleave.
#[derive(Debug, Clone)]
pub struct CoupledTrajectory<P, D> {
    pub events: Vec<CoupledEvent<P, D>>,
    pub horizon: f64,
    /// First time the dual hit its absorbing state, if it did.
    pub absorption_time: Option<f64>,
}

impl<P: Copy, D: Clone> CoupledTrajectory<P, D> {
    pub fn state_at(&self, t: f64) -> (P, D) {
        let idx = self.events.partition_point(|e| e.time <= t);
        let e = &self.events[idx.saturating_sub(1).min(self.events.len() - 1)];
        (e.primal, e.dual.clone())
    }

    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        encode_primal: impl Fn(&P) -> String,
        encode_dual: impl Fn(&D) -> String,
    ) -> std::io::Result<()> {
        writeln!(w, "# sstlab coupled-trajectory v1")?;
        writeln!(w, "time,primal,dual,event")?;
        for e in &self.events {
            let kind = match e.kind {
                CoupledEventKind::Init => "init",
                CoupledEventKind::PrimalJump => "primal-jump",
                CoupledEventKind::DualJump => "dual-jump",
                CoupledEventKind::Explosion => "explosion",
            };
            writeln!(
                w,
                "{},{},{},{}",
                e.time,
                encode_primal(&e.primal),
                encode_dual(&e.dual),
                kind
            )?;
        }
        Ok(())
    }
}

/// Builds the dual path given an observed primal trajectory, following the
/// two-case construction of the coupling generator: an independent
/// exponential alarm with the dual-only total rate races the next primal
/// jump. If the alarm fires first the dual alone moves; otherwise the
/// primal jump either keeps the dual in place (when the new primal point
/// stays in its support) or drags it to a neighboring state chosen
/// proportionally to `L*_{x*,y*} Λ(y*, y)`.
///
/// The dual-only selection is normalized by the exact row total
/// `L*_{x*} + Γ(x*,x)/Λ(x*,x)` computed through the primal route, never by
/// the empirical sum of the enumerated moves; a mismatch surfaces as a null
/// event instead of hiding a rate bug.
pub fn simulate_dual_given_primal<O, D>(
    primal_traj: &Trajectory<O::State>,
    dual_init: D::Dual,
    primal: &O,
    dual: &D,
    rng: &mut TrialRng,
) -> Result<CoupledTrajectory<O::State, D::Dual>, CouplingError>
where
    O: RateOracle,
    D: DualChain<Primal = O::State>,
{
    let x0 = primal_traj.states[0];
    if dual.log_lambda(&dual_init, x0).is_none() {
        return Err(CouplingError::InconsistentInput);
    }
    // never run the dual past the span the primal path actually covers
    let horizon = primal_traj.covered_end();
    let mut events = vec![CoupledEvent {
        time: 0.0,
        primal: x0,
        dual: dual_init.clone(),
        kind: CoupledEventKind::Init,
    }];
    let mut absorption_time = dual.is_absorbing(&dual_init).then_some(0.0);

    let mut t = 0.0f64;
    let mut x = x0;
    let mut xs = dual_init;
    let mut next_jump = 1usize; // index into the primal trajectory
    let mut gamma_memo: HashMap<(D::Dual, O::State), (f64, Vec<(D::Dual, f64)>)> = HashMap::new();

    loop {
        // an absorbed dual never moves again: copy the remaining primal
        // jumps through without rate arithmetic
        if dual.is_absorbing(&xs) {
            while let (Some(&sigma), Some(&y)) = (
                primal_traj.times.get(next_jump),
                primal_traj.states.get(next_jump),
            ) {
                if sigma > horizon {
                    break;
                }
                t = sigma;
                x = y;
                next_jump += 1;
                events.push(CoupledEvent {
                    time: t,
                    primal: x,
                    dual: xs.clone(),
                    kind: CoupledEventKind::PrimalJump,
                });
            }
            break;
        }

        // pending explosion of the dual state
        while let Some((remainder, post)) = dual.explosion_step(&xs, rng) {
            let t_expl = t + remainder;
            let sigma = primal_traj.times.get(next_jump).copied().unwrap_or(horizon);
            if t_expl > sigma.min(horizon) {
                // the primal acts first; retry the explosion afterwards
                break;
            }
            t = t_expl;
            xs = post;
            events.push(CoupledEvent {
                time: t,
                primal: x,
                dual: xs.clone(),
                kind: CoupledEventKind::Explosion,
            });
            if absorption_time.is_none() && dual.is_absorbing(&xs) {
                absorption_time = Some(t);
            }
        }

        // dual-only moves and their exact total
        let log_lam_x = dual.log_lambda(&xs, x).ok_or(CouplingError::OffSupport)?;
        let trans = dual.transitions(&xs);
        let exit: f64 = trans.iter().map(|&(_, r)| r).sum();
        let mut dual_moves: Vec<(D::Dual, f64)> = Vec::new();
        for (ys, r) in trans {
            if let Some(ll) = dual.log_lambda(&ys, x) {
                dual_moves.push((ys, r * (ll - log_lam_x).exp()));
            }
        }
        let total = dual_only_total(primal, dual, &xs, x, log_lam_x, exit);

        let eps = rng.exponential(total);
        let sigma = primal_traj.times.get(next_jump).copied();

        let alarm = t + eps;
        let primal_next = sigma.unwrap_or(f64::INFINITY);
        if alarm <= primal_next {
            if alarm > horizon || !alarm.is_finite() {
                break;
            }
            // dual-only move
            t = alarm;
            let mut target = rng.uniform() * total;
            let mut chosen = None;
            for (ys, r) in &dual_moves {
                if target < *r {
                    chosen = Some(ys.clone());
                    break;
                }
                target -= *r;
            }
            if let Some(ys) = chosen {
                xs = ys;
                events.push(CoupledEvent {
                    time: t,
                    primal: x,
                    dual: xs.clone(),
                    kind: CoupledEventKind::DualJump,
                });
                if absorption_time.is_none() && dual.is_absorbing(&xs) {
                    absorption_time = Some(t);
                }
            }
            // an overshoot past the enumerated moves is a null event
        } else {
            let Some(sigma) = sigma else { break };
            if sigma > horizon {
                break;
            }
            // primal jump
            t = sigma;
            let y = primal_traj.states[next_jump];
            next_jump += 1;
            if dual.log_lambda(&xs, y).is_none() {
                // the dual must follow
                let key = (xs.clone(), y);
                let (gamma, targets) = gamma_memo.entry(key).or_insert_with(|| {
                    let mut targets = Vec::new();
                    let mut gamma = 0.0;
                    for (ys, r) in dual.transitions(&xs) {
                        if let Some(ll) = dual.log_lambda(&ys, y) {
                            let w = r * ll.exp();
                            gamma += w;
                            targets.push((ys, w));
                        }
                    }
                    (gamma, targets)
                });
                let mut target = rng.uniform() * *gamma;
                let mut chosen = targets.last().map(|(ys, _)| ys.clone());
                for (ys, w) in targets.iter() {
                    if target < *w {
                        chosen = Some(ys.clone());
                        break;
                    }
                    target -= *w;
                }
                xs = chosen.expect("joint move must have a target");
            }
            x = y;
            events.push(CoupledEvent {
                time: t,
                primal: x,
                dual: xs.clone(),
                kind: CoupledEventKind::PrimalJump,
            });
            if absorption_time.is_none() && dual.is_absorbing(&xs) {
                absorption_time = Some(t);
            }
        }
    }

    Ok(CoupledTrajectory {
        events,
        horizon,
        absorption_time,
    })
}

/// The dual-only total rate `L̄_x̄ - L_x = L*_{x*} + Γ(x*,x)/Λ(x*,x)`,
/// with `Γ` evaluated through the primal route `ΛL`: an algebraic identity
/// independent of the enumerated dual moves.
fn dual_only_total<O, D>(
    primal: &O,
    dual: &D,
    xs: &D::Dual,
    x: O::State,
    log_lam_x: f64,
    l_star: f64,
) -> f64
where
    O: RateOracle,
    D: DualChain<Primal = O::State>,
{
    let lx = primal.total_rate(x);
    let mut incoming = 0.0;
    for (m, _) in primal.row(x) {
        if let Some(lm) = dual.log_lambda(xs, m) {
            incoming += (lm - log_lam_x).exp() * rate_between(primal, m, x);
        }
    }
    (l_star + incoming - lx).max(0.0)
}

/// Draws the initial dual state given `X_0 = x0`, under a discrete dual
/// initial law `μ0*`: `P(X*_0 = q) ∝ μ0*(q) Λ(q, x0)`.
pub fn draw_initial_dual<D: DualChain>(
    dual: &D,
    mu0_star: &[(D::Dual, f64)],
    x0: D::Primal,
    rng: &mut TrialRng,
) -> Result<D::Dual, CouplingError> {
    let mut weights = Vec::with_capacity(mu0_star.len());
    let mut total = 0.0;
    for (q, m) in mu0_star {
        let w = match dual.log_lambda(q, x0) {
            Some(ll) => m * ll.exp(),
            None => 0.0,
        };
        weights.push(w);
        total += w;
    }
    if total <= 0.0 {
        return Err(CouplingError::InconsistentInput);
    }
    let idx = rng
        .pick_weighted(&weights, total)
        .unwrap_or(weights.len() - 1);
    Ok(mu0_star[idx].0.clone())
}

// ---------------------------------------------------------------------------
// DualChain implementations for the two concrete duals
// ---------------------------------------------------------------------------

impl DualChain for IntervalDualRunner<'_> {
    type Primal = i64;
    type Dual = IntervalState;

    fn transitions(&self, q: &IntervalState) -> Vec<(IntervalState, f64)> {
        if q.is_line() {
            return Vec::new();
        }
        crate::interval_dual::dual_rates(*q, self.rates(), self.measure())
            .expect("non-absorbing interval state")
    }

    fn is_absorbing(&self, q: &IntervalState) -> bool {
        if q.is_line() {
            return true;
        }
        // table families absorb at the full window
        if let crate::state_space::Support::Window { lo, hi } = self.rates().support() {
            return *q == IntervalState::finite(lo, hi);
        }
        false
    }

    fn log_lambda(&self, q: &IntervalState, x: i64) -> Option<f64> {
        if !q.contains(x) {
            return None;
        }
        let w = self.measure().log_mass(x)?;
        let m = log_interval_mass(*q, self.measure()).ok()?;
        Some(w - m)
    }

    fn lambda_row(&self, q: &IntervalState) -> LambdaRow<i64> {
        let (wlo, whi) = self.measure().window();
        let logm = log_interval_mass(*q, self.measure()).expect("state inside the window");
        let lo = q.lo.map_or(wlo, |p| p.max(wlo));
        let hi = q.hi.map_or(whi, |p| p.min(whi));
        let mut entries = Vec::new();
        for n in lo..=hi {
            entries.push((n, self.measure().log_mass(n).expect("in window") - logm));
        }
        let mut log_tails = Vec::new();
        if q.lo.is_none() {
            let t = self.measure().log_tail_left() - logm;
            if t > LOG_ZERO {
                log_tails.push(t);
            }
        }
        if q.hi.is_none() {
            let t = self.measure().log_tail_right() - logm;
            if t > LOG_ZERO {
                log_tails.push(t);
            }
        }
        LambdaRow { entries, log_tails }
    }

    fn sample_lambda(&self, q: &IntervalState, rng: &mut TrialRng) -> i64 {
        let row = self.lambda_row(q);
        let mut target = rng.uniform();
        for (n, lw) in &row.entries {
            let w = lw.exp();
            if target < w {
                return *n;
            }
            target -= w;
        }
        // landed in a tail: walk outward site by site
        let (wlo, whi) = self.measure().window();
        let mut cache = MassCache::new(self.rates(), self.measure());
        let logm = log_interval_mass(*q, self.measure()).expect("in window");
        if q.lo.is_none() {
            let mut n = wlo - 1;
            loop {
                let w = (cache.log_w(n) - logm).exp();
                if target < w || w == 0.0 {
                    return n;
                }
                target -= w;
                n -= 1;
            }
        }
        let mut n = whi + 1;
        loop {
            let w = (cache.log_w(n) - logm).exp();
            if target < w || w == 0.0 {
                return n;
            }
            target -= w;
            n += 1;
        }
    }

    fn singleton(&self, x: i64) -> IntervalState {
        IntervalState::singleton(x)
    }

    fn explosion_step(
        &self,
        q: &IntervalState,
        rng: &mut TrialRng,
    ) -> Option<(f64, IntervalState)> {
        let mut cache = MassCache::new(self.rates(), self.measure());
        if let Some(hi) = q.hi {
            if self.right_explodes(hi) {
                let logm = log_interval_mass(*q, self.measure()).expect("in window");
                let rem = self.sample_remainder(
                    &mut cache,
                    *q,
                    logm,
                    crate::interval_dual::ExplodedBound::Right,
                    rng,
                );
                return Some((rem, IntervalState { hi: None, ..*q }));
            }
        }
        if let Some(lo) = q.lo {
            if self.left_explodes(lo) {
                let logm = log_interval_mass(*q, self.measure()).expect("in window");
                let rem = self.sample_remainder(
                    &mut cache,
                    *q,
                    logm,
                    crate::interval_dual::ExplodedBound::Left,
                    rng,
                );
                return Some((rem, IntervalState { lo: None, ..*q }));
            }
        }
        None
    }
}

impl DualChain for GraphDualRunner<'_> {
    type Primal = Vertex;
    type Dual = DualSet;

    fn transitions(&self, q: &DualSet) -> Vec<(DualSet, f64)> {
        if q.is_whole(&self.chain().model) {
            return Vec::new();
        }
        graph_dual::dual_transitions(q, self.chain()).expect("non-absorbing dual set")
    }

    fn is_absorbing(&self, q: &DualSet) -> bool {
        q.is_whole(&self.chain().model)
    }

    fn log_lambda(&self, q: &DualSet, x: Vertex) -> Option<f64> {
        if !q.contains(x) {
            return None;
        }
        let w = self.chain().measure.log_vertex(x)?;
        let m = graph_dual::log_dual_mass_measure(q, &self.chain().measure)?;
        Some(w - m)
    }

    fn lambda_row(&self, q: &DualSet) -> LambdaRow<Vertex> {
        let measure = &self.chain().measure;
        let depth = measure.depth();
        let logm = graph_dual::log_dual_mass_measure(q, measure).expect("state within depth");
        let mut entries = Vec::new();
        let mut log_tails = Vec::new();
        let mut mask = q.mask;
        while mask != 0 {
            let c = mask.trailing_zeros() as u8;
            mask &= mask - 1;
            entries.push((Vertex::Center(c), measure.log_center(c) - logm));
        }
        for (i, e) in q.extents.iter().enumerate() {
            let i = i as u8;
            let (a, b, tail_from) = match *e {
                BranchExtent::Empty => continue,
                BranchExtent::Prefix(k) => (0, k, None),
                BranchExtent::Full => (0, depth, Some(depth + 1)),
                BranchExtent::Segment(a, b) => (a, b, None),
                BranchExtent::HalfSegment(a) => (a, depth, Some(depth + 1)),
            };
            for k in a..=b.min(depth) {
                let w = measure
                    .log_vertex(Vertex::Branch { branch: i, depth: k })
                    .expect("within depth");
                entries.push((Vertex::Branch { branch: i, depth: k }, w - logm));
            }
            if let Some(from) = tail_from {
                if let Some(t) = measure.log_branch_tail(i, from) {
                    if t > LOG_ZERO {
                        log_tails.push(t - logm);
                    }
                }
            }
        }
        LambdaRow { entries, log_tails }
    }

    fn sample_lambda(&self, q: &DualSet, rng: &mut TrialRng) -> Vertex {
        let row = self.lambda_row(q);
        let mut target = rng.uniform();
        for (v, lw) in &row.entries {
            let w = lw.exp();
            if target < w {
                return *v;
            }
            target -= w;
        }
        // walk out along the first infinite branch beyond the window
        let measure = &self.chain().measure;
        let logm = graph_dual::log_dual_mass_measure(q, measure).expect("within depth");
        let mut cache = GraphMassCache::new(&self.chain().model, measure);
        for (i, e) in q.extents.iter().enumerate() {
            if e.has_infinity() {
                let mut k = measure.depth() + 1;
                loop {
                    let w = (cache.log_site(i as u8, k) - logm).exp();
                    if target < w || w == 0.0 {
                        return Vertex::Branch {
                            branch: i as u8,
                            depth: k,
                        };
                    }
                    target -= w;
                    k += 1;
                }
            }
        }
        row.entries.last().expect("nonempty row").0
    }

    fn singleton(&self, x: Vertex) -> DualSet {
        DualSet::vertex(x, self.chain().model.branch_count())
    }

    fn explosion_step(&self, q: &DualSet, rng: &mut TrialRng) -> Option<(f64, DualSet)> {
        for (i, e) in q.extents.iter().enumerate() {
            let Some(k) = (match *e {
                BranchExtent::Prefix(k) => Some(k),
                BranchExtent::Segment(_, b) => Some(b),
                _ => None,
            }) else {
                continue;
            };
            if !self.branch_explodes(i as u8, k) {
                continue;
            }
            let mut cache = GraphMassCache::new(&self.chain().model, &self.chain().measure);
            let logm = graph_dual::log_dual_mass(q, &mut cache);
            let rem = self.sample_remainder(&mut cache, logm, i as u8, k, rng);
            let mut post = q.clone();
            post.extents[i] = match *e {
                BranchExtent::Prefix(_) => BranchExtent::Full,
                BranchExtent::Segment(a, _) => BranchExtent::HalfSegment(a),
                _ => unreachable!(),
            };
            return Some((rem, post));
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{simulate_minimal, BdOracle};
    use crate::rng::SeedSpec;
    use crate::interval_dual::ExplosionPolicy;
    use crate::state_space::{mu_bd, BDRates};

    fn drift2() -> BDRates {
        BDRates::uniform_birth(1.0, 2.0)
    }

    fn exp2() -> BDRates {
        BDRates::exponential(2.0)
    }

    #[test]
    fn lambda_row_singleton_is_delta() {
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let row = lambda_row(&runner, &IntervalState::singleton(4)).unwrap();
        assert_eq!(row.entries.len(), 1);
        assert_eq!(row.entries[0].0, 4);
        assert!(row.entries[0].1.abs() < 1e-14);
    }

    #[test]
    fn lambda_row_interval_exact() {
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let row = lambda_row(&runner, &IntervalState::finite(0, 2)).unwrap();
        let lam1 = row
            .entries
            .iter()
            .find(|(n, _)| *n == 1)
            .map(|&(_, w)| w.exp())
            .unwrap();
        assert!((lam1 - 2.0 / 7.0).abs() < 1e-13, "{lam1}");
        assert!(row.log_total().abs() < 1e-12);
    }

    #[test]
    fn lambda_row_half_line_includes_tail() {
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let row = lambda_row(&runner, &IntervalState::left_infinite(0)).unwrap();
        assert_eq!(row.log_tails.len(), 1);
        assert!(row.log_total().abs() < 1e-12);
    }

    #[test]
    fn dual_move_rates_cancel_mass_ratios() {
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let oracle = BdOracle { rates: &rates };
        // dual-only growth [0,1] -> [0,2] at any x inside: rate a_2 exactly
        let r = coupled_rate(
            (0, IntervalState::finite(0, 1)),
            (0, IntervalState::finite(0, 2)),
            &oracle,
            &runner,
        )
        .unwrap();
        assert_eq!(r.case, CoupledCase::DualMove);
        assert!((r.rate - 2.0).abs() < 1e-12, "{}", r.rate);
        // dual-only shrink [0,1] -> [1,1] from x = 1: rate a_0
        let r = coupled_rate(
            (1, IntervalState::finite(0, 1)),
            (1, IntervalState::finite(1, 1)),
            &oracle,
            &runner,
        )
        .unwrap();
        assert_eq!(r.case, CoupledCase::DualMove);
        assert!((r.rate - 0.5).abs() < 1e-12, "{}", r.rate);
    }

    #[test]
    fn primal_move_keeps_raw_rate() {
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let oracle = BdOracle { rates: &rates };
        let r = coupled_rate(
            (0, IntervalState::finite(-1, 1)),
            (1, IntervalState::finite(-1, 1)),
            &oracle,
            &runner,
        )
        .unwrap();
        assert_eq!(r.case, CoupledCase::PrimalMove);
        assert_eq!(r.rate, 1.0);
    }

    #[test]
    fn coupled_row_conserves() {
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let oracle = BdOracle { rates: &rates };
        for (x, s) in [
            (0i64, IntervalState::finite(0, 2)),
            (1, IntervalState::finite(0, 2)),
            (2, IntervalState::finite(0, 2)),
            (3, IntervalState::finite(3, 3)),
            (-1, IntervalState::finite(-4, 2)),
        ] {
            let row = coupled_row((x, s), &oracle, &runner).unwrap();
            let sum: f64 = row.iter().map(|(_, r)| r.rate).sum();
            assert!(sum.abs() < 1e-10, "row sum {sum} at x={x}, s={s:?}");
        }
    }

    #[test]
    fn case_tags_are_exclusive_and_exhaustive() {
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let oracle = BdOracle { rates: &rates };
        let duals = [
            IntervalState::finite(0, 2),
            IntervalState::finite(-1, 0),
            IntervalState::singleton(1),
        ];
        for &xs in &duals {
            for x in -2..=3 {
                if !xs.contains(x) {
                    continue;
                }
                for &ys in &duals {
                    for y in -2..=3 {
                        if !ys.contains(y) {
                            continue;
                        }
                        let r = coupled_rate((x, xs), (y, ys), &oracle, &runner).unwrap();
                        let expect = if x == y && xs == ys {
                            CoupledCase::Diagonal
                        } else if y != x && ys == xs {
                            CoupledCase::PrimalMove
                        } else if y == x {
                            CoupledCase::DualMove
                        } else if xs.contains(y) {
                            CoupledCase::Zero
                        } else {
                            // both differ and y left the support: joint when
                            // the underlying rates allow it
                            r.case
                        };
                        assert_eq!(r.case, expect, "x={x} y={y} xs={xs:?} ys={ys:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn residual_vanishes_on_interval_duals() {
        for rates in [exp2(), drift2()] {
            let m = mu_bd(&rates, -16, 16).unwrap();
            let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
            let oracle = BdOracle { rates: &rates };
            let mut states = Vec::new();
            for p in -10..=10i64 {
                for q in p..=10i64 {
                    states.push(IntervalState::finite(p, q));
                }
            }
            // half-line states exercise the tail masses
            for q in -10..=10i64 {
                states.push(IntervalState::left_infinite(q));
                states.push(IntervalState::right_infinite(q));
            }
            let points: Vec<i64> = (-12..=12).collect();
            let report = algebraic_residual(
                &oracle,
                &runner,
                &states,
                |s| {
                    s.lo == Some(-10) || s.hi == Some(10)
                },
                &points,
            );
            assert!(
                report.interior_max < 1e-9,
                "interior residual {}",
                report.interior_max
            );
            assert!(report.interior_rows > 0 && report.boundary_rows > 0);
        }
    }

    #[test]
    fn residual_detects_perturbation() {
        struct Perturbed<'a>(IntervalDualRunner<'a>);
        impl DualChain for Perturbed<'_> {
            type Primal = i64;
            type Dual = IntervalState;
            fn transitions(&self, q: &IntervalState) -> Vec<(IntervalState, f64)> {
                let mut t = self.0.transitions(q);
                if *q == IntervalState::finite(0, 1) {
                    for (s, r) in &mut t {
                        if *s == IntervalState::finite(0, 2) {
                            *r += 1e-3;
                        }
                    }
                }
                t
            }
            fn is_absorbing(&self, q: &IntervalState) -> bool {
                self.0.is_absorbing(q)
            }
            fn log_lambda(&self, q: &IntervalState, x: i64) -> Option<f64> {
                self.0.log_lambda(q, x)
            }
            fn lambda_row(&self, q: &IntervalState) -> LambdaRow<i64> {
                self.0.lambda_row(q)
            }
            fn sample_lambda(&self, q: &IntervalState, rng: &mut TrialRng) -> i64 {
                self.0.sample_lambda(q, rng)
            }
            fn singleton(&self, x: i64) -> IntervalState {
                IntervalState::singleton(x)
            }
            fn explosion_step(
                &self,
                q: &IntervalState,
                rng: &mut TrialRng,
            ) -> Option<(f64, IntervalState)> {
                self.0.explosion_step(q, rng)
            }
        }

        let rates = drift2();
        let m = mu_bd(&rates, -16, 16).unwrap();
        let runner = Perturbed(IntervalDualRunner::new(
            &rates,
            &m,
            ExplosionPolicy::default(),
        ));
        let oracle = BdOracle { rates: &rates };
        let states = vec![IntervalState::finite(0, 1)];
        let points: Vec<i64> = (-3..=4).collect();
        let report = algebraic_residual(&oracle, &runner, &states, |_| false, &points);
        assert!(report.interior_max >= 1e-4, "{}", report.interior_max);
    }

    #[test]
    fn absorbed_dual_never_moves() {
        let rates = drift2();
        let m = mu_bd(&rates, -64, 64).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let oracle = BdOracle { rates: &rates };
        let traj = simulate_minimal(&oracle, 0, 20.0, 100_000, SeedSpec::new(200, 0));
        let mut rng = TrialRng::from_lane(SeedSpec::new(200, 0).lane(1));
        let coupled =
            simulate_dual_given_primal(&traj, IntervalState::line(), &oracle, &runner, &mut rng)
                .unwrap();
        assert_eq!(coupled.absorption_time, Some(0.0));
        for e in &coupled.events {
            assert!(e.dual.is_line());
        }
        // the primal marginal is reproduced event for event
        let primal_events: Vec<_> = coupled
            .events
            .iter()
            .filter(|e| {
                matches!(
                    e.kind,
                    CoupledEventKind::Init | CoupledEventKind::PrimalJump
                )
            })
            .map(|e| (e.time, e.primal))
            .collect();
        let expected: Vec<_> = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(&t, &s)| (t, s))
            .collect();
        assert_eq!(primal_events, expected);
    }

    #[test]
    fn marginal_preserved_with_active_dual() {
        let rates = drift2();
        let m = mu_bd(&rates, -64, 64).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let oracle = BdOracle { rates: &rates };
        for trial in 0..20u64 {
            let seed = SeedSpec::new(201, trial);
            let traj = simulate_minimal(&oracle, 0, 10.0, 100_000, seed);
            let mut rng = TrialRng::from_lane(seed.lane(1));
            let coupled = simulate_dual_given_primal(
                &traj,
                IntervalState::singleton(0),
                &oracle,
                &runner,
                &mut rng,
            )
            .unwrap();
            let primal_events: Vec<_> = coupled
                .events
                .iter()
                .filter(|e| {
                    matches!(
                        e.kind,
                        CoupledEventKind::Init | CoupledEventKind::PrimalJump
                    )
                })
                .map(|e| (e.time.to_bits(), e.primal))
                .collect();
            let expected: Vec<_> = traj
                .times
                .iter()
                .zip(&traj.states)
                .map(|(&t, &s)| (t.to_bits(), s))
                .collect();
            assert_eq!(primal_events, expected);
            // the dual always contains the primal
            for e in &coupled.events {
                assert!(e.dual.contains(e.primal), "{:?}", e);
            }
        }
    }

    #[test]
    fn initial_draw_matches_product_law() {
        // mixed dual initial law: half singleton {0}, half the interval
        // [-1, 1]; the joint law of (X_0, X*_0) is μ0*(q) Λ(q, x)
        let rates = drift2();
        let m = mu_bd(&rates, -32, 32).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let q0 = IntervalState::singleton(0);
        let q1 = IntervalState::finite(-1, 1);
        let mu0_star = vec![(q0, 0.5), (q1, 0.5)];
        // μ0 = μ0* Λ
        let weights: Vec<(i64, f64)> = vec![
            (-1, 0.5 * 0.25),
            (0, 0.5 * 1.0 + 0.5 * 0.5),
            (1, 0.5 * 0.25),
        ];
        let n = 40_000usize;
        let mut counts: HashMap<(i64, IntervalState), usize> = HashMap::new();
        let mut rng = TrialRng::new(SeedSpec::new(202, 0));
        for _ in 0..n {
            // draw x0 from μ0
            let u = rng.uniform();
            let x0 = if u < 0.125 {
                -1
            } else if u < 0.125 + 0.75 {
                0
            } else {
                1
            };
            let q = draw_initial_dual(&runner, &mu0_star, x0, &mut rng).unwrap();
            *counts.entry((x0, q)).or_insert(0) += 1;
        }
        let _ = weights;
        for (pair, want) in [
            ((-1i64, q1), 0.125),
            ((0, q0), 0.5),
            ((0, q1), 0.25),
            ((1, q1), 0.125),
        ] {
            let got = counts.get(&pair).copied().unwrap_or(0) as f64 / n as f64;
            let sigma = (want * (1.0 - want) / n as f64).sqrt();
            assert!(
                (got - want).abs() < 3.0 * sigma + 1e-12,
                "pair {pair:?}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn conditional_law_matches_kernel() {
        // scaled-down intertwining check at t = 0.5
        let rates = drift2();
        let m = mu_bd(&rates, -64, 64).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::default());
        let oracle = BdOracle { rates: &rates };
        let t_obs = 0.5;
        let trials = 20_000u64;
        let mut by_dual: HashMap<IntervalState, HashMap<i64, usize>> = HashMap::new();
        for trial in 0..trials {
            let seed = SeedSpec::new(203, trial);
            let traj = simulate_minimal(&oracle, 0, 1.0, 100_000, seed);
            let mut rng = TrialRng::from_lane(seed.lane(1));
            let coupled = simulate_dual_given_primal(
                &traj,
                IntervalState::singleton(0),
                &oracle,
                &runner,
                &mut rng,
            )
            .unwrap();
            let (x, q) = coupled.state_at(t_obs);
            *by_dual.entry(q).or_default().entry(x).or_insert(0) += 1;
        }
        let mut checked = 0;
        for (q, hist) in &by_dual {
            let hits: usize = hist.values().sum();
            if hits < 1000 {
                continue;
            }
            checked += 1;
            let row = lambda_row(&runner, q).unwrap();
            for (n, lw) in &row.entries {
                let p = lw.exp();
                if p < 1e-6 {
                    continue;
                }
                let got = hist.get(n).copied().unwrap_or(0) as f64 / hits as f64;
                let sigma = (p * (1.0 - p) / hits as f64).sqrt();
                assert!(
                    (got - p).abs() < 4.0 * sigma + 1e-9,
                    "state {n} of {q:?}: got {got}, want {p} ({hits} hits)"
                );
            }
        }
        assert!(checked >= 3, "only {checked} dual states had enough hits");
    }

    #[test]
    fn coupled_run_reaches_absorption_on_fast_family() {
        // the jump chain of this family is a symmetric walk, so paths are
        // jump-heavy; a short horizon keeps the test quick
        let rates = exp2();
        let m = mu_bd(&rates, -128, 128).unwrap();
        let runner = IntervalDualRunner::new(&rates, &m, ExplosionPolicy::with_threshold(32));
        let oracle = BdOracle { rates: &rates };
        let mut absorbed = 0;
        for trial in 0..30u64 {
            let seed = SeedSpec::new(204, trial);
            let traj = simulate_minimal(&oracle, 0, 10.0, 2_000_000, seed);
            let mut rng = TrialRng::from_lane(seed.lane(1));
            let coupled = simulate_dual_given_primal(
                &traj,
                IntervalState::singleton(0),
                &oracle,
                &runner,
                &mut rng,
            )
            .unwrap();
            if let Some(t) = coupled.absorption_time {
                absorbed += 1;
                // after absorption the dual is the full line
                let (_, q) = coupled.state_at(t + 1e-9);
                assert!(q.is_line());
            }
        }
        assert!(absorbed >= 29, "absorbed {absorbed}/30");
    }
}
