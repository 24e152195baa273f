//! The dual chain on intervals of `Z`.
//!
//! States are intervals `[p, q]` with `p` in `Z ∪ {-∞}` and `q` in
//! `Z ∪ {+∞}`. The dual grows by absorbing an adjacent site and shrinks by
//! dropping an endpoint, with rates weighted by stationary-mass ratios; the
//! bi-infinite interval is the absorbing state. A bound can only reach
//! infinity through an explosion, so the simulator detects explosions with
//! an analytic tail-time test and restarts the process in the next stratum
//! (finite intervals, then half lines, then `Z`).

use std::io::Write;

use thiserror::Error;

use crate::logspace::{log_add, log_sub};
use crate::rng::{SeedSpec, TrialRng};
use crate::state_space::{BDRates, MassCache, Measure, StateSpaceError};

/// An interval of `Z`, possibly unbounded on either side (`None` stands for
/// the infinite endpoint).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IntervalState {
    pub lo: Option<i64>,
    pub hi: Option<i64>,
}

/// Strata of the interval dual, ordered by how many bounds sit at infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stratum {
    Bounded,
    HalfLine,
    Line,
}

impl IntervalState {
    pub fn finite(lo: i64, hi: i64) -> Self {
        assert!(lo <= hi, "empty interval");
        Self {
            lo: Some(lo),
            hi: Some(hi),
        }
    }

    pub fn singleton(n: i64) -> Self {
        Self::finite(n, n)
    }

    /// `(-∞, q]`.
    pub fn left_infinite(q: i64) -> Self {
        Self {
            lo: None,
            hi: Some(q),
        }
    }

    /// `[p, +∞)`.
    pub fn right_infinite(p: i64) -> Self {
        Self {
            lo: Some(p),
            hi: None,
        }
    }

    /// The whole line, the absorbing state.
    pub fn line() -> Self {
        Self { lo: None, hi: None }
    }

    pub fn is_line(self) -> bool {
        self.lo.is_none() && self.hi.is_none()
    }

    pub fn is_singleton(self) -> bool {
        matches!((self.lo, self.hi), (Some(p), Some(q)) if p == q)
    }

    pub fn contains(self, n: i64) -> bool {
        self.lo.is_none_or(|p| p <= n) && self.hi.is_none_or(|q| n <= q)
    }

    pub fn stratum(self) -> Stratum {
        match (self.lo, self.hi) {
            (Some(_), Some(_)) => Stratum::Bounded,
            (None, None) => Stratum::Line,
            _ => Stratum::HalfLine,
        }
    }

    pub fn stratum_index(self) -> u8 {
        match self.stratum() {
            Stratum::Bounded => 1,
            Stratum::HalfLine => 2,
            Stratum::Line => 3,
        }
    }

    pub fn encode(self) -> String {
        let lo = self.lo.map_or_else(|| "-inf".to_owned(), |p| p.to_string());
        let hi = self.hi.map_or_else(|| "+inf".to_owned(), |q| q.to_string());
        format!("{lo}:{hi}")
    }
}

#[derive(Debug, Error)]
pub enum DualError {
    #[error("the state is absorbing; it has no outgoing transitions")]
    AbsorbingState,
    #[error(transparent)]
    Measure(#[from] StateSpaceError),
}

/// `log μ(s)` of an interval state under a window measure.
pub fn log_interval_mass(s: IntervalState, measure: &Measure) -> Result<f64, StateSpaceError> {
    match (s.lo, s.hi) {
        (Some(p), Some(q)) => measure.log_interval(p, q),
        (None, Some(q)) => measure.log_half_left(q),
        (Some(p), None) => measure.log_half_right(p),
        (None, None) => Ok(0.0),
    }
}

/// Off-diagonal dual transition rates from `s`: up to four moves, growing or
/// shrinking by one site on either side. Infinite endpoints contribute no
/// moves, and a singleton does not shrink (the empty set is not a state).
pub fn dual_rates(
    s: IntervalState,
    rates: &BDRates,
    measure: &Measure,
) -> Result<Vec<(IntervalState, f64)>, DualError> {
    if s.is_line() {
        return Err(DualError::AbsorbingState);
    }
    let log_m = log_interval_mass(s, measure)?;
    let mut out = Vec::with_capacity(4);

    if let Some(p) = s.lo {
        if in_rate_support(rates, p - 1) {
            let grown = IntervalState {
                lo: Some(p - 1),
                ..s
            };
            let ratio = (log_interval_mass(grown, measure)? - log_m).exp();
            out.push((grown, ratio * rates.birth(p - 1)?));
        }
        // dropping p needs outflow from p across the interval boundary,
        // which a finite chain lacks at its window edge
        if !s.is_singleton() && in_rate_support(rates, p - 1) {
            let shrunk = IntervalState {
                lo: Some(p + 1),
                ..s
            };
            let ratio = (log_interval_mass(shrunk, measure)? - log_m).exp();
            out.push((shrunk, ratio * rates.death(p)?));
        }
    }
    if let Some(q) = s.hi {
        if in_rate_support(rates, q + 1) {
            let grown = IntervalState {
                hi: Some(q + 1),
                ..s
            };
            let ratio = (log_interval_mass(grown, measure)? - log_m).exp();
            out.push((grown, ratio * rates.death(q + 1)?));
        }
        if !s.is_singleton() && in_rate_support(rates, q + 1) {
            let shrunk = IntervalState {
                hi: Some(q - 1),
                ..s
            };
            let ratio = (log_interval_mass(shrunk, measure)? - log_m).exp();
            out.push((shrunk, ratio * rates.birth(q)?));
        }
    }
    Ok(out)
}

fn in_rate_support(rates: &BDRates, n: i64) -> bool {
    rates.support().contains(n)
}

/// Homogeneous comparison birth-death rates at site `n`: the dynamics of the
/// right bound of a left-infinite interval. They bound every interval's
/// right-endpoint rates: growth is never slower, shrinkage never faster.
pub fn comparison_rates(
    n: i64,
    rates: &BDRates,
    measure: &Measure,
) -> Result<(f64, f64), StateSpaceError> {
    let here = measure.log_half_left(n)?;
    let b_tilde = (measure.log_half_left(n + 1)? - here).exp() * rates.death(n + 1)?;
    let a_tilde = (measure.log_half_left(n - 1)? - here).exp() * rates.birth(n)?;
    Ok((b_tilde, a_tilde))
}

/// Knobs of the explosion fast-forward.
#[derive(Debug, Clone, Copy)]
pub struct ExplosionPolicy {
    /// A bound must pass this magnitude before the tail test is consulted.
    pub bound_threshold: i64,
    /// Declare the explosion once the analytic bound on the expected
    /// remaining passage time drops below this budget; also the increment
    /// cutoff of the sampled fast-forward remainder.
    pub tail_time_budget: f64,
    /// Jump budget per excursion (between explosions).
    pub jump_budget: usize,
}

impl Default for ExplosionPolicy {
    fn default() -> Self {
        Self {
            bound_threshold: 10_000,
            tail_time_budget: 1e-9,
            jump_budget: 10_000_000,
        }
    }
}

impl ExplosionPolicy {
    pub fn with_threshold(bound_threshold: i64) -> Self {
        Self {
            bound_threshold,
            ..Self::default()
        }
    }
}

/// Which component of the dual state exploded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplodedBound {
    Left,
    Right,
    Branch(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Init,
    Jump,
    Explosion,
    Absorption,
}

#[derive(Debug, Clone)]
pub struct DualStep<S> {
    pub time: f64,
    pub state: S,
    pub kind: StepKind,
}

#[derive(Debug, Clone, Copy)]
pub struct ExplosionRecord {
    pub time: f64,
    pub bound: ExplodedBound,
    pub stratum_before: u8,
    pub stratum_after: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualTerminal {
    Absorbed,
    HorizonReached,
    /// Budgets ran out before any explosion was certified; expected whenever
    /// the existence criterion diverges.
    NoExplosionDetected,
}

/// Event log of one stratified dual run.
#[derive(Debug, Clone)]
pub struct DualTrajectory<S> {
    pub steps: Vec<DualStep<S>>,
    pub explosions: Vec<ExplosionRecord>,
    pub absorption_time: Option<f64>,
    pub terminal: DualTerminal,
}

impl<S: Clone> DualTrajectory<S> {
    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> &S {
        let idx = self.steps.partition_point(|s| s.time <= t);
        &self.steps[idx.saturating_sub(1).min(self.steps.len() - 1)].state
    }

    /// CSV dump: one row per event, with the state rendered by `encode`
    /// under the caller-provided column header.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        state_columns: &str,
        encode: impl Fn(&S) -> String,
    ) -> std::io::Result<()> {
        writeln!(w, "# sstlab dual-trajectory v1")?;
        writeln!(w, "time,{state_columns},event")?;
        for s in &self.steps {
            let kind = match s.kind {
                StepKind::Init => "init",
                StepKind::Jump => "jump",
                StepKind::Explosion => "explosion",
                StepKind::Absorption => "absorption",
            };
            writeln!(w, "{},{},{}", s.time, encode(&s.state), kind)?;
        }
        Ok(())
    }
}

/// Tail-time table of one side: `tails[j]` bounds the expected remaining
/// passage time to infinity from position threshold + j, using the
/// pure-birth bound (the dual's outward rate at bound `n` is at least the
/// underlying jump rate into the interval).
#[derive(Debug, Clone)]
struct SideTail {
    diverges: bool,
    tails: Vec<f64>,
}

const TAIL_SCAN_CAP: usize = 200_000;

impl SideTail {
    fn build(
        policy: &ExplosionPolicy,
        mut outward_rate: impl FnMut(i64) -> Option<f64>,
        direction: i64,
        threshold: i64,
    ) -> Self {
        // forward scan until the per-step time is negligible at the budget
        // scale; if that never happens the side cannot be certified to
        // explode and the test stays off
        let cutoff = policy.tail_time_budget * 1e-6;
        let mut steps = Vec::new();
        let mut n = threshold;
        let mut converged = false;
        for _ in 0..TAIL_SCAN_CAP {
            let Some(rate) = outward_rate(n) else {
                // support ended (table family): no explosion past the window
                break;
            };
            let dt = 1.0 / rate;
            steps.push(dt);
            if dt < cutoff {
                converged = true;
                break;
            }
            n += direction;
        }
        if !converged {
            return Self {
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
        Self {
            diverges: false,
            tails,
        }
    }

    fn qualifies(&self, dist: i64, budget: f64) -> bool {
        if self.diverges {
            return false;
        }
        debug_assert!(dist >= 0);
        let j = (dist as usize).min(self.tails.len().saturating_sub(1));
        self.tails.get(j).is_some_and(|&t| t < budget)
    }
}

/// Reusable interval-dual simulator: one per model, shared across trials.
#[derive(Debug)]
pub struct IntervalDualRunner<'a> {
    rates: &'a BDRates,
    measure: &'a Measure,
    policy: ExplosionPolicy,
    right_tail: SideTail,
    left_tail: SideTail,
}

impl<'a> IntervalDualRunner<'a> {
    pub fn new(rates: &'a BDRates, measure: &'a Measure, policy: ExplosionPolicy) -> Self {
        let m = policy.bound_threshold;
        let right_tail = SideTail::build(
            &policy,
            |n| rates.death(n + 1).ok().filter(|r| r.is_finite()),
            1,
            m,
        );
        let left_tail = SideTail::build(
            &policy,
            |n| rates.birth(n - 1).ok().filter(|r| r.is_finite()),
            -1,
            -m,
        );
        Self {
            rates,
            measure,
            policy,
            right_tail,
            left_tail,
        }
    }

    pub fn rates(&self) -> &BDRates {
        self.rates
    }

    pub fn measure(&self) -> &Measure {
        self.measure
    }

    pub fn policy(&self) -> &ExplosionPolicy {
        &self.policy
    }

    /// Does the tail test certify an explosion for this bound position?
    pub fn right_explodes(&self, q: i64) -> bool {
        q >= self.policy.bound_threshold
            && self.right_tail.qualifies(
                q - self.policy.bound_threshold,
                self.policy.tail_time_budget,
            )
    }

    pub fn left_explodes(&self, p: i64) -> bool {
        p <= -self.policy.bound_threshold
            && self.left_tail.qualifies(
                -self.policy.bound_threshold - p,
                self.policy.tail_time_budget,
            )
    }

    /// Samples the fast-forward remainder: the leftover passage time of the
    /// exploding bound, summing exponential increments at the actual outward
    /// rates until one falls below the budget.
    pub(crate) fn sample_remainder(
        &self,
        cache: &mut MassCache,
        state: IntervalState,
        cur_logm: f64,
        side: ExplodedBound,
        rng: &mut TrialRng,
    ) -> f64 {
        let delta = self.policy.tail_time_budget;
        let mut total = 0.0f64;
        let mut logm = cur_logm;
        let mut n = match side {
            ExplodedBound::Right => state.hi.expect("finite bound"),
            ExplodedBound::Left => state.lo.expect("finite bound"),
            ExplodedBound::Branch(_) => unreachable!("interval dual"),
        };
        for _ in 0..TAIL_SCAN_CAP {
            let (next, base_rate) = match side {
                ExplodedBound::Right => (n + 1, self.rates.death(n + 1).ok()),
                ExplodedBound::Left => (n - 1, self.rates.birth(n - 1).ok()),
                ExplodedBound::Branch(_) => unreachable!(),
            };
            let Some(base) = base_rate else { break };
            let grown = log_add(logm, cache.log_w(next));
            let rate = (grown - logm).exp() * base;
            if !rate.is_finite() {
                break;
            }
            let dt = rng.exponential(rate);
            total += dt;
            if dt < delta {
                break;
            }
            logm = grown;
            n = next;
        }
        total
    }

    /// Simulates one stratified dual path from `init` up to `horizon`.
    pub fn simulate(
        &self,
        init: IntervalState,
        horizon: f64,
        seed: SeedSpec,
    ) -> DualTrajectory<IntervalState> {
        let mut rng = TrialRng::new(seed);
        self.simulate_with(init, horizon, &mut rng)
    }

    pub fn simulate_with(
        &self,
        init: IntervalState,
        horizon: f64,
        rng: &mut TrialRng,
    ) -> DualTrajectory<IntervalState> {
        let mut cache = MassCache::new(self.rates, self.measure);
        let mut steps = vec![DualStep {
            time: 0.0,
            state: init,
            kind: StepKind::Init,
        }];
        let mut explosions = Vec::new();

        if init.is_line() {
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
        let mut logm = log_mass_cached(&mut cache, state);
        let mut t = 0.0f64;
        let mut excursion_jumps = 0usize;
        let mut since_refresh = 0u32;

        // entering an eligible state counts, including the initial one
        let mut pending = self.explosion_queue(state);

        let terminal = 'outer: loop {
            // explosion fast-forward takes precedence over further jumps
            while let Some(side) = pending.pop() {
                let remainder = self.sample_remainder(&mut cache, state, logm, side, rng);
                let t_expl = t + remainder;
                if t_expl > horizon {
                    break 'outer DualTerminal::HorizonReached;
                }
                let before = state.stratum_index();
                state = match side {
                    ExplodedBound::Right => IntervalState { hi: None, ..state },
                    ExplodedBound::Left => IntervalState { lo: None, ..state },
                    ExplodedBound::Branch(_) => unreachable!(),
                };
                t = t_expl;
                logm = log_mass_cached(&mut cache, state);
                excursion_jumps = 0;
                explosions.push(ExplosionRecord {
                    time: t,
                    bound: side,
                    stratum_before: before,
                    stratum_after: state.stratum_index(),
                });
                steps.push(DualStep {
                    time: t,
                    state,
                    kind: StepKind::Explosion,
                });
                if state.is_line() {
                    steps.push(DualStep {
                        time: t,
                        state,
                        kind: StepKind::Absorption,
                    });
                    break 'outer DualTerminal::Absorbed;
                }
            }

            // enumerate the at most four moves
            let mut moves: [Option<(IntervalState, f64, f64)>; 4] = [None, None, None, None];
            let mut total = 0.0f64;
            if let Some(p) = state.lo {
                if in_rate_support(self.rates, p - 1) {
                    let grown = IntervalState {
                        lo: Some(p - 1),
                        ..state
                    };
                    let new_logm = log_add(logm, cache.log_w(p - 1));
                    let rate = (new_logm - logm).exp() * self.rates.birth(p - 1).expect("support");
                    moves[0] = Some((grown, rate, new_logm));
                    total += rate;
                }
                if !state.is_singleton() && in_rate_support(self.rates, p - 1) {
                    let shrunk = IntervalState {
                        lo: Some(p + 1),
                        ..state
                    };
                    let new_logm = shrink_logm(&mut cache, logm, shrunk, p);
                    let rate = (new_logm - logm).exp() * self.rates.death(p).expect("support");
                    moves[1] = Some((shrunk, rate, new_logm));
                    total += rate;
                }
            }
            if let Some(q) = state.hi {
                if in_rate_support(self.rates, q + 1) {
                    let grown = IntervalState {
                        hi: Some(q + 1),
                        ..state
                    };
                    let new_logm = log_add(logm, cache.log_w(q + 1));
                    let rate = (new_logm - logm).exp() * self.rates.death(q + 1).expect("support");
                    moves[2] = Some((grown, rate, new_logm));
                    total += rate;
                }
                if !state.is_singleton() && in_rate_support(self.rates, q + 1) {
                    let shrunk = IntervalState {
                        hi: Some(q - 1),
                        ..state
                    };
                    let new_logm = shrink_logm(&mut cache, logm, shrunk, q);
                    let rate = (new_logm - logm).exp() * self.rates.birth(q).expect("support");
                    moves[3] = Some((shrunk, rate, new_logm));
                    total += rate;
                }
            }

            if total <= 0.0 {
                // table-family duals absorb at the full window
                steps.push(DualStep {
                    time: t,
                    state,
                    kind: StepKind::Absorption,
                });
                break DualTerminal::Absorbed;
            }
            let dt = rng.exponential(total);
            if !total.is_finite() || dt <= 0.0 {
                // representability guard: rates too stiff to advance the clock
                break DualTerminal::NoExplosionDetected;
            }
            if t + dt > horizon {
                break DualTerminal::HorizonReached;
            }
            t += dt;

            let mut target = rng.uniform() * total;
            let mut chosen = None;
            for m in moves.iter().flatten() {
                if target < m.1 {
                    chosen = Some(*m);
                    break;
                }
                target -= m.1;
            }
            let (next, _, new_logm) =
                chosen.unwrap_or_else(|| *moves.iter().flatten().last().expect("nonempty"));

            let grew_right = state.hi.is_some() && next.hi > state.hi;
            let grew_left = matches!((next.lo, state.lo), (Some(a), Some(b)) if a < b);
            state = next;
            logm = new_logm;
            since_refresh += 1;
            if since_refresh >= 4096 {
                logm = log_mass_cached(&mut cache, state);
                since_refresh = 0;
            }
            steps.push(DualStep {
                time: t,
                state,
                kind: StepKind::Jump,
            });
            excursion_jumps += 1;
            if excursion_jumps > self.policy.jump_budget {
                break DualTerminal::NoExplosionDetected;
            }

            if grew_right {
                if let Some(q) = state.hi {
                    if self.right_explodes(q) {
                        pending.push(ExplodedBound::Right);
                    }
                }
            }
            if grew_left {
                if let Some(p) = state.lo {
                    if self.left_explodes(p) {
                        pending.push(ExplodedBound::Left);
                    }
                }
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

    fn explosion_queue(&self, state: IntervalState) -> Vec<ExplodedBound> {
        let mut pending = Vec::new();
        if let Some(p) = state.lo {
            if self.left_explodes(p) {
                pending.push(ExplodedBound::Left);
            }
        }
        if let Some(q) = state.hi {
            if self.right_explodes(q) {
                pending.push(ExplodedBound::Right);
            }
        }
        pending
    }
}

fn log_mass_cached(cache: &mut MassCache, s: IntervalState) -> f64 {
    match (s.lo, s.hi) {
        (Some(p), Some(q)) => cache.log_range(p, q),
        (None, Some(q)) => cache.log_tail_left(q),
        (Some(p), None) => cache.log_tail_right(p),
        (None, None) => 0.0,
    }
}

/// Mass after dropping an endpoint: log-subtraction with a direct
/// resummation fallback once the removed site dominates the interval.
fn shrink_logm(cache: &mut MassCache, logm: f64, shrunk: IntervalState, removed: i64) -> f64 {
    let w = cache.log_w(removed);
    let frac = (w - logm).exp();
    if frac < 0.999 {
        if let Some(v) = log_sub(logm, w) {
            return v;
        }
    }
    log_mass_cached(cache, shrunk)
}

/// One-shot convenience wrapper around [`IntervalDualRunner`].
pub fn simulate_dual(
    rates: &BDRates,
    measure: &Measure,
    init: IntervalState,
    horizon: f64,
    policy: ExplosionPolicy,
    seed: SeedSpec,
) -> DualTrajectory<IntervalState> {
    IntervalDualRunner::new(rates, measure, policy).simulate(init, horizon, seed)
}
