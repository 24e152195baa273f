//! Event-driven simulation of minimal jump processes from a generator row
//! oracle, plus exact transient distributions on finite truncations.

mod transient;

pub use transient::{transient_distribution, truncate_bd, truncate_graph, Generator};

use std::fmt::Debug;
use std::hash::Hash;
use std::io::Write;

use thiserror::Error;

use crate::rng::{SeedSpec, TrialRng};
use crate::state_space::{BDRates, GraphModel, Support, Vertex};

#[derive(Debug, Error)]
pub enum CtmcError {
    #[error("generator matrix is not square: {rows} rows, {cols} columns")]
    NonSquare { rows: usize, cols: usize },
    #[error("generator row {row} sums to {sum:e}, beyond the 1e-10 tolerance")]
    BadRowSums { row: usize, sum: f64 },
    #[error("negative off-diagonal entry at ({row}, {col})")]
    NegativeRate { row: usize, col: usize },
    #[error("initial distribution has {got} entries, expected {want}")]
    BadInitial { got: usize, want: usize },
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
}

/// Row oracle of a (possibly infinite) generator: for a state, the finite
/// list of neighbors with positive jump rates.
pub trait RateOracle {
    type State: Copy + Eq + Hash + Debug;

    /// Writes the off-diagonal row `(neighbor, rate)` entries into `out`.
    fn row_into(&self, s: Self::State, out: &mut Vec<(Self::State, f64)>);

    fn row(&self, s: Self::State) -> Vec<(Self::State, f64)> {
        let mut out = Vec::new();
        self.row_into(s, &mut out);
        out
    }

    /// Total exit rate `L_x`; zero marks an absorbing state.
    fn total_rate(&self, s: Self::State) -> f64 {
        self.row(s).iter().map(|&(_, r)| r).sum()
    }
}

/// Birth-death generator on `Z` (or on a table window, with reflecting ends).
#[derive(Debug, Clone, Copy)]
pub struct BdOracle<'a> {
    pub rates: &'a BDRates,
}

impl RateOracle for BdOracle<'_> {
    type State = i64;

    fn row_into(&self, n: i64, out: &mut Vec<(i64, f64)>) {
        out.clear();
        let support = self.rates.support();
        if !support.contains(n) {
            return;
        }
        if support.contains(n - 1) {
            out.push((n - 1, self.rates.death(n).expect("in support")));
        }
        if support.contains(n + 1) {
            out.push((n + 1, self.rates.birth(n).expect("in support")));
        }
    }
}

impl BdOracle<'_> {
    pub fn support(&self) -> Support {
        self.rates.support()
    }
}

/// Random-walk generator of a validated graph model.
#[derive(Debug, Clone, Copy)]
pub struct GraphOracle<'a> {
    pub model: &'a GraphModel,
}

impl RateOracle for GraphOracle<'_> {
    type State = Vertex;

    fn row_into(&self, x: Vertex, out: &mut Vec<(Vertex, f64)>) {
        out.clear();
        for y in self.model.neighbors(x) {
            out.push((y, self.model.rate(x, y)));
        }
    }
}

/// Why a simulated trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryEnd {
    HorizonReached,
    Absorbed,
    /// The jump budget ran out (or a holding time underflowed to zero);
    /// recorded as data so callers can diagnose near-explosions.
    JumpBudgetExhausted,
    /// Set by the explosion fast-forward policy of the dual simulators,
    /// never by [`simulate_minimal`].
    Exploded(f64),
}

/// Jump states and times of one simulated path. `states[i]` holds on
/// `[times[i], times[i+1])`.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    pub times: Vec<f64>,
    pub horizon: f64,
    pub terminal: TrajectoryEnd,
}

impl<S: Copy> Trajectory<S> {
    /// State at time `t` (the path is right-continuous).
    pub fn state_at(&self, t: f64) -> S {
        let idx = self.times.partition_point(|&u| u <= t);
        self.states[idx.saturating_sub(1).min(self.states.len() - 1)]
    }

    /// Time span this path actually covers: the horizon, unless a budget
    /// cut it short.
    pub fn covered_end(&self) -> f64 {
        match self.terminal {
            TrajectoryEnd::HorizonReached | TrajectoryEnd::Absorbed => self.horizon,
            TrajectoryEnd::JumpBudgetExhausted => *self.times.last().expect("nonempty"),
            TrajectoryEnd::Exploded(t) => t,
        }
    }

    pub fn jump_count(&self) -> usize {
        self.states.len() - 1
    }

    /// CSV dump: `jump,time,state` with an encoding chosen per model.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        encode: impl Fn(&S) -> String,
    ) -> std::io::Result<()> {
        writeln!(w, "# sstlab trajectory v1")?;
        writeln!(w, "jump,time,state")?;
        for (i, (s, t)) in self.states.iter().zip(&self.times).enumerate() {
            writeln!(w, "{},{},{}", i, t, encode(s))?;
        }
        Ok(())
    }
}

/// Simulates a minimal process: holding times are exponential in the total
/// exit rate, the next state is chosen proportionally to the row rates.
/// Stops at the horizon, at absorption, or when `max_jumps` runs out.
pub fn simulate_minimal<O: RateOracle>(
    oracle: &O,
    init: O::State,
    horizon: f64,
    max_jumps: usize,
    seed: SeedSpec,
) -> Trajectory<O::State> {
    let mut rng = TrialRng::new(seed);
    simulate_minimal_with(oracle, init, horizon, max_jumps, &mut rng)
}

pub fn simulate_minimal_with<O: RateOracle>(
    oracle: &O,
    init: O::State,
    horizon: f64,
    max_jumps: usize,
    rng: &mut TrialRng,
) -> Trajectory<O::State> {
    assert!(horizon > 0.0, "horizon must be positive");
    let mut traj = Trajectory {
        states: vec![init],
        times: vec![0.0f64],
        horizon,
        terminal: TrajectoryEnd::HorizonReached,
    };
    traj.terminal = run_segment(oracle, &mut traj, 0.0, horizon, max_jumps, rng);
    traj
}

/// Resumes a horizon-capped trajectory up to a later horizon, restarting
/// the clock at the old horizon (holding times are memoryless, so the
/// resumed path has the right law). `max_jumps` counts the whole path.
pub fn extend_minimal_with<O: RateOracle>(
    oracle: &O,
    traj: &mut Trajectory<O::State>,
    new_horizon: f64,
    max_jumps: usize,
    rng: &mut TrialRng,
) {
    debug_assert!(new_horizon >= traj.horizon);
    match traj.terminal {
        TrajectoryEnd::HorizonReached => {
            let resume_at = traj.horizon;
            traj.horizon = new_horizon;
            traj.terminal = run_segment(oracle, traj, resume_at, new_horizon, max_jumps, rng);
        }
        TrajectoryEnd::Absorbed => traj.horizon = new_horizon,
        // a budget- or stiffness-terminated path has no honest continuation
        _ => {}
    }
}

fn run_segment<O: RateOracle>(
    oracle: &O,
    traj: &mut Trajectory<O::State>,
    start: f64,
    horizon: f64,
    max_jumps: usize,
    rng: &mut TrialRng,
) -> TrajectoryEnd {
    let mut cur = *traj.states.last().expect("nonempty trajectory");
    let mut t = start;
    let mut row = Vec::with_capacity(4);
    loop {
        oracle.row_into(cur, &mut row);
        let total: f64 = row.iter().map(|&(_, r)| r).sum();
        if total <= 0.0 {
            return TrajectoryEnd::Absorbed;
        }
        let dt = rng.exponential(total);
        if !total.is_finite() || dt <= 0.0 {
            return TrajectoryEnd::JumpBudgetExhausted;
        }
        if t + dt > horizon {
            return TrajectoryEnd::HorizonReached;
        }
        t += dt;
        let mut target = rng.uniform() * total;
        let mut next = row[row.len() - 1].0;
        for &(s, r) in &row {
            if target < r {
                next = s;
                break;
            }
            target -= r;
        }
        traj.states.push(next);
        traj.times.push(t);
        cur = next;
        if traj.states.len() - 1 >= max_jumps {
            return TrajectoryEnd::JumpBudgetExhausted;
        }
    }
}
