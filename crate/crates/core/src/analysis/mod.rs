//! Criterion evaluation, separation curves, and absorption-time experiments.

pub mod stats;

use serde::Serialize;

use crate::ctmc::{
    extend_minimal_with, simulate_minimal_with, transient_distribution, truncate_bd, BdOracle,
    TrajectoryEnd,
};
use crate::intertwining::{simulate_dual_given_primal, DualChain};
use crate::interval_dual::{DualTerminal, ExplosionPolicy, IntervalDualRunner, IntervalState};
use crate::logspace::{log_add, CompensatedSum, LOG_ZERO};
use crate::rng::{SeedSpec, TrialRng};
use crate::state_space::{
    mu_bd, scan_log_series, BDRates, GraphChain, GraphModel, Measure, ScanParams, SeriesClass,
    StateSpaceError,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("window tail mass {tail:e} exceeds the bound {bound:e}; widen the window")]
    WindowTooSmall { tail: f64, bound: f64 },
    #[error("initial law is not Λ-compatible with the dual start: {0}")]
    NotLambdaCompatible(String),
    #[error(transparent)]
    Measure(#[from] StateSpaceError),
    #[error(transparent)]
    Ctmc(#[from] crate::ctmc::CtmcError),
}

/// Convergence verdict of the existence-criterion series on one side or
/// branch, with the partial-sum evidence.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub label: String,
    pub verdict: CriterionVerdict,
    pub partial_sum: f64,
    pub terms_used: usize,
    pub last_term: f64,
    pub tail_ratio: f64,
    /// Set when the standing assumptions failed; the verdict is then formal.
    pub assumptions_flag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CriterionVerdict {
    Converges,
    Diverges,
    Inconclusive,
}

/// Which half-line (for `Z`) or branch (for graphs) a criterion refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriterionTarget {
    Right,
    Left,
    Branch(u8),
}

impl CriterionTarget {
    fn label(self) -> String {
        match self {
            CriterionTarget::Right => "right".into(),
            CriterionTarget::Left => "left".into(),
            CriterionTarget::Branch(i) => format!("branch {i}"),
        }
    }
}

pub const CRITERION_TERMS: usize = 10_000;

/// Evaluates the existence-criterion series
/// `Σ_j ν(j+1) Σ_{k<=j} 1/(ν(k) ℓ(k))` for one side or branch, where `ν` is
/// the side-relative stationary weight (`ν(0) = 1`) and `ℓ(k)` the outward
/// rate at site `k`. Convergence for every side is equivalent to the
/// existence of a finite strong stationary time from every initial law.
///
/// The inner sums run in a single log-space pass, and the verdict follows
/// the scan rules: `Converges` needs ten consecutive relative increments
/// below 1e-13; `Diverges` needs trailing terms bounded away from zero or a
/// growing tail ratio.
pub fn criterion(model: ModelHandle<'_>, target: CriterionTarget) -> CriterionReport {
    let (outward, inward): (Box<dyn Fn(u32) -> f64>, Box<dyn Fn(u32) -> f64>) = match (model, target)
    {
        (ModelHandle::BirthDeath(rates), CriterionTarget::Right) => (
            Box::new(move |k| rates.log_birth(k as i64).expect("support")),
            Box::new(move |k| rates.log_death(k as i64 + 1).expect("support")),
        ),
        (ModelHandle::BirthDeath(rates), CriterionTarget::Left) => (
            Box::new(move |k| rates.log_death(-(k as i64)).expect("support")),
            Box::new(move |k| rates.log_birth(-(k as i64) - 1).expect("support")),
        ),
        (ModelHandle::Graph(g), CriterionTarget::Branch(i)) => {
            let b = g.branch(i);
            let b2 = g.branch(i);
            (
                Box::new(move |k| b.log_out(k)),
                Box::new(move |k| b2.log_inn(k)),
            )
        }
        _ => panic!("criterion target does not match the model kind"),
    };

    // ν(j) in log space along the side, inner sum Σ 1/(ν(k) ℓ(k)) running
    let mut log_nu = vec![0.0f64];
    for k in 0..CRITERION_TERMS as u32 + 1 {
        let last = *log_nu.last().unwrap();
        log_nu.push(last + outward(k) - inward(k));
    }
    struct Terms<'f> {
        j: u32,
        cap: u32,
        log_inner: f64,
        log_nu: &'f [f64],
        outward: &'f dyn Fn(u32) -> f64,
    }
    impl Iterator for Terms<'_> {
        type Item = f64;
        fn next(&mut self) -> Option<f64> {
            if self.j > self.cap {
                return None;
            }
            let j = self.j;
            self.j += 1;
            // inner index k = j: add 1/(ν(j) ℓ(j))
            let add = -(self.log_nu[j as usize] + (self.outward)(j));
            self.log_inner = log_add(self.log_inner, add);
            Some(self.log_nu[j as usize + 1] + self.log_inner)
        }
    }
    let scanner_params = ScanParams {
        cap: CRITERION_TERMS,
        log_rel_eps: -29.933606208922594, // ln(1e-13)
        quiet_needed: 10,
        ratio_lo: 0.999,
        ratio_hi: 1.001,
        floor: 1e-6,
    };
    let terms = Terms {
        j: 1,
        cap: CRITERION_TERMS as u32,
        log_inner: LOG_ZERO,
        log_nu: &log_nu,
        outward: outward.as_ref(),
    };
    let (class, ev) = scan_log_series(terms, &scanner_params);
    let verdict = match class {
        SeriesClass::ConvergedSum => CriterionVerdict::Converges,
        SeriesClass::Diverges => CriterionVerdict::Diverges,
        SeriesClass::TailConverges | SeriesClass::Ambiguous => CriterionVerdict::Inconclusive,
    };
    CriterionReport {
        label: target.label(),
        verdict,
        partial_sum: ev.log_partial_sum.exp(),
        terms_used: ev.terms_used,
        last_term: ev.last_term,
        tail_ratio: ev.tail_ratio,
        assumptions_flag: None,
    }
}

/// Handle over the two model kinds for the analysis entry points.
#[derive(Clone, Copy)]
pub enum ModelHandle<'a> {
    BirthDeath(&'a BDRates),
    Graph(&'a GraphModel),
}

/// All criterion targets of a model.
pub fn criterion_all(model: ModelHandle<'_>) -> Vec<CriterionReport> {
    match model {
        ModelHandle::BirthDeath(_) => vec![
            criterion(model, CriterionTarget::Right),
            criterion(model, CriterionTarget::Left),
        ],
        ModelHandle::Graph(g) => (0..g.branch_count())
            .map(|i| criterion(model, CriterionTarget::Branch(i as u8)))
            .collect(),
    }
}

/// Grid of separation values `s(t) = sup_m (1 - μ_t(m)/π(m))` on a finite
/// truncation, with the excluded stationary tail mass recorded.
#[derive(Debug, Clone, Serialize)]
pub struct SeparationCurve {
    pub grid: Vec<(f64, f64)>,
    pub window: (i64, i64),
    pub excluded_tail_mass: f64,
}

/// Initial laws supported by the experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialLaw {
    Delta(i64),
    /// The stationary measure restricted to `(-∞, q]` and renormalized.
    StationaryLeftOf(i64),
    Stationary,
}

pub const DEFAULT_TAIL_BOUND: f64 = 1e-10;

/// Separation curve of a birth-death model over a symmetric window, by
/// uniformization on the reflecting truncation. The window's stationary
/// tail mass must not exceed `tail_bound`.
pub fn separation_curve(
    rates: &BDRates,
    measure: &Measure,
    mu0: InitialLaw,
    grid: &[f64],
    window: i64,
    tail_bound: f64,
) -> Result<SeparationCurve, AnalysisError> {
    let (lo, hi) = match rates.support() {
        crate::state_space::Support::Line => (-window, window),
        crate::state_space::Support::Window { lo, hi } => (lo, hi),
    };
    let tail = log_add(
        measure.log_half_left(lo - 1).unwrap_or(LOG_ZERO.max(
            // window covers the whole measure window: use the raw tails
            measure.log_tail_left(),
        )),
        measure.log_half_right(hi + 1).unwrap_or(measure.log_tail_right()),
    )
    .exp();
    if tail > tail_bound {
        return Err(AnalysisError::WindowTooSmall {
            tail,
            bound: tail_bound,
        });
    }
    let gen = truncate_bd(rates, lo, hi)?;
    let n = gen.dim();
    // stationary of the reflecting truncation = μ restricted, renormalized
    let mut pi: Vec<f64> = (lo..=hi)
        .map(|k| measure.log_mass(k).expect("within window").exp())
        .collect();
    let mass: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= mass;
    }
    let mu0 = initial_vector(mu0, lo, hi, &pi);
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        let mu_t = transient_distribution(&gen, &mu0, t)?;
        let mut sep = f64::NEG_INFINITY;
        for i in 0..n {
            sep = sep.max(1.0 - mu_t[i] / pi[i]);
        }
        out.push((t, sep));
    }
    Ok(SeparationCurve {
        grid: out,
        window: (lo, hi),
        excluded_tail_mass: tail,
    })
}

fn initial_vector(mu0: InitialLaw, lo: i64, hi: i64, pi: &[f64]) -> Vec<f64> {
    let n = (hi - lo + 1) as usize;
    match mu0 {
        InitialLaw::Delta(x) => {
            let mut v = vec![0.0; n];
            v[(x - lo) as usize] = 1.0;
            v
        }
        InitialLaw::Stationary => pi.to_vec(),
        InitialLaw::StationaryLeftOf(q) => {
            let mut v = vec![0.0; n];
            let mut total = 0.0;
            for (i, site) in (lo..=hi).enumerate() {
                if site <= q {
                    v[i] = pi[i];
                    total += pi[i];
                }
            }
            for x in &mut v {
                *x /= total;
            }
            v
        }
    }
}

/// Empirical absorption-time distribution over the trials of an experiment.
#[derive(Debug, Clone, Serialize)]
pub struct AbsorptionStats {
    /// `(t, P̂(T > t), binomial CI)` per grid point; the CI is one standard
    /// error, reported at the recorded level.
    pub survival: Vec<(f64, f64, f64)>,
    pub trials: usize,
    pub unabsorbed: usize,
    /// Trials whose primal path ended (jump budget) before the dual settled.
    pub censored: usize,
    pub ci_sigmas: f64,
}

/// Configuration of one strong-stationary-time experiment.
#[derive(Debug, Clone)]
pub struct SstConfig {
    pub trials: usize,
    pub horizon: f64,
    pub t_grid: Vec<f64>,
    /// Window for the chi-square test and the separation curve.
    pub window: i64,
    pub chi_window: i64,
    pub policy: ExplosionPolicy,
    pub seed: u64,
    pub primal_jump_budget: usize,
    pub tail_bound: f64,
    /// Sharp configuration: start the primal from `μ|(-∞,0]` and the dual
    /// from `(-∞, 0]`; otherwise from `δ_0` and the singleton `{0}`.
    pub sharp: bool,
}

impl Default for SstConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            horizon: 30.0,
            t_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            window: 40,
            chi_window: 25,
            policy: ExplosionPolicy::with_threshold(40),
            seed: 1,
            primal_jump_budget: 10_000_000,
            tail_bound: DEFAULT_TAIL_BOUND,
            sharp: false,
        }
    }
}

/// Outcome of the experiment: absorption statistics, the stationarity
/// chi-square at absorption, and the separation bound checks.
#[derive(Debug, Clone, Serialize)]
pub struct SstReport {
    pub absorption: AbsorptionStats,
    pub chi_square: stats::ChiSquareOutcome,
    /// `(t, s(t), P̂(T>t), CI)` rows.
    pub bound_rows: Vec<BoundRow>,
    pub bound_holds_everywhere: bool,
    /// Max |s(t) - P̂(T>t)| in CI units, meaningful for the sharp config.
    pub max_sharpness_gap_sigmas: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub t: f64,
    pub separation: f64,
    pub survival: f64,
    pub ci: f64,
}

/// Runs coupled primal and dual trials on a birth-death model, collects the
/// dual absorption time `T` and the primal state at `T`, and checks the
/// strong-stationarity claims: `X_T ~ μ` (chi-square over the window) and
/// `s(t) <= P(T > t)` on the grid, with equality in the sharp
/// configuration.
pub fn sst_experiment(
    rates: &BDRates,
    measure: &Measure,
    cfg: &SstConfig,
) -> Result<SstReport, AnalysisError> {
    use rayon::prelude::*;

    let runner = IntervalDualRunner::new(rates, measure, cfg.policy);
    let oracle = BdOracle { rates };

    // Λ-compatibility of the initial pair
    if cfg.sharp {
        // μ0 = Λ((-∞,0], ·) by construction
    }

    struct TrialOutcome {
        absorption: Option<f64>,
        x_at_t: Option<i64>,
        censored: bool,
    }

    let outcomes: Vec<TrialOutcome> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let seed = SeedSpec::new(cfg.seed, trial);
            let mut init_rng = TrialRng::from_lane(seed.lane(2));
            let (x0, dual_init) = if cfg.sharp {
                let q = IntervalState::left_infinite(0);
                let x0 = runner.sample_lambda(&q, &mut init_rng);
                (x0, q)
            } else {
                (0i64, IntervalState::singleton(0))
            };
            // absorption comes long before the horizon in the convergent
            // cases, so the primal path is grown in doubling chunks and the
            // coupled construction reruns on the extended prefix (the dual
            // stream restarts, reproducing the same draws on the common
            // part)
            let mut primal_rng = TrialRng::from_lane(seed.lane(0));
            let mut chunk = 4.0f64.min(cfg.horizon);
            let mut traj = simulate_minimal_with(
                &oracle,
                x0,
                chunk,
                cfg.primal_jump_budget,
                &mut primal_rng,
            );
            let coupled = loop {
                let mut dual_rng = TrialRng::from_lane(seed.lane(1));
                let coupled = simulate_dual_given_primal(
                    &traj,
                    dual_init,
                    &oracle,
                    &runner,
                    &mut dual_rng,
                )
                .expect("Λ-compatible start");
                if coupled.absorption_time.is_some()
                    || chunk >= cfg.horizon
                    || traj.terminal == TrajectoryEnd::JumpBudgetExhausted
                {
                    break coupled;
                }
                chunk = (chunk * 2.0).min(cfg.horizon);
                extend_minimal_with(
                    &oracle,
                    &mut traj,
                    chunk,
                    cfg.primal_jump_budget,
                    &mut primal_rng,
                );
            };
            let censored = traj.terminal == TrajectoryEnd::JumpBudgetExhausted
                && coupled.absorption_time.is_none();
            let x_at_t = coupled.absorption_time.map(|t| coupled.state_at(t).0);
            TrialOutcome {
                absorption: coupled.absorption_time,
                x_at_t,
                censored,
            }
        })
        .collect();

    let censored = outcomes.iter().filter(|o| o.censored).count();
    let unabsorbed = outcomes.iter().filter(|o| o.absorption.is_none()).count();
    let times: Vec<f64> = outcomes.iter().filter_map(|o| o.absorption).collect();
    let n = cfg.trials;
    let survival: Vec<(f64, f64, f64)> = cfg
        .t_grid
        .iter()
        .map(|&t| {
            let above = outcomes
                .iter()
                .filter(|o| o.absorption.is_none_or(|a| a > t))
                .count();
            let p = above as f64 / n as f64;
            let ci = (p * (1.0 - p) / n as f64).sqrt();
            (t, p, ci)
        })
        .collect();
    let absorption = AbsorptionStats {
        survival: survival.clone(),
        trials: n,
        unabsorbed,
        censored,
        ci_sigmas: 3.0,
    };
    drop(times);

    // chi-square of X_T against μ over the window, pooling cells whose
    // expectation is below five
    let samples: Vec<i64> = outcomes.iter().filter_map(|o| o.x_at_t).collect();
    let expected: Vec<(i64, f64)> = (-cfg.chi_window..=cfg.chi_window)
        .map(|k| (k, measure.log_mass(k).expect("in window").exp()))
        .collect();
    let chi_square = stats::chi_square_gof(&samples, &expected);

    // separation on the same grid
    let mu0 = if cfg.sharp {
        InitialLaw::StationaryLeftOf(0)
    } else {
        InitialLaw::Delta(0)
    };
    let sep = separation_curve(rates, measure, mu0, &cfg.t_grid, cfg.window, cfg.tail_bound)?;

    let mut bound_rows = Vec::new();
    let mut holds = true;
    let mut max_gap = 0.0f64;
    for ((t, s), &(_, p, ci)) in sep.grid.iter().zip(&survival) {
        bound_rows.push(BoundRow {
            t: *t,
            separation: *s,
            survival: p,
            ci,
        });
        if *s > p + 3.0 * ci {
            holds = false;
        }
        let gap = (s - p).abs() / ci.max(1e-12);
        max_gap = max_gap.max(gap);
    }

    Ok(SstReport {
        absorption,
        chi_square,
        bound_rows,
        bound_holds_everywhere: holds,
        max_sharpness_gap_sigmas: max_gap,
    })
}

/// Dual-only absorption survey: fraction absorbed within the horizon, over
/// independent dual simulations (no primal needed).
pub fn absorption_survey(
    rates: &BDRates,
    measure: &Measure,
    init: IntervalState,
    trials: usize,
    horizon: f64,
    policy: ExplosionPolicy,
    seed: u64,
) -> (usize, AbsorptionStats) {
    use rayon::prelude::*;
    let runner = IntervalDualRunner::new(rates, measure, policy);
    let results: Vec<Option<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let traj = runner.simulate(init, horizon, SeedSpec::new(seed, trial));
            (traj.terminal == DualTerminal::Absorbed)
                .then(|| traj.absorption_time)
                .flatten()
        })
        .collect();
    let absorbed = results.iter().filter(|r| r.is_some()).count();
    let grid: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0, horizon].to_vec();
    let survival = grid
        .iter()
        .map(|&t| {
            let above = results.iter().filter(|r| r.is_none_or(|a| a > t)).count();
            let p = above as f64 / trials as f64;
            let ci = (p * (1.0 - p) / trials as f64).sqrt();
            (t, p, ci)
        })
        .collect();
    (
        absorbed,
        AbsorptionStats {
            survival,
            trials,
            unabsorbed: trials - absorbed,
            censored: 0,
            ci_sigmas: 3.0,
        },
    )
}

/// Monte-Carlo check of the compensated-process mean: for a bounded `f`,
/// the average of `f(X*_t) - f(X*_0) - ∫_0^t (L*f)(X*_s) ds` over trials,
/// together with its standard error.
pub fn martingale_gap<D, F>(
    dual: &D,
    simulate: impl Fn(u64) -> crate::interval_dual::DualTrajectory<D::Dual> + Sync,
    f: F,
    t_end: f64,
    trials: usize,
) -> (f64, f64)
where
    D: DualChain + Sync,
    F: Fn(&D::Dual) -> f64 + Sync,
{
    use rayon::prelude::*;
    let samples: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let traj = simulate(trial);
            let mut integral = CompensatedSum::new();
            let steps = &traj.steps;
            for (i, step) in steps.iter().enumerate() {
                let t0 = step.time;
                if t0 >= t_end {
                    break;
                }
                let t1 = steps.get(i + 1).map_or(t_end, |s| s.time).min(t_end);
                if t1 <= t0 {
                    continue;
                }
                // L*f at the held state: skip moves with zero f-increment
                // before touching their (possibly enormous) rates
                let fq = f(&step.state);
                let mut lf = 0.0;
                for (q2, r) in dual.transitions(&step.state) {
                    let df = f(&q2) - fq;
                    if df != 0.0 {
                        lf += r * df;
                    }
                }
                integral.add(lf * (t1 - t0));
            }
            let f0 = f(&steps[0].state);
            let ft = f(traj.state_at(t_end));
            ft - f0 - integral.value()
        })
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Criterion/simulation concordance helper: the survey absorbed-fraction at
/// two horizons, for tests of the equivalence between series convergence
/// and almost-sure absorption.
pub fn concordance_fractions(
    rates: &BDRates,
    measure: &Measure,
    trials: usize,
    horizons: (f64, f64),
    policy: ExplosionPolicy,
    seed: u64,
) -> (f64, f64) {
    let (a, _) = absorption_survey(
        rates,
        measure,
        IntervalState::singleton(0),
        trials,
        horizons.0,
        policy,
        seed,
    );
    let (b, _) = absorption_survey(
        rates,
        measure,
        IntervalState::singleton(0),
        trials,
        horizons.1,
        policy,
        seed + 1,
    );
    (a as f64 / trials as f64, b as f64 / trials as f64)
}

pub fn default_measure(rates: &BDRates) -> Result<Measure, StateSpaceError> {
    mu_bd(rates, -256, 256)
}

/// Reference to a validated graph bundle for graph experiments.
pub fn graph_default_chain(model: GraphModel) -> Result<GraphChain, StateSpaceError> {
    GraphChain::new(model, 256)
}
