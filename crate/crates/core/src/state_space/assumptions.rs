//! Numerical checks of the standing assumptions: positive recurrence,
//! non-explosion, and μ-integrability of the generator diagonal.
//!
//! Every check is a partial-sum scan of a positive series with a ratio-based
//! tail classification. The verdicts are heuristic by design and always ship
//! with the evidence that produced them.

use serde::Serialize;

use super::graph::GraphModel;
use super::rates::BDRates;
use crate::logspace::{log_add, LOG_ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive,
}

impl Verdict {
    fn worst(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fails, _) | (_, Fails) => Fails,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Holds,
        }
    }
}

/// Partial-sum evidence backing a verdict.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesEvidence {
    pub terms_used: usize,
    /// `log` of the partial sum (the sum itself may overflow for divergent
    /// series).
    pub log_partial_sum: f64,
    pub last_term: f64,
    /// Geometric-mean ratio of the trailing terms.
    pub tail_ratio: f64,
    pub converged_numerically: bool,
}

/// How a scanned series behaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SeriesClass {
    /// Partial sums stalled: the sum is numerically complete.
    ConvergedSum,
    /// Cap reached but the trailing terms decay geometrically.
    TailConverges,
    /// Trailing terms grow, or stay bounded away from zero.
    Diverges,
    Ambiguous,
}

pub(crate) struct ScanParams {
    pub cap: usize,
    /// `ln` of the relative increment below which a term counts as quiet.
    pub log_rel_eps: f64,
    pub quiet_needed: usize,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Absolute floor for "terms bounded away from zero".
    pub floor: f64,
}

impl ScanParams {
    pub fn assumptions(cap: usize) -> Self {
        Self {
            cap,
            log_rel_eps: -34.538776394910684, // ln(1e-15)
            quiet_needed: 10,
            ratio_lo: 0.999,
            ratio_hi: 1.001,
            floor: 1e-6,
        }
    }
}

/// Scans a series of positive terms given as `log t_n`.
pub(crate) fn scan_log_series(
    mut terms: impl Iterator<Item = f64>,
    params: &ScanParams,
) -> (SeriesClass, SeriesEvidence) {
    const TRAIL: usize = 11;
    let mut log_sum = LOG_ZERO;
    let mut quiet = 0usize;
    let mut used = 0usize;
    let mut trail: Vec<f64> = Vec::with_capacity(TRAIL);
    let mut last = LOG_ZERO;

    while used < params.cap {
        let Some(log_t) = terms.next() else {
            // finite series: complete by exhaustion
            let ev = SeriesEvidence {
                terms_used: used,
                log_partial_sum: log_sum,
                last_term: last.exp(),
                tail_ratio: 0.0,
                converged_numerically: true,
            };
            return (SeriesClass::ConvergedSum, ev);
        };
        used += 1;
        last = log_t;
        log_sum = log_add(log_sum, log_t);
        if trail.len() == TRAIL {
            trail.remove(0);
        }
        trail.push(log_t);
        if log_t - log_sum < params.log_rel_eps {
            quiet += 1;
            if quiet >= params.quiet_needed {
                let ev = SeriesEvidence {
                    terms_used: used,
                    log_partial_sum: log_sum,
                    last_term: last.exp(),
                    tail_ratio: trail_ratio(&trail),
                    converged_numerically: true,
                };
                return (SeriesClass::ConvergedSum, ev);
            }
        } else {
            quiet = 0;
        }
    }

    let ratio = trail_ratio(&trail);
    let floored = trail.len() > 1 && trail.iter().all(|&t| t.exp() >= params.floor);
    let class = if ratio > params.ratio_hi || (floored && ratio >= params.ratio_lo) {
        SeriesClass::Diverges
    } else if ratio < params.ratio_lo {
        SeriesClass::TailConverges
    } else {
        SeriesClass::Ambiguous
    };
    let ev = SeriesEvidence {
        terms_used: used,
        log_partial_sum: log_sum,
        last_term: last.exp(),
        tail_ratio: ratio,
        converged_numerically: false,
    };
    (class, ev)
}

fn trail_ratio(trail: &[f64]) -> f64 {
    if trail.len() < 2 {
        return 0.0;
    }
    let span = (trail.len() - 1) as f64;
    ((trail[trail.len() - 1] - trail[0]) / span).exp()
}

fn verdict_wanting_convergence(class: SeriesClass) -> Verdict {
    match class {
        SeriesClass::ConvergedSum | SeriesClass::TailConverges => Verdict::Holds,
        SeriesClass::Diverges => Verdict::Fails,
        SeriesClass::Ambiguous => Verdict::Inconclusive,
    }
}

fn verdict_wanting_divergence(class: SeriesClass) -> Verdict {
    match class {
        SeriesClass::ConvergedSum | SeriesClass::TailConverges => Verdict::Fails,
        SeriesClass::Diverges => Verdict::Holds,
        SeriesClass::Ambiguous => Verdict::Inconclusive,
    }
}

/// One scanned component (a half-line side, or one branch).
#[derive(Debug, Clone, Serialize)]
pub struct SeriesComponent {
    pub label: String,
    pub verdict: Verdict,
    pub evidence: SeriesEvidence,
}

#[derive(Debug, Clone, Serialize)]
pub struct Assessment {
    pub verdict: Verdict,
    pub components: Vec<SeriesComponent>,
}

impl Assessment {
    fn from_components(components: Vec<SeriesComponent>) -> Self {
        let verdict = components
            .iter()
            .fold(Verdict::Holds, |acc, c| acc.worst(c.verdict));
        Self { verdict, components }
    }
}

/// Report on the standing assumptions of a model.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub positive_recurrent: Assessment,
    pub nonexplosive: Assessment,
    pub diag_integrable: Assessment,
}

impl AssumptionReport {
    /// The assumptions that gate every other computation. Diagonal
    /// integrability is reported but not fatal: it feeds the duality proof
    /// machinery, while every per-state quantity stays finite without it.
    pub fn chain_ok(&self) -> bool {
        self.positive_recurrent.verdict != Verdict::Fails
            && self.nonexplosive.verdict != Verdict::Fails
    }
}

pub const DEFAULT_ASSUMPTION_TERMS: usize = 10_000;

/// A half-line view of a model: rates outward from the side's origin.
/// Site weights follow from `ν(0) = 1`, `ν(n+1) = ν(n) out(n)/in(n)`.
trait SideRates {
    /// `ln` of the rate `n -> n+1` (away from the origin); `None` past the
    /// support.
    fn log_outward(&self, n: u32) -> Option<f64>;
    /// `ln` of the rate `n+1 -> n` (toward the origin).
    fn log_inward(&self, n: u32) -> Option<f64>;
    /// `ln L_n`, the total exit rate at site `n`.
    fn log_exit(&self, n: u32) -> Option<f64>;
}

struct BdSide<'a> {
    rates: &'a BDRates,
    sign: i64,
}

impl SideRates for BdSide<'_> {
    fn log_outward(&self, n: u32) -> Option<f64> {
        let site = self.sign * n as i64;
        if self.sign > 0 {
            self.rates.log_birth(site).ok()
        } else {
            self.rates.log_death(site).ok()
        }
    }

    fn log_inward(&self, n: u32) -> Option<f64> {
        let site = self.sign * n as i64;
        if self.sign > 0 {
            self.rates.log_death(site + 1).ok()
        } else {
            self.rates.log_birth(site - 1).ok()
        }
    }

    fn log_exit(&self, n: u32) -> Option<f64> {
        let site = self.sign * n as i64;
        let b = self.rates.log_birth(site).ok()?;
        let a = self.rates.log_death(site).ok()?;
        Some(log_add(b, a))
    }
}

struct GraphSide<'a> {
    model: &'a GraphModel,
    branch: u8,
}

impl SideRates for GraphSide<'_> {
    fn log_outward(&self, n: u32) -> Option<f64> {
        Some(self.model.branch(self.branch).log_out(n))
    }

    fn log_inward(&self, n: u32) -> Option<f64> {
        Some(self.model.branch(self.branch).log_inn(n))
    }

    fn log_exit(&self, n: u32) -> Option<f64> {
        let b = self.model.branch(self.branch);
        let inward = if n == 0 {
            b.attach_in.ln()
        } else {
            b.log_inn(n - 1)
        };
        Some(log_add(b.log_out(n), inward))
    }
}

/// Streams `(n, log ν(n))`, advancing the detailed-balance product one edge
/// at a time.
struct WeightStream<'a> {
    side: &'a dyn SideRates,
    next_n: u32,
    acc: f64,
    done: bool,
}

impl<'a> WeightStream<'a> {
    fn new(side: &'a dyn SideRates) -> Self {
        Self {
            side,
            next_n: 0,
            acc: 0.0,
            done: false,
        }
    }
}

impl Clone for WeightStream<'_> {
    fn clone(&self) -> Self {
        Self {
            side: self.side,
            next_n: self.next_n,
            acc: self.acc,
            done: self.done,
        }
    }
}

impl Iterator for WeightStream<'_> {
    type Item = (u32, f64);

    fn next(&mut self) -> Option<(u32, f64)> {
        if self.done {
            return None;
        }
        let cur = (self.next_n, self.acc);
        match (
            self.side.log_outward(self.next_n),
            self.side.log_inward(self.next_n),
        ) {
            (Some(o), Some(i)) => {
                self.acc += o - i;
                self.next_n += 1;
            }
            _ => self.done = true,
        }
        Some(cur)
    }
}

/// Terms of the explosion series
/// `t_n = (1 / (ν(n) out(n))) Σ_{m<=n} ν(m)`; divergence means the chain is
/// nonexplosive on this side.
struct AndersonStream<'a> {
    weights: WeightStream<'a>,
    log_inner: f64,
}

impl Iterator for AndersonStream<'_> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let (n, w) = self.weights.next()?;
        self.log_inner = log_add(self.log_inner, w);
        let out = self.weights.side.log_outward(n)?;
        Some(self.log_inner - w - out)
    }
}

pub enum ModelRef<'a> {
    BirthDeath(&'a BDRates),
    Graph(&'a GraphModel),
}

impl<'a> From<&'a BDRates> for ModelRef<'a> {
    fn from(r: &'a BDRates) -> Self {
        ModelRef::BirthDeath(r)
    }
}

impl<'a> From<&'a GraphModel> for ModelRef<'a> {
    fn from(g: &'a GraphModel) -> Self {
        ModelRef::Graph(g)
    }
}

/// Evaluates the standing assumptions by partial sums capped at `n_terms`.
pub fn check_assumptions(model: ModelRef<'_>, n_terms: usize) -> AssumptionReport {
    let params = ScanParams::assumptions(n_terms);
    let mut sides: Vec<(String, Box<dyn SideRates + '_>)> = Vec::new();
    match model {
        ModelRef::BirthDeath(rates) => {
            sides.push(("right".into(), Box::new(BdSide { rates, sign: 1 })));
            sides.push(("left".into(), Box::new(BdSide { rates, sign: -1 })));
        }
        ModelRef::Graph(g) => {
            for i in 0..g.branch_count() {
                sides.push((
                    format!("branch {i}"),
                    Box::new(GraphSide {
                        model: g,
                        branch: i as u8,
                    }),
                ));
            }
        }
    }

    let mut rec = Vec::new();
    let mut expl = Vec::new();
    let mut diag = Vec::new();
    for (label, side) in &sides {
        let side = side.as_ref();

        let (class, ev) = scan_log_series(WeightStream::new(side).map(|(_, w)| w), &params);
        rec.push(SeriesComponent {
            label: label.clone(),
            verdict: verdict_wanting_convergence(class),
            evidence: ev,
        });

        let anderson = AndersonStream {
            weights: WeightStream::new(side),
            log_inner: LOG_ZERO,
        };
        let (class, ev) = scan_log_series(anderson, &params);
        expl.push(SeriesComponent {
            label: label.clone(),
            verdict: verdict_wanting_divergence(class),
            evidence: ev,
        });

        let diag_terms =
            WeightStream::new(side).map_while(|(n, w)| side.log_exit(n).map(|e| w + e));
        let (class, ev) = scan_log_series(diag_terms, &params);
        diag.push(SeriesComponent {
            label: label.clone(),
            verdict: verdict_wanting_convergence(class),
            evidence: ev,
        });
    }
    AssumptionReport {
        positive_recurrent: Assessment::from_components(rec),
        nonexplosive: Assessment::from_components(expl),
        diag_integrable: Assessment::from_components(diag),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::Family;

    #[test]
    fn exponential_family_assumptions() {
        let rates = BDRates::exponential(2.0);
        let report = check_assumptions((&rates).into(), DEFAULT_ASSUMPTION_TERMS);
        assert_eq!(report.positive_recurrent.verdict, Verdict::Holds);
        // outward rate times weight is identically 1, so the explosion
        // series has constant terms and diverges
        assert_eq!(report.nonexplosive.verdict, Verdict::Holds);
        // but ν(n) L_n is constant, so the diagonal is not summable
        assert_eq!(report.diag_integrable.verdict, Verdict::Fails);
        assert!(report.chain_ok());
    }

    #[test]
    fn uniform_birth_assumptions() {
        let rates = BDRates::uniform_birth(1.0, 2.0);
        let report = check_assumptions((&rates).into(), DEFAULT_ASSUMPTION_TERMS);
        assert_eq!(report.positive_recurrent.verdict, Verdict::Holds);
        assert_eq!(report.nonexplosive.verdict, Verdict::Holds);
        assert_eq!(report.diag_integrable.verdict, Verdict::Holds);
    }

    #[test]
    fn fast_birth_chain_is_explosive() {
        // ν(n) ~ 2^-n against b_n = 8^n: the explosion series converges
        let rates = BDRates::custom(|n| {
            let k = n.unsigned_abs() as i32;
            (8.0f64.powi(k), if n >= 1 { 2.0 * 8.0f64.powi(k - 1) } else { 1.0 })
        });
        let report = check_assumptions((&rates).into(), DEFAULT_ASSUMPTION_TERMS);
        assert_eq!(report.nonexplosive.verdict, Verdict::Fails);
        assert!(!report.chain_ok());
    }

    #[test]
    fn fast_birth_chain_spec_variant() {
        // same shape with deaths 2 * 4^(n-1): still explosive on the right
        let rates = BDRates::custom(|n| {
            let k = n.unsigned_abs() as i32;
            (8.0f64.powi(k), if n >= 1 { 2.0 * 4.0f64.powi(k - 1) } else { 1.0 })
        });
        let report = check_assumptions((&rates).into(), DEFAULT_ASSUMPTION_TERMS);
        assert_eq!(report.nonexplosive.verdict, Verdict::Fails);
    }

    #[test]
    fn constant_rates_not_positive_recurrent() {
        let rates = BDRates::new(Family::Geometric {
            birth_base: 1.0,
            birth_ratio: 1.0,
            death_base: 1.0,
            death_ratio: 1.0,
        })
        .unwrap();
        let report = check_assumptions((&rates).into(), DEFAULT_ASSUMPTION_TERMS);
        assert_eq!(report.positive_recurrent.verdict, Verdict::Fails);
        assert_eq!(report.nonexplosive.verdict, Verdict::Holds);
        assert!(!report.chain_ok());
    }

    #[test]
    fn report_carries_evidence() {
        let rates = BDRates::exponential(2.0);
        let report = check_assumptions((&rates).into(), DEFAULT_ASSUMPTION_TERMS);
        for c in &report.positive_recurrent.components {
            assert!(c.evidence.terms_used > 0);
            assert!(c.evidence.converged_numerically);
        }
        // terms (Σ_{m<=n} ν(m)) / (ν(n) b_n) -> 2 exactly for this family
        for c in &report.nonexplosive.components {
            assert_eq!(c.evidence.terms_used, DEFAULT_ASSUMPTION_TERMS);
            assert!((c.evidence.last_term - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_branch_assumptions() {
        use crate::state_space::{compute_center, BranchRates, RawGraphSpec, RawRay};
        let raw = RawGraphSpec {
            vertices: vec!["hub".into()],
            edges: vec![],
            rays: vec![
                RawRay {
                    attach: 0,
                    attach_out: 1.0,
                    attach_in: 1.0,
                    rates: BranchRates::new(BDRates::exponential(2.0)),
                },
                RawRay {
                    attach: 0,
                    attach_out: 1.0,
                    attach_in: 1.0,
                    rates: BranchRates::new(BDRates::uniform_birth(1.0, 2.0)),
                },
                RawRay {
                    attach: 0,
                    attach_out: 1.0,
                    attach_in: 1.0,
                    rates: BranchRates::new(BDRates::exponential(2.0)),
                },
            ],
        };
        let model = compute_center(&raw).unwrap();
        let report = check_assumptions((&model).into(), DEFAULT_ASSUMPTION_TERMS);
        assert_eq!(report.positive_recurrent.verdict, Verdict::Holds);
        assert_eq!(report.nonexplosive.verdict, Verdict::Holds);
        assert_eq!(report.positive_recurrent.components.len(), 3);
    }
}
