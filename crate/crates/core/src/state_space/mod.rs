//! Primal state spaces: birth-death rate families on `Z`, branch graphs,
//! their stationary measures, and the standing-assumption checks.

mod assumptions;
mod graph;
mod measure;
mod rates;

pub use assumptions::{
    check_assumptions, AssumptionReport, ModelRef, SeriesEvidence, Verdict,
    DEFAULT_ASSUMPTION_TERMS,
};
pub(crate) use assumptions::{scan_log_series, ScanParams, SeriesClass};
pub use graph::{
    compute_center, mu_graph, Branch, BranchRates, GraphChain, GraphMassCache, GraphMeasure,
    GraphModel, RawEdge, RawGraphSpec, RawRay, Vertex,
};
pub use measure::{mu_bd, MassCache, Measure};
pub use rates::{BDRates, Family, Support};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StateSpaceError {
    #[error("rate query at n = {n} outside the table window [{lo}, {hi}]")]
    WindowExceeded { n: i64, lo: i64, hi: i64 },
    #[error("non-positive rate {value} for {kind} at n = {n}")]
    NonPositiveRate {
        kind: &'static str,
        n: i64,
        value: f64,
    },
    #[error("stationary measure tail does not converge ({side}): {terms} terms summed, last increment ratio {ratio}")]
    NonSummableTail {
        side: &'static str,
        terms: usize,
        ratio: f64,
    },
    #[error("requested window [{lo}, {hi}] is empty or exceeds the family support")]
    BadWindow { lo: i64, hi: i64 },
    #[error("graph is not reversibility-consistent: cycle through edge {u} ~ {v} has rate-ratio product deviating by {deviation:e}")]
    InconsistentReversibility {
        u: String,
        v: String,
        deviation: f64,
    },
    #[error("graph has no center: every vertex has degree 2 (bi-infinite line); use the interval dual instead")]
    EmptyCenter,
    #[error("vertex {0} has infinite or undeclared degree")]
    NotLocallyFinite(String),
    #[error("graph validation failed: {0}")]
    InvalidGraph(String),
}
