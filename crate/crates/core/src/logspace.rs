//! Log-domain arithmetic and compensated summation.
//!
//! All measures in this crate are stored as natural logarithms so that
//! geometric rate families (weights like `2^-n` over thousands of sites)
//! never overflow or underflow. Ratios of masses are always formed as
//! `exp(log_a - log_b)`.

/// `log(0)`, the additive identity for [`log_add`].
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// `log(exp(a) + exp(b))` without leaving the log domain.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log(exp(a) - exp(b))` for `a >= b`. Returns `None` when `b > a`
/// (a genuinely negative difference) so callers can decide how to recover.
///
/// Accuracy degrades as `b -> a`; callers that subtract a dominant part of a
/// mass should fall back to direct resummation (see `interval_dual`).
pub fn log_sub(a: f64, b: f64) -> Option<f64> {
    if b == LOG_ZERO {
        return Some(a);
    }
    if b > a {
        return None;
    }
    if b == a {
        return Some(LOG_ZERO);
    }
    Some(a + (-(b - a).exp()).ln_1p())
}

/// `log(sum exp(x_i))` over a slice, stable under large spreads.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(LOG_ZERO, f64::max);
    if m == LOG_ZERO {
        return LOG_ZERO;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Neumaier-compensated accumulator for long sums of `f64`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Double-double value used where a residual must be resolved below one ulp
/// of the summands (the algebraic duality check on stiff rate families).
#[derive(Debug, Clone, Copy, Default)]
pub struct TwoFloat {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

impl TwoFloat {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn add_f64(self, x: f64) -> Self {
        let (s, e) = two_sum(self.hi, x);
        let lo = self.lo + e;
        let (hi, lo) = two_sum(s, lo);
        Self { hi, lo }
    }

    /// Accumulates the exact product `a * b`.
    pub fn add_prod(self, a: f64, b: f64) -> Self {
        let (p, e) = two_prod(a, b);
        self.add_f64(p).add_f64(e)
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}
