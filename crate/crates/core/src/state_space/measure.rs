//! Stationary measures of birth-death chains, in log space.

use std::collections::HashMap;

use super::rates::{BDRates, Support};
use super::StateSpaceError;
use crate::logspace::{log_add, log_sum_exp, LOG_ZERO};

/// Adaptive tail summation: stop once this many consecutive terms each add
/// less than `TAIL_REL_EPS` of the running total, give up at `TAIL_CAP`.
const TAIL_CONSECUTIVE: usize = 10;
const TAIL_REL_EPS: f64 = 1e-15;
const TAIL_CAP: usize = 1_000_000;
const LOG_TAIL_REL_EPS: f64 = -34.538776394910684; // ln(1e-15)

/// Normalized stationary measure `μ` of a birth-death chain, held on a finite
/// window with explicitly summed half-line tails. All masses are natural
/// logarithms; the measure integrates to one over window plus tails.
#[derive(Debug, Clone)]
pub struct Measure {
    lo: i64,
    hi: i64,
    log_w: Vec<f64>,
    /// `log μ((-∞, n])` per window site, left tail included.
    log_cum_left: Vec<f64>,
    /// `log μ([n, +∞))` per window site, right tail included.
    log_cum_right: Vec<f64>,
    log_tail_left: f64,
    log_tail_right: f64,
}

/// Builds `μ` for `rates` on `[lo, hi]` from the detailed-balance products
/// `μ(n+1)/μ(n) = b_n / a_{n+1}`, normalizing over the window plus adaptively
/// summed tails. Table families are finite chains: the window is the table
/// window and the tails carry zero mass.
pub fn mu_bd(rates: &BDRates, lo: i64, hi: i64) -> Result<Measure, StateSpaceError> {
    let (lo, hi, line) = match rates.support() {
        Support::Line => (lo, hi, true),
        Support::Window { lo, hi } => (lo, hi, false),
    };
    if lo > hi {
        return Err(StateSpaceError::BadWindow { lo, hi });
    }

    let len = (hi - lo + 1) as usize;
    let mut log_u = vec![0.0f64; len];
    let anchor = 0i64.clamp(lo, hi);
    let idx = |n: i64| (n - lo) as usize;
    for n in (anchor + 1)..=hi {
        log_u[idx(n)] = log_u[idx(n - 1)] + rates.log_birth(n - 1)? - rates.log_death(n)?;
    }
    for n in (lo..anchor).rev() {
        log_u[idx(n)] = log_u[idx(n + 1)] + rates.log_death(n + 1)? - rates.log_birth(n)?;
    }

    let (log_tail_right, log_tail_left) = if line {
        let right = sum_tail(
            log_u[idx(hi)],
            |n_prev, log_prev| Ok(log_prev + rates.log_birth(n_prev)? - rates.log_death(n_prev + 1)?),
            hi,
            1,
            "right",
        )?;
        let left = sum_tail(
            log_u[idx(lo)],
            |n_prev, log_prev| Ok(log_prev + rates.log_death(n_prev)? - rates.log_birth(n_prev - 1)?),
            lo,
            -1,
            "left",
        )?;
        (right, left)
    } else {
        (LOG_ZERO, LOG_ZERO)
    };

    let log_norm = log_add(log_add(log_sum_exp(&log_u), log_tail_left), log_tail_right);
    for w in &mut log_u {
        *w -= log_norm;
    }
    let log_tail_left = log_tail_left - log_norm;
    let log_tail_right = log_tail_right - log_norm;

    let mut log_cum_left = vec![0.0f64; len];
    let mut acc = log_tail_left;
    for n in lo..=hi {
        acc = log_add(acc, log_u[idx(n)]);
        log_cum_left[idx(n)] = acc;
    }
    let mut log_cum_right = vec![0.0f64; len];
    let mut acc = log_tail_right;
    for n in (lo..=hi).rev() {
        acc = log_add(acc, log_u[idx(n)]);
        log_cum_right[idx(n)] = acc;
    }

    Ok(Measure {
        lo,
        hi,
        log_w: log_u,
        log_cum_left,
        log_cum_right,
        log_tail_left,
        log_tail_right,
    })
}

/// Sums `μ` beyond one window edge by extending the detailed-balance
/// recursion site by site. `step` is +1 (right tail) or -1 (left tail).
fn sum_tail(
    log_edge: f64,
    next: impl Fn(i64, f64) -> Result<f64, StateSpaceError>,
    edge: i64,
    step: i64,
    side: &'static str,
) -> Result<f64, StateSpaceError> {
    let mut total = LOG_ZERO;
    let mut log_term = log_edge;
    let mut prev_term = log_edge;
    let mut n = edge;
    let mut quiet = 0usize;
    for _ in 0..TAIL_CAP {
        prev_term = log_term;
        log_term = next(n, log_term)?;
        n += step;
        total = log_add(total, log_term);
        if log_term - total < LOG_TAIL_REL_EPS {
            quiet += 1;
            if quiet >= TAIL_CONSECUTIVE {
                return Ok(total);
            }
        } else {
            quiet = 0;
        }
    }
    let ratio = (log_term - prev_term).exp();
    Err(StateSpaceError::NonSummableTail {
        side,
        terms: TAIL_CAP,
        ratio: if ratio.is_finite() { ratio } else { 1.0 },
    })
}

impl Measure {
    pub fn window(&self) -> (i64, i64) {
        (self.lo, self.hi)
    }

    fn idx(&self, n: i64) -> usize {
        debug_assert!(n >= self.lo && n <= self.hi);
        (n - self.lo) as usize
    }

    pub fn contains(&self, n: i64) -> bool {
        n >= self.lo && n <= self.hi
    }

    /// `log μ(n)`; `None` outside the window.
    pub fn log_mass(&self, n: i64) -> Option<f64> {
        self.contains(n).then(|| self.log_w[self.idx(n)])
    }

    /// `log μ([p, q])` for a finite window interval, by direct summation.
    pub fn log_interval(&self, p: i64, q: i64) -> Result<f64, StateSpaceError> {
        if p > q || p < self.lo || q > self.hi {
            return Err(StateSpaceError::BadWindow { lo: p, hi: q });
        }
        Ok(log_sum_exp(&self.log_w[self.idx(p)..=self.idx(q)]))
    }

    /// `log μ((-∞, q])`, left tail included.
    pub fn log_half_left(&self, q: i64) -> Result<f64, StateSpaceError> {
        if q < self.lo || q > self.hi {
            return Err(StateSpaceError::BadWindow { lo: self.lo, hi: q });
        }
        Ok(self.log_cum_left[self.idx(q)])
    }

    /// `log μ([p, +∞))`, right tail included.
    pub fn log_half_right(&self, p: i64) -> Result<f64, StateSpaceError> {
        if p < self.lo || p > self.hi {
            return Err(StateSpaceError::BadWindow { lo: p, hi: self.hi });
        }
        Ok(self.log_cum_right[self.idx(p)])
    }

    pub fn log_tail_left(&self) -> f64 {
        self.log_tail_left
    }

    pub fn log_tail_right(&self) -> f64 {
        self.log_tail_right
    }

    /// Total mass over window plus tails; 0 in log space for a normalized
    /// measure, kept as a consistency probe.
    pub fn log_total(&self) -> f64 {
        log_add(self.log_cum_left[self.idx(self.hi)], self.log_tail_right)
    }
}

/// Per-trial growable view of a [`Measure`]: extends the window on demand by
/// continuing the detailed-balance recursion, so simulations whose dual
/// bounds drift past the precomputed window never resum from scratch.
///
/// Not shared between threads; each simulation owns one.
#[derive(Debug)]
pub struct MassCache<'a> {
    rates: &'a BDRates,
    lo0: i64,
    hi0: i64,
    center: Vec<f64>,
    left_ext: Vec<f64>,
    right_ext: Vec<f64>,
    tail_left_memo: HashMap<i64, f64>,
    tail_right_memo: HashMap<i64, f64>,
    support: Support,
}

impl<'a> MassCache<'a> {
    pub fn new(rates: &'a BDRates, measure: &Measure) -> Self {
        Self {
            rates,
            lo0: measure.lo,
            hi0: measure.hi,
            center: measure.log_w.clone(),
            left_ext: Vec::new(),
            right_ext: Vec::new(),
            tail_left_memo: HashMap::new(),
            tail_right_memo: HashMap::new(),
            support: rates.support(),
        }
    }

    /// Normalized `log μ(n)`, extending the cached window as needed.
    /// Outside a table family's support the mass is zero.
    pub fn log_w(&mut self, n: i64) -> f64 {
        if !self.support.contains(n) {
            return LOG_ZERO;
        }
        if n >= self.lo0 && n <= self.hi0 {
            return self.center[(n - self.lo0) as usize];
        }
        if n > self.hi0 {
            while self.hi0 + (self.right_ext.len() as i64) < n {
                let m = self.hi0 + self.right_ext.len() as i64; // last cached site
                let prev = self.site_unchecked(m);
                let w = prev + self.rates.log_birth(m).expect("in support")
                    - self.rates.log_death(m + 1).expect("in support");
                self.right_ext.push(w);
            }
            self.right_ext[(n - self.hi0 - 1) as usize]
        } else {
            while self.lo0 - (self.left_ext.len() as i64) > n {
                let m = self.lo0 - self.left_ext.len() as i64;
                let prev = self.site_unchecked(m);
                let w = prev + self.rates.log_death(m).expect("in support")
                    - self.rates.log_birth(m - 1).expect("in support");
                self.left_ext.push(w);
            }
            self.left_ext[(self.lo0 - n - 1) as usize]
        }
    }

    fn site_unchecked(&self, n: i64) -> f64 {
        if n >= self.lo0 && n <= self.hi0 {
            self.center[(n - self.lo0) as usize]
        } else if n > self.hi0 {
            self.right_ext[(n - self.hi0 - 1) as usize]
        } else {
            self.left_ext[(self.lo0 - n - 1) as usize]
        }
    }

    /// `log μ([p, q])` by direct summation.
    pub fn log_range(&mut self, p: i64, q: i64) -> f64 {
        debug_assert!(p <= q);
        let mut total = LOG_ZERO;
        for n in p..=q {
            total = log_add(total, self.log_w(n));
        }
        total
    }

    /// `log μ([p, +∞))`, summed adaptively and memoized per `p`.
    pub fn log_tail_right(&mut self, p: i64) -> f64 {
        if let Some(&t) = self.tail_right_memo.get(&p) {
            return t;
        }
        let mut total = LOG_ZERO;
        let mut quiet = 0usize;
        let mut n = p;
        while quiet < TAIL_CONSECUTIVE {
            if let Support::Window { hi, .. } = self.support {
                if n > hi {
                    break;
                }
            }
            let w = self.log_w(n);
            total = log_add(total, w);
            if w - total < LOG_TAIL_REL_EPS {
                quiet += 1;
            } else {
                quiet = 0;
            }
            n += 1;
            assert!(
                (n - p) < TAIL_CAP as i64,
                "tail of a validated measure failed to converge"
            );
        }
        self.tail_right_memo.insert(p, total);
        total
    }

    /// `log μ((-∞, q])`, summed adaptively and memoized per `q`.
    pub fn log_tail_left(&mut self, q: i64) -> f64 {
        if let Some(&t) = self.tail_left_memo.get(&q) {
            return t;
        }
        let mut total = LOG_ZERO;
        let mut quiet = 0usize;
        let mut n = q;
        while quiet < TAIL_CONSECUTIVE {
            if let Support::Window { lo, .. } = self.support {
                if n < lo {
                    break;
                }
            }
            let w = self.log_w(n);
            total = log_add(total, w);
            if w - total < LOG_TAIL_REL_EPS {
                quiet += 1;
            } else {
                quiet = 0;
            }
            n -= 1;
            assert!(
                (q - n) < TAIL_CAP as i64,
                "tail of a validated measure failed to converge"
            );
        }
        self.tail_left_memo.insert(q, total);
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::Family;

    fn exp2() -> BDRates {
        BDRates::exponential(2.0)
    }

    fn drift2() -> BDRates {
        BDRates::uniform_birth(1.0, 2.0)
    }

    #[test]
    fn drift_family_products() {
        // unnormalized mu(n)/mu(0) = (1/2)^n on the right half
        let m = mu_bd(&drift2(), -64, 64).unwrap();
        let r3 = m.log_mass(3).unwrap() - m.log_mass(0).unwrap();
        assert!((r3.exp() - 0.125).abs() < 1e-13);
        // and mirrored on the left
        let rm3 = m.log_mass(-3).unwrap() - m.log_mass(0).unwrap();
        assert!((rm3.exp() - 0.125).abs() < 1e-13);
    }

    #[test]
    fn exponential_family_products() {
        let m = mu_bd(&exp2(), -64, 64).unwrap();
        for n in 0..20 {
            let r = m.log_mass(n).unwrap() - m.log_mass(0).unwrap();
            assert!((r.exp() - 0.5f64.powi(n as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rates_are_non_summable() {
        let rates = BDRates::new(Family::Geometric {
            birth_base: 1.0,
            birth_ratio: 1.0,
            death_base: 1.0,
            death_ratio: 1.0,
        })
        .unwrap();
        let err = mu_bd(&rates, -8, 8).unwrap_err();
        assert!(matches!(err, StateSpaceError::NonSummableTail { .. }));
    }

    #[test]
    fn normalization_sums_to_one() {
        for rates in [exp2(), drift2()] {
            let m = mu_bd(&rates, -40, 40).unwrap();
            assert!(m.log_total().abs() < 1e-12);
        }
    }

    #[test]
    fn half_line_masses_match_closed_form() {
        // mu unnormalized is 2^-|n|, total 3: mu((-inf,0]) = 2/3, mu((-inf,1]) = 5/6
        let m = mu_bd(&drift2(), -64, 64).unwrap();
        let left0 = m.log_half_left(0).unwrap().exp();
        assert!((left0 - 2.0 / 3.0).abs() < 1e-13);
        let left1 = m.log_half_left(1).unwrap().exp();
        assert!((left1 - 5.0 / 6.0).abs() < 1e-13);
        let right1 = m.log_half_right(1).unwrap().exp();
        assert!((right1 - 1.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn inner_window_agrees_after_renormalization() {
        // window-stability of the construction
        let small = mu_bd(&exp2(), -30, 30).unwrap();
        let large = mu_bd(&exp2(), -60, 60).unwrap();
        for n in -30..=30 {
            let a = small.log_mass(n).unwrap();
            let b = large.log_mass(n).unwrap();
            assert!((a - b).abs() < 1e-12, "site {n}: {a} vs {b}");
        }
    }

    #[test]
    fn table_measure_has_no_tails() {
        let rates = BDRates::table(-2, vec![1.0; 5], vec![2.0; 5]).unwrap();
        let m = mu_bd(&rates, -2, 2).unwrap();
        assert_eq!(m.window(), (-2, 2));
        assert_eq!(m.log_tail_left(), LOG_ZERO);
        assert_eq!(m.log_tail_right(), LOG_ZERO);
        assert!(m.log_total().abs() < 1e-12);
    }

    #[test]
    fn mass_cache_extends_consistently() {
        let rates = drift2();
        let m = mu_bd(&rates, -8, 8).unwrap();
        let wide = mu_bd(&rates, -64, 64).unwrap();
        let mut cache = MassCache::new(&rates, &m);
        for n in [-40i64, -9, 0, 9, 40] {
            let got = cache.log_w(n);
            let want = wide.log_mass(n).unwrap();
            assert!((got - want).abs() < 1e-12, "site {n}");
        }
        let t = cache.log_tail_right(9);
        let want = wide.log_half_right(9).unwrap();
        assert!((t - want).abs() < 1e-12);
        let t = cache.log_tail_left(-9);
        let want = wide.log_half_left(-9).unwrap();
        assert!((t - want).abs() < 1e-12);
    }
}
