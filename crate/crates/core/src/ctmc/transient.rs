//! Exact transient distributions `μ_t = μ_0 exp(tL)` on finite truncations,
//! by uniformization.
//!
//! For stiff windows (rate spreads of 2^40 make `λt` far too large to sum
//! the Poisson series directly) the uniformized step matrix is computed for
//! a dyadic fraction of `t` and squared back up; the matrix stays
//! entrywise nonnegative throughout, so no cancellation occurs.

use statrs::function::gamma::ln_gamma;

use super::CtmcError;
use crate::logspace::CompensatedSum;
use crate::state_space::{BDRates, GraphModel, StateSpaceError, Vertex};

/// Poisson tail cut for the uniformization series.
const POISSON_TAIL: f64 = 1e-14;
/// Above this `λt` the dyadic-squaring route takes over.
const SERIES_CUTOFF: f64 = 64.0;
/// Target `λΔ` per squaring step.
const STEP_TARGET: f64 = 16.0;

/// A finite conservative generator (row sums zero), dense row-major.
#[derive(Debug, Clone)]
pub struct Generator {
    n: usize,
    q: Vec<f64>,
}

impl Generator {
    pub fn new(n: usize, q: Vec<f64>) -> Result<Self, CtmcError> {
        if q.len() != n * n {
            return Err(CtmcError::NonSquare {
                rows: if n == 0 { 0 } else { q.len() / n },
                cols: n,
            });
        }
        for i in 0..n {
            let mut sum = CompensatedSum::new();
            let mut scale = 1.0f64;
            for j in 0..n {
                let v = q[i * n + j];
                if i != j {
                    if v < 0.0 {
                        return Err(CtmcError::NegativeRate { row: i, col: j });
                    }
                    scale = scale.max(v);
                }
                sum.add(v);
            }
            let s = sum.value();
            if s.abs() > 1e-10 * scale {
                return Err(CtmcError::BadRowSums { row: i, sum: s });
            }
        }
        Ok(Self { n, q })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.n + j]
    }

    fn max_exit(&self) -> f64 {
        (0..self.n)
            .map(|i| -self.entry(i, i))
            .fold(0.0f64, f64::max)
    }

    /// Uniformized transition matrix `P = I + Q/λ`, row-stochastic by
    /// construction (diagonal set to one minus the off-diagonal sum).
    fn uniformized(&self, lambda: f64) -> Mat {
        let n = self.n;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            let mut off = CompensatedSum::new();
            for j in 0..n {
                if i != j {
                    let p = self.entry(i, j) / lambda;
                    a[i * n + j] = p;
                    off.add(p);
                }
            }
            a[i * n + i] = 1.0 - off.value();
        }
        Mat { n, a }
    }
}

/// Reflecting truncation of a birth-death generator to `[lo, hi]`: outflow
/// across the window boundary is dropped, so the matrix stays conservative
/// and its stationary vector is the restricted, renormalized `μ`.
pub fn truncate_bd(rates: &BDRates, lo: i64, hi: i64) -> Result<Generator, StateSpaceError> {
    if lo > hi {
        return Err(StateSpaceError::BadWindow { lo, hi });
    }
    let n = (hi - lo + 1) as usize;
    let mut q = vec![0.0f64; n * n];
    for (i, site) in (lo..=hi).enumerate() {
        let mut exit = 0.0;
        if site > lo {
            let a = rates.death(site)?;
            q[i * n + (i - 1)] = a;
            exit += a;
        }
        if site < hi {
            let b = rates.birth(site)?;
            q[i * n + (i + 1)] = b;
            exit += b;
        }
        q[i * n + i] = -exit;
    }
    Ok(Generator::new(n, q).expect("constructed conservative"))
}

/// Reflecting truncation of a graph walk to the center plus branch prefixes
/// of the given depth. Returns the generator together with the state order.
pub fn truncate_graph(model: &GraphModel, depth: u32) -> (Generator, Vec<Vertex>) {
    let mut states = Vec::new();
    for c in 0..model.center_count() {
        states.push(Vertex::Center(c as u8));
    }
    for b in 0..model.branch_count() {
        for k in 0..=depth {
            states.push(Vertex::Branch {
                branch: b as u8,
                depth: k,
            });
        }
    }
    let index = |v: Vertex| -> Option<usize> { states.iter().position(|&w| w == v) };
    let n = states.len();
    let mut q = vec![0.0f64; n * n];
    for (i, &x) in states.iter().enumerate() {
        let mut exit = 0.0;
        for y in model.neighbors(x) {
            if let Some(j) = index(y) {
                let r = model.rate(x, y);
                q[i * n + j] = r;
                exit += r;
            }
        }
        q[i * n + i] = -exit;
    }
    (
        Generator::new(n, q).expect("constructed conservative"),
        states,
    )
}

struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl Mat {
    fn mul(&self, other: &Mat) -> Mat {
        let n = self.n;
        let mut out = vec![0.0f64; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                let row = &other.a[k * n..(k + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += aik * b;
                }
            }
        }
        Mat { n, a: out }
    }

    fn scaled_identity(n: usize, s: f64) -> Mat {
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            a[i * n + i] = s;
        }
        Mat { n, a }
    }

    fn add_scaled(&mut self, other: &Mat, s: f64) {
        for (d, &x) in self.a.iter_mut().zip(&other.a) {
            *d += s * x;
        }
    }

    fn renormalize_rows(&mut self) {
        let n = self.n;
        for i in 0..n {
            let row = &mut self.a[i * n..(i + 1) * n];
            let mut sum = CompensatedSum::new();
            for &x in row.iter() {
                sum.add(x);
            }
            let s = sum.value();
            if s > 0.0 {
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
    }
}

fn vec_mat(v: &[f64], m: &Mat) -> Vec<f64> {
    let n = m.n;
    let mut out = vec![0.0f64; n];
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        let row = &m.a[k * n..(k + 1) * n];
        for (o, &b) in out.iter_mut().zip(row) {
            *o += vk * b;
        }
    }
    out
}

/// Poisson(λt) weights to cumulative mass `1 - POISSON_TAIL`. Compensated
/// accumulation keeps the cumulative sum honest; past the mode, terms below
/// resolution end the series regardless.
fn poisson_weights(lt: f64) -> Vec<f64> {
    let log_lt = lt.ln();
    let mut w = Vec::new();
    let mut cum = CompensatedSum::new();
    let mut k = 0usize;
    loop {
        let lw = -lt + k as f64 * log_lt - ln_gamma(k as f64 + 1.0);
        let wk = lw.exp();
        w.push(wk);
        cum.add(wk);
        if k as f64 >= lt && (cum.value() >= 1.0 - POISSON_TAIL || wk < 1e-18) {
            break;
        }
        k += 1;
        assert!(k < 100_000, "Poisson series failed to terminate");
    }
    w
}

/// `μ_t = μ_0 exp(tQ)` by uniformization with adaptive Poisson truncation;
/// the result sums to one within 1e-10.
pub fn transient_distribution(
    gen: &Generator,
    mu0: &[f64],
    t: f64,
) -> Result<Vec<f64>, CtmcError> {
    if mu0.len() != gen.dim() {
        return Err(CtmcError::BadInitial {
            got: mu0.len(),
            want: gen.dim(),
        });
    }
    if t < 0.0 {
        return Err(CtmcError::NegativeTime(t));
    }
    let lambda = gen.max_exit();
    if t == 0.0 || lambda == 0.0 {
        return Ok(mu0.to_vec());
    }
    let lt = lambda * t;

    if lt <= SERIES_CUTOFF {
        let p = gen.uniformized(lambda);
        let weights = poisson_weights(lt);
        let mut v = mu0.to_vec();
        let mut acc: Vec<f64> = v.iter().map(|&x| x * weights[0]).collect();
        for &wk in &weights[1..] {
            v = vec_mat(&v, &p);
            for (a, &x) in acc.iter_mut().zip(&v) {
                *a += wk * x;
            }
        }
        Ok(acc)
    } else {
        // dyadic splitting: exp(tQ) = exp((t/2^s) Q)^(2^s). The truncation
        // deficit of the step matrix would double at every squaring, so each
        // intermediate matrix is renormalized to be exactly row-stochastic;
        // the deficit then stays a conditioning of the Poisson mixture
        // instead of compounding.
        let s = ((lt / STEP_TARGET).log2().ceil() as u32).max(1);
        let step_lt = lt / (1u64 << s) as f64;
        let p = gen.uniformized(lambda);
        let weights = poisson_weights(step_lt);
        let mut m = Mat::scaled_identity(gen.dim(), weights[0]);
        let mut pk = Mat::scaled_identity(gen.dim(), 1.0);
        for &wk in &weights[1..] {
            pk = pk.mul(&p);
            m.add_scaled(&pk, wk);
        }
        m.renormalize_rows();
        for _ in 0..s {
            m = m.mul(&m);
            m.renormalize_rows();
        }
        Ok(vec_mat(mu0, &m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::mu_bd;

    /// Stationary vector of a small conservative generator, solved directly
    /// from `πQ = 0`, as an oracle independent of the measure construction.
    pub(crate) fn stationary_direct(gen: &Generator) -> Vec<f64> {
        let n = gen.dim();
        // Q^T π = 0 with the last equation replaced by Σπ = 1
        let mut a = vec![0.0f64; n * n];
        let mut b = vec![0.0f64; n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = gen.entry(j, i);
            }
        }
        for j in 0..n {
            a[(n - 1) * n + j] = 1.0;
        }
        b[n - 1] = 1.0;
        // partial-pivot Gaussian elimination
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&r, &s| {
                    a[r * n + col]
                        .abs()
                        .partial_cmp(&a[s * n + col].abs())
                        .unwrap()
                })
                .unwrap();
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                }
                b.swap(col, piv);
            }
            let d = a[col * n + col];
            assert!(d.abs() > 0.0, "singular system");
            for r in (col + 1)..n {
                let f = a[r * n + col] / d;
                if f == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0f64; n];
        for row in (0..n).rev() {
            let mut s = b[row];
            for j in (row + 1)..n {
                s -= a[row * n + j] * x[j];
            }
            x[row] = s / a[row * n + row];
        }
        x
    }

    fn two_state_symmetric() -> Generator {
        Generator::new(2, vec![-1.0, 1.0, 1.0, -1.0]).unwrap()
    }

    #[test]
    fn zero_time_is_identity() {
        let gen = two_state_symmetric();
        let mu0 = vec![0.25, 0.75];
        let mu = transient_distribution(&gen, &mu0, 0.0).unwrap();
        assert_eq!(mu, mu0);
    }

    #[test]
    fn two_state_closed_form() {
        let gen = two_state_symmetric();
        let mu = transient_distribution(&gen, &[1.0, 0.0], 1.0).unwrap();
        let want = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((mu[0] - want).abs() < 1e-12, "{} vs {want}", mu[0]);
    }

    #[test]
    fn result_is_a_distribution() {
        let rates = BDRates::uniform_birth(1.0, 2.0);
        let gen = truncate_bd(&rates, -10, 10).unwrap();
        let n = gen.dim();
        for i in [0usize, 5, 20] {
            let mut mu0 = vec![0.0; n];
            mu0[i] = 1.0;
            for t in [0.3, 2.0, 17.0] {
                let mu = transient_distribution(&gen, &mu0, t).unwrap();
                let sum: f64 = mu.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10, "sum {sum} at t={t}");
                assert!(mu.iter().all(|&x| x >= -1e-15));
            }
        }
    }

    #[test]
    fn semigroup_property() {
        let rates = BDRates::uniform_birth(1.0, 2.0);
        let gen = truncate_bd(&rates, -8, 8).unwrap();
        let mut mu0 = vec![0.0; gen.dim()];
        mu0[8] = 1.0;
        for s in [0.1, 1.0] {
            for t in [0.1, 1.0] {
                let direct = transient_distribution(&gen, &mu0, s + t).unwrap();
                let mid = transient_distribution(&gen, &mu0, s).unwrap();
                let two_step = transient_distribution(&gen, &mid, t).unwrap();
                for (a, b) in direct.iter().zip(&two_step) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn singleton_window_is_zero_matrix() {
        let rates = BDRates::uniform_birth(1.0, 2.0);
        let gen = truncate_bd(&rates, 0, 0).unwrap();
        assert_eq!(gen.dim(), 1);
        assert_eq!(gen.entry(0, 0), 0.0);
    }

    #[test]
    fn interior_rows_carry_the_rates() {
        let rates = BDRates::uniform_birth(1.0, 2.0);
        let gen = truncate_bd(&rates, -5, 5).unwrap();
        // site 2 at index 7: entries (a_2, -(a_2+b_2), b_2) = (2, -3, 1)
        assert_eq!(gen.entry(7, 6), 2.0);
        assert_eq!(gen.entry(7, 7), -3.0);
        assert_eq!(gen.entry(7, 8), 1.0);
    }

    #[test]
    fn truncated_stationary_matches_measure() {
        let rates = BDRates::exponential(2.0);
        let gen = truncate_bd(&rates, -30, 30).unwrap();
        let pi = stationary_direct(&gen);
        let m = mu_bd(&rates, -30, 30).unwrap();
        // renormalize the measure over the window
        let mass: f64 = (-30..=30).map(|k| m.log_mass(k).unwrap().exp()).sum();
        for (i, site) in (-30..=30).enumerate() {
            let want = m.log_mass(site).unwrap().exp() / mass;
            assert!(
                (pi[i] - want).abs() < 1e-8,
                "site {site}: {} vs {want}",
                pi[i]
            );
        }
    }

    #[test]
    fn stiff_window_keeps_stationarity() {
        // rates up to 2^41 force the dyadic-squaring route
        let rates = BDRates::exponential(2.0);
        let gen = truncate_bd(&rates, -40, 40).unwrap();
        let pi = stationary_direct(&gen);
        for t in [0.25, 4.0] {
            let mu = transient_distribution(&gen, &pi, t).unwrap();
            for (a, b) in mu.iter().zip(&pi) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b} at t={t}");
            }
            let sum: f64 = mu.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn graph_truncation_is_conservative() {
        use crate::state_space::{compute_center, BranchRates, RawGraphSpec, RawRay};
        let raw = RawGraphSpec {
            vertices: vec!["hub".into()],
            edges: vec![],
            rays: (0..3)
                .map(|_| RawRay {
                    attach: 0,
                    attach_out: 1.0,
                    attach_in: 1.0,
                    rates: BranchRates::new(BDRates::exponential(2.0)),
                })
                .collect(),
        };
        let model = compute_center(&raw).unwrap();
        let (gen, states) = truncate_graph(&model, 4);
        assert_eq!(gen.dim(), 1 + 3 * 5);
        assert_eq!(states.len(), gen.dim());
        let mu = transient_distribution(&gen, &{
            let mut v = vec![0.0; gen.dim()];
            v[0] = 1.0;
            v
        }, 0.7)
        .unwrap();
        let sum: f64 = mu.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
    }
}

