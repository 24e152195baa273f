//! Birth-death rate families on `Z`.

use std::fmt;
use std::sync::Arc;

use super::StateSpaceError;

/// Where a family is defined: the whole line, or a finite table window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Line,
    Window { lo: i64, hi: i64 },
}

impl Support {
    pub fn contains(self, n: i64) -> bool {
        match self {
            Support::Line => true,
            Support::Window { lo, hi } => lo <= n && n <= hi,
        }
    }
}

/// Declarative rate families. Birth `b_n` is the rate of `n -> n+1`, death
/// `a_n` the rate of `n -> n-1`.
#[derive(Clone)]
pub enum Family {
    /// Explicit per-site rates on a window; the chain lives on the window
    /// alone (reflecting ends) and queries outside it are an error.
    Table {
        lo: i64,
        births: Vec<f64>,
        deaths: Vec<f64>,
    },
    /// `b_n = birth_base * birth_ratio^|n|`, `a_n = death_base * death_ratio^|n|`.
    Geometric {
        birth_base: f64,
        birth_ratio: f64,
        death_base: f64,
        death_ratio: f64,
    },
    /// `b_n = a_n = base^|n|`: rates grow symmetrically away from the origin
    /// and the stationary measure is `base^-|n|` (normalized).
    Exponential { base: f64 },
    /// Constant birth rate everywhere with stationary measure `ratio^-|n|`:
    /// deaths are `birth * ratio` for `n >= 1` and `birth / ratio` for
    /// `n <= 0`, the detailed-balance complement of the flat births.
    UniformBirth { birth: f64, ratio: f64 },
    /// In-process oracle returning `(b_n, a_n)`; not expressible in config
    /// files, intended for tests and embedding.
    Custom(Arc<dyn Fn(i64) -> (f64, f64) + Send + Sync>),
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Table { lo, births, .. } => f
                .debug_struct("Table")
                .field("lo", lo)
                .field("len", &births.len())
                .finish(),
            Family::Geometric {
                birth_base,
                birth_ratio,
                death_base,
                death_ratio,
            } => f
                .debug_struct("Geometric")
                .field("birth_base", birth_base)
                .field("birth_ratio", birth_ratio)
                .field("death_base", death_base)
                .field("death_ratio", death_ratio)
                .finish(),
            Family::Exponential { base } => {
                f.debug_struct("Exponential").field("base", base).finish()
            }
            Family::UniformBirth { birth, ratio } => f
                .debug_struct("UniformBirth")
                .field("birth", birth)
                .field("ratio", ratio)
                .finish(),
            Family::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A validated birth-death rate family.
#[derive(Debug, Clone)]
pub struct BDRates {
    family: Family,
}

impl BDRates {
    pub fn new(family: Family) -> Result<Self, StateSpaceError> {
        let rates = Self { family };
        rates.validate()?;
        Ok(rates)
    }

    pub fn exponential(base: f64) -> Self {
        Self::new(Family::Exponential { base }).expect("base must be positive")
    }

    pub fn uniform_birth(birth: f64, ratio: f64) -> Self {
        Self::new(Family::UniformBirth { birth, ratio }).expect("parameters must be positive")
    }

    pub fn table(lo: i64, births: Vec<f64>, deaths: Vec<f64>) -> Result<Self, StateSpaceError> {
        Self::new(Family::Table { lo, births, deaths })
    }

    pub fn custom<F>(f: F) -> Self
    where
        F: Fn(i64) -> (f64, f64) + Send + Sync + 'static,
    {
        Self {
            family: Family::Custom(Arc::new(f)),
        }
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn support(&self) -> Support {
        match &self.family {
            Family::Table { lo, births, .. } => Support::Window {
                lo: *lo,
                hi: *lo + births.len() as i64 - 1,
            },
            _ => Support::Line,
        }
    }

    fn validate(&self) -> Result<(), StateSpaceError> {
        match &self.family {
            Family::Table { lo, births, deaths } => {
                if births.is_empty() || births.len() != deaths.len() {
                    return Err(StateSpaceError::BadWindow {
                        lo: *lo,
                        hi: *lo + births.len() as i64 - 1,
                    });
                }
                for (i, (&b, &a)) in births.iter().zip(deaths).enumerate() {
                    let n = *lo + i as i64;
                    if !(b > 0.0) || !b.is_finite() {
                        return Err(StateSpaceError::NonPositiveRate {
                            kind: "birth",
                            n,
                            value: b,
                        });
                    }
                    if !(a > 0.0) || !a.is_finite() {
                        return Err(StateSpaceError::NonPositiveRate {
                            kind: "death",
                            n,
                            value: a,
                        });
                    }
                }
                Ok(())
            }
            Family::Geometric {
                birth_base,
                birth_ratio,
                death_base,
                death_ratio,
            } => {
                for (kind, v) in [
                    ("birth", *birth_base),
                    ("birth", *birth_ratio),
                    ("death", *death_base),
                    ("death", *death_ratio),
                ] {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(StateSpaceError::NonPositiveRate { kind, n: 0, value: v });
                    }
                }
                Ok(())
            }
            Family::Exponential { base } => {
                if !(*base > 0.0) || !base.is_finite() {
                    return Err(StateSpaceError::NonPositiveRate {
                        kind: "birth",
                        n: 0,
                        value: *base,
                    });
                }
                Ok(())
            }
            Family::UniformBirth { birth, ratio } => {
                for (kind, v) in [("birth", *birth), ("death", *ratio)] {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(StateSpaceError::NonPositiveRate { kind, n: 0, value: v });
                    }
                }
                Ok(())
            }
            Family::Custom(_) => Ok(()),
        }
    }

    fn check_window(&self, n: i64) -> Result<(), StateSpaceError> {
        match self.support() {
            Support::Line => Ok(()),
            Support::Window { lo, hi } => {
                if n < lo || n > hi {
                    Err(StateSpaceError::WindowExceeded { n, lo, hi })
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Birth rate `b_n` (the rate of the jump `n -> n+1`).
    pub fn birth(&self, n: i64) -> Result<f64, StateSpaceError> {
        self.check_window(n)?;
        Ok(match &self.family {
            Family::Table { lo, births, .. } => births[(n - lo) as usize],
            Family::Geometric {
                birth_base,
                birth_ratio,
                ..
            } => birth_base * birth_ratio.powi(n.unsigned_abs().min(i32::MAX as u64) as i32),
            Family::Exponential { base } => {
                base.powi(n.unsigned_abs().min(i32::MAX as u64) as i32)
            }
            Family::UniformBirth { birth, .. } => *birth,
            Family::Custom(f) => f(n).0,
        })
    }

    /// Death rate `a_n` (the rate of the jump `n -> n-1`).
    pub fn death(&self, n: i64) -> Result<f64, StateSpaceError> {
        self.check_window(n)?;
        Ok(match &self.family {
            Family::Table { lo, deaths, .. } => deaths[(n - lo) as usize],
            Family::Geometric {
                death_base,
                death_ratio,
                ..
            } => death_base * death_ratio.powi(n.unsigned_abs().min(i32::MAX as u64) as i32),
            Family::Exponential { base } => {
                base.powi(n.unsigned_abs().min(i32::MAX as u64) as i32)
            }
            Family::UniformBirth { birth, ratio } => {
                if n >= 1 {
                    birth * ratio
                } else {
                    birth / ratio
                }
            }
            Family::Custom(f) => f(n).1,
        })
    }

    /// `ln b_n`, exact for parametric families even where `b_n` itself
    /// overflows `f64`.
    pub fn log_birth(&self, n: i64) -> Result<f64, StateSpaceError> {
        self.check_window(n)?;
        Ok(match &self.family {
            Family::Geometric {
                birth_base,
                birth_ratio,
                ..
            } => birth_base.ln() + n.unsigned_abs() as f64 * birth_ratio.ln(),
            Family::Exponential { base } => n.unsigned_abs() as f64 * base.ln(),
            _ => self.birth(n)?.ln(),
        })
    }

    /// `ln a_n`, exact for parametric families.
    pub fn log_death(&self, n: i64) -> Result<f64, StateSpaceError> {
        self.check_window(n)?;
        Ok(match &self.family {
            Family::Geometric {
                death_base,
                death_ratio,
                ..
            } => death_base.ln() + n.unsigned_abs() as f64 * death_ratio.ln(),
            Family::Exponential { base } => n.unsigned_abs() as f64 * base.ln(),
            _ => self.death(n)?.ln(),
        })
    }
}
