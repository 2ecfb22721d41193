//! Local differential privacy perturbation mechanisms for numerical values.
//!
//! Four mechanisms are supported:
//!
//! - **Laplace**: `v + Lap(2/ε)` on the canonical domain `[-1, 1]`.
//! - **SR** (stochastic rounding): two output atoms `±(e^ε+1)/(e^ε-1)`.
//! - **PM** (piecewise mechanism): continuous output on `[-C, C]` with a
//!   high-density piece `[l(v), r(v)]` of width `C - 1`.
//! - **SW** (square wave): input on `[0, 1]`, output on `[-b, 1+b]` with a
//!   high-density window `[v-b, v+b]`. SW is biased for mean estimation and is
//!   unbiased by inverting its affine expectation.
//!
//! Every mechanism works in its *native* input domain. The estimators work
//! in the *canonical* domain `[-1, 1]`; the `*_canonical` methods bridge the
//! two (identity for everything except SW, which uses `u = (v + 1) / 2`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MechanismKind {
    Laplace,
    #[serde(rename = "SR")]
    Sr,
    #[serde(rename = "PM")]
    Pm,
    #[serde(rename = "SW")]
    Sw,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 4] = [Self::Sr, Self::Laplace, Self::Pm, Self::Sw];

    pub fn name(self) -> &'static str {
        match self {
            Self::Laplace => "Laplace",
            Self::Sr => "SR",
            Self::Pm => "PM",
            Self::Sw => "SW",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" | "lap" => Ok(Self::Laplace),
            "sr" => Ok(Self::Sr),
            "pm" => Ok(Self::Pm),
            "sw" => Ok(Self::Sw),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// A strictly positive, finite privacy budget ε.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct PrivacyBudget<T>(T);

impl<T: Real> PrivacyBudget<T> {
    pub fn new(epsilon: T) -> Result<Self> {
        if epsilon.is_finite() && epsilon > T::zero() {
            Ok(Self(epsilon))
        } else {
            Err(Error::InvalidBudget(epsilon.to_f64_lossy()))
        }
    }

    pub fn epsilon(self) -> T {
        self.0
    }
}

/// The set of values a mechanism can release.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputSupport<T> {
    RealLine,
    Atoms([T; 2]),
    Interval(T, T),
}

impl<T: Real> OutputSupport<T> {
    pub fn contains(&self, x: T) -> bool {
        match *self {
            Self::RealLine => x.is_finite(),
            Self::Atoms([a, b]) => x == a || x == b,
            Self::Interval(lo, hi) => x >= lo && x <= hi,
        }
    }
}

/// One released value together with the index of the service that collected it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbedValue<T> {
    pub service: usize,
    pub value: T,
}

/// A two-level density: `high` on `[window_lo, window_hi]`, `low` elsewhere
/// on `[support_lo, support_hi]`. Both PM and SW have this shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDensity<T> {
    pub support_lo: T,
    pub support_hi: T,
    pub window_lo: T,
    pub window_hi: T,
    pub high: T,
    pub low: T,
}

impl<T: Real> StepDensity<T> {
    /// Exact probability mass on `[a, b]` (clipped to the support).
    pub fn mass(&self, a: T, b: T) -> T {
        let a = a.max(self.support_lo);
        let b = b.min(self.support_hi);
        if b <= a {
            return T::zero();
        }
        let overlap = (b.min(self.window_hi) - a.max(self.window_lo)).max(T::zero());
        self.low * (b - a) + (self.high - self.low) * overlap
    }

    pub fn at(&self, x: T) -> T {
        if x < self.support_lo || x > self.support_hi {
            T::zero()
        } else if x >= self.window_lo && x <= self.window_hi {
            self.high
        } else {
            self.low
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Params<T> {
    Laplace { scale: T },
    Sr { atom: T, slope: T },
    Pm { c: T, high: T, low: T },
    Sw { b: T, p: T, q: T },
}

/// A configured perturbation mechanism. Construction precomputes every
/// ε-dependent constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mechanism<T> {
    kind: MechanismKind,
    budget: PrivacyBudget<T>,
    params: Params<T>,
}

impl<T: Real> Mechanism<T> {
    pub fn new(kind: MechanismKind, epsilon: T) -> Result<Self> {
        let budget = PrivacyBudget::new(epsilon)?;
        let one = T::one();
        let two = T::lit(2.0);
        let e = epsilon.exp();
        let params = match kind {
            MechanismKind::Laplace => Params::Laplace { scale: two / epsilon },
            MechanismKind::Sr => Params::Sr {
                atom: (e + one) / (e - one),
                slope: (e - one) / (two * e + two),
            },
            MechanismKind::Pm => {
                let h = (epsilon / two).exp();
                Params::Pm {
                    c: (h + one) / (h - one),
                    high: (e - h) / (two * (h + one)),
                    low: (h - one) / (two * (h + e)),
                }
            }
            MechanismKind::Sw => {
                // exp_m1 keeps e^ε - ε - 1 accurate for small ε.
                let em1 = epsilon.exp_m1();
                let b = (epsilon * e - e + one) / (two * e * (em1 - epsilon));
                let denom = two * b * e + one;
                Params::Sw { b, p: e / denom, q: one / denom }
            }
        };
        Ok(Self { kind, budget, params })
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    pub fn epsilon(&self) -> T {
        self.budget.epsilon()
    }

    pub fn budget(&self) -> PrivacyBudget<T> {
        self.budget
    }

    pub fn input_domain(&self) -> (T, T) {
        match self.kind {
            MechanismKind::Sw => (T::zero(), T::one()),
            _ => (-T::one(), T::one()),
        }
    }

    pub fn output_support(&self) -> OutputSupport<T> {
        match self.params {
            Params::Laplace { .. } => OutputSupport::RealLine,
            Params::Sr { atom, .. } => OutputSupport::Atoms([atom, -atom]),
            Params::Pm { c, .. } => OutputSupport::Interval(-c, c),
            Params::Sw { b, .. } => OutputSupport::Interval(-b, T::one() + b),
        }
    }

    /// Laplace scale `2/ε`.
    pub fn laplace_scale(&self) -> Option<T> {
        match self.params {
            Params::Laplace { scale } => Some(scale),
            _ => None,
        }
    }

    /// Positive SR atom `(e^ε+1)/(e^ε-1)`.
    pub fn sr_atom(&self) -> Option<T> {
        match self.params {
            Params::Sr { atom, .. } => Some(atom),
            _ => None,
        }
    }

    /// PM half-width `C`.
    pub fn pm_c(&self) -> Option<T> {
        match self.params {
            Params::Pm { c, .. } => Some(c),
            _ => None,
        }
    }

    /// SW `(b, p, q)`.
    pub fn sw_params(&self) -> Option<(T, T, T)> {
        match self.params {
            Params::Sw { b, p, q } => Some((b, p, q)),
            _ => None,
        }
    }

    fn check_input(&self, v: T) -> Result<()> {
        let (lo, hi) = self.input_domain();
        if v >= lo && v <= hi {
            Ok(())
        } else {
            Err(Error::Domain {
                mechanism: self.kind.name(),
                value: v.to_f64_lossy(),
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            })
        }
    }

    /// Probability that SR releases the positive atom.
    pub fn sr_positive_probability(&self, v: T) -> Option<T> {
        match self.params {
            Params::Sr { slope, .. } => Some(slope * v + T::lit(0.5)),
            _ => None,
        }
    }

    /// Two-level density for PM/SW given a native input, `None` otherwise.
    pub fn step_density(&self, v: T) -> Option<StepDensity<T>> {
        let two = T::lit(2.0);
        match self.params {
            Params::Pm { c, high, low } => {
                let l = (c + T::one()) / two * v - (c - T::one()) / two;
                Some(StepDensity {
                    support_lo: -c,
                    support_hi: c,
                    window_lo: l,
                    window_hi: l + c - T::one(),
                    high,
                    low,
                })
            }
            Params::Sw { b, p, q } => Some(StepDensity {
                support_lo: -b,
                support_hi: T::one() + b,
                window_lo: v - b,
                window_hi: v + b,
                high: p,
                low: q,
            }),
            _ => None,
        }
    }

    /// Draws one perturbed value for the native input `v`.
    pub fn perturb<R: Rng + ?Sized>(&self, v: T, rng: &mut R) -> Result<T> {
        self.check_input(v)?;
        let u = T::lit(rng.random::<f64>());
        Ok(match self.params {
            Params::Laplace { scale } => {
                // Inverse CDF on (-1/2, 1/2); 1 - 2|w| is never 0 since u < 1.
                let w = u - T::lit(0.5);
                let mag = -scale * (T::one() - T::lit(2.0) * w.abs()).ln();
                if w < T::zero() {
                    v - mag
                } else {
                    v + mag
                }
            }
            Params::Sr { atom, slope } => {
                if u < slope * v + T::lit(0.5) {
                    atom
                } else {
                    -atom
                }
            }
            Params::Pm { c, high, .. } => {
                let d = self.step_density(v).expect("PM has a step density");
                let inner = (c - T::one()) * high;
                let w = T::lit(rng.random::<f64>());
                if u < inner {
                    d.window_lo + w * (c - T::one())
                } else {
                    let left = d.window_lo + c;
                    let s = w * (c + T::one());
                    if s < left {
                        -c + s
                    } else {
                        d.window_hi + (s - left)
                    }
                }
            }
            Params::Sw { b, p, .. } => {
                let w = T::lit(rng.random::<f64>());
                if u < T::lit(2.0) * b * p {
                    v - b + w * T::lit(2.0) * b
                } else if w < v {
                    w - b
                } else {
                    w + b
                }
            }
        })
    }

    /// Conditional density of output `x` given native input `v`. For SR this
    /// is the probability mass of the atom, and 0 off the atoms.
    pub fn density(&self, x: T, v: T) -> T {
        match self.params {
            Params::Laplace { scale } => {
                (-(x - v).abs() / scale).exp() / (T::lit(2.0) * scale)
            }
            Params::Sr { atom, slope } => {
                let p = slope * v + T::lit(0.5);
                if x == atom {
                    p
                } else if x == -atom {
                    T::one() - p
                } else {
                    T::zero()
                }
            }
            Params::Pm { .. } | Params::Sw { .. } => {
                self.step_density(v).expect("step density").at(x)
            }
        }
    }

    /// Closed-form variance of the raw output given native input `v`.
    pub fn variance(&self, v: T) -> T {
        let one = T::one();
        let two = T::lit(2.0);
        let three = T::lit(3.0);
        let four = T::lit(4.0);
        match self.params {
            Params::Laplace { scale } => two * scale * scale,
            Params::Sr { atom, .. } => atom * atom - v * v,
            Params::Pm { .. } => {
                let h = (self.epsilon() / two).exp_m1();
                v * v / h + (h + four) / (three * h * h)
            }
            Params::Sw { b, p, q } => {
                let cube = |x: T| x * x * x;
                let first = q * (cube(b) - cube(b + v) - cube(b - v) + cube(b + one)) / three;
                let centre = q + two * b * q + four * b * p * v - four * b * q * v;
                let second = centre * centre / four;
                let third = two * b * p * (b * b + three * v * v) / three;
                first - second + third
            }
        }
    }

    /// `E[output | v]` for native input `v`.
    pub fn expectation(&self, v: T) -> T {
        match self.params {
            Params::Sw { b, p, q } => {
                let two = T::lit(2.0);
                q / two + q * b + two * b * (p - q) * v
            }
            _ => v,
        }
    }

    /// Slope of the (affine) expectation map; 1 for the unbiased mechanisms.
    pub fn expectation_slope(&self) -> T {
        match self.params {
            Params::Sw { b, p, q } => T::lit(2.0) * b * (p - q),
            _ => T::one(),
        }
    }

    /// Inverts the expectation map, turning a raw output into an unbiased
    /// estimate of the native input.
    pub fn unbias(&self, y: T) -> T {
        match self.params {
            Params::Sw { b, q, .. } => {
                (y - q / T::lit(2.0) - q * b) / self.expectation_slope()
            }
            _ => y,
        }
    }

    /// Variance of [`Mechanism::unbias`] applied to an output for native input `v`.
    pub fn unbiased_variance(&self, v: T) -> T {
        let slope = self.expectation_slope();
        self.variance(v) / (slope * slope)
    }

    /// Maps a canonical value in `[-1, 1]` into the native input domain.
    pub fn to_native(&self, v: T) -> T {
        match self.kind {
            MechanismKind::Sw => (v + T::one()) / T::lit(2.0),
            _ => v,
        }
    }

    /// Maps a native unbiased estimate back into the canonical domain.
    pub fn from_native(&self, u: T) -> T {
        match self.kind {
            MechanismKind::Sw => T::lit(2.0) * u - T::one(),
            _ => u,
        }
    }

    pub fn perturb_canonical<R: Rng + ?Sized>(&self, v: T, rng: &mut R) -> Result<T> {
        self.perturb(self.to_native(v), rng)
    }

    /// Unbiased estimate of the canonical input from a raw output.
    pub fn unbias_canonical(&self, y: T) -> T {
        self.from_native(self.unbias(y))
    }

    /// Variance of [`Mechanism::unbias_canonical`] given canonical input `v`.
    pub fn unbiased_variance_canonical(&self, v: T) -> T {
        let var = self.unbiased_variance(self.to_native(v));
        match self.kind {
            MechanismKind::Sw => T::lit(4.0) * var,
            _ => var,
        }
    }

    pub fn density_canonical(&self, x: T, v: T) -> T {
        self.density(x, self.to_native(v))
    }
}
