//! Surrogate derivatives for the spike nonlinearity.
//!
//! Each family provides the surrogate `∂S/∂V` evaluated at a membrane potential, and a
//! smooth "relaxed" activation whose exact derivative is that surrogate. The relaxed
//! activation is only used to verify the backward pass against finite differences.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[non_exhaustive]
pub enum SurrogateFamily {
    /// `α / (1 + (π/2 · α · u)²)`
    Arctan,
    /// `max(0, α · (1 − α·|u|))`
    PiecewiseLinear,
}

impl fmt::Display for SurrogateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurrogateFamily::Arctan => "arctan",
            SurrogateFamily::PiecewiseLinear => "piecewise_linear",
        })
    }
}

impl FromStr for SurrogateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arctan" | "atan" => Ok(SurrogateFamily::Arctan),
            "piecewise_linear" | "piecewise-linear" | "plgrad" => {
                Ok(SurrogateFamily::PiecewiseLinear)
            }
            other => Err(Error::Domain(format!("unknown surrogate family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateSpec<S> {
    pub family: SurrogateFamily,
    pub alpha: S,
}

impl<S: Scalar> SurrogateSpec<S> {
    pub fn new(family: SurrogateFamily, alpha: S) -> Result<Self> {
        if !(alpha > S::zero()) || !alpha.is_finite() {
            return Err(Error::Domain(format!(
                "surrogate alpha must be positive, got {alpha}"
            )));
        }
        Ok(SurrogateSpec { family, alpha })
    }

    pub fn arctan(alpha: S) -> Result<Self> {
        Self::new(SurrogateFamily::Arctan, alpha)
    }

    pub fn piecewise_linear(alpha: S) -> Result<Self> {
        Self::new(SurrogateFamily::PiecewiseLinear, alpha)
    }

    /// Surrogate derivative at distance `u = v − v_th` from threshold.
    #[inline]
    pub fn derivative(&self, u: S) -> S {
        let a = self.alpha;
        match self.family {
            SurrogateFamily::Arctan => {
                let z = S::FRAC_PI_2() * a * u;
                a / (S::one() + z * z)
            }
            SurrogateFamily::PiecewiseLinear => (a * (S::one() - a * u.abs())).max(S::zero()),
        }
    }

    /// Antiderivative of [`derivative`](Self::derivative), zero at threshold.
    #[inline]
    pub fn relaxed(&self, u: S) -> S {
        let a = self.alpha;
        match self.family {
            SurrogateFamily::Arctan => S::FRAC_2_PI() * (S::FRAC_PI_2() * a * u).atan(),
            SurrogateFamily::PiecewiseLinear => {
                let half = S::lit(0.5);
                let edge = a.recip();
                if u >= edge {
                    half
                } else if u <= -edge {
                    -half
                } else {
                    a * u - half * a * a * u * u.abs()
                }
            }
        }
    }
}

/// Elementwise surrogate derivative of `v` around `v_th`.
pub fn sg_value<S: Scalar>(spec: &SurrogateSpec<S>, v: &Tensor<S>, v_th: S) -> Tensor<S> {
    v.map(|x| spec.derivative(x - v_th))
}

/// Elementwise smooth activation whose derivative is [`sg_value`].
pub fn relaxed_activation<S: Scalar>(spec: &SurrogateSpec<S>, v: &Tensor<S>, v_th: S) -> Tensor<S> {
    v.map(|x| spec.relaxed(x - v_th))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn atan(alpha: f64) -> SurrogateSpec<f64> {
        SurrogateSpec::arctan(alpha).unwrap()
    }

    fn plin(alpha: f64) -> SurrogateSpec<f64> {
        SurrogateSpec::piecewise_linear(alpha).unwrap()
    }

    #[test]
    fn arctan_values() {
        assert_eq!(atan(2.0).derivative(0.0), 2.0);
        assert_abs_diff_eq!(atan(2.0).derivative(1.0 / PI), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn piecewise_linear_values() {
        assert_eq!(plin(1.0).derivative(2.0), 0.0);
        assert_eq!(plin(1.0).derivative(0.5), 0.5);
        assert_eq!(plin(3.0).derivative(0.0), 3.0);
    }

    #[test]
    fn tensor_forms_shift_by_threshold() {
        let v = Tensor::from_f64(vec![3], &[0.5, 0.5 + 1.0 / PI, 10.0]).unwrap();
        let g = sg_value(&atan(2.0), &v, 0.5);
        assert_eq!(g.data()[0], 2.0);
        assert_abs_diff_eq!(g.data()[1], 1.0, epsilon = 1e-14);
        let r = relaxed_activation(&atan(2.0), &v, 0.5);
        assert_eq!(r.data()[0], 0.0);
        assert!(r.data()[2] < 1.0);
    }

    #[test]
    fn alpha_must_be_positive() {
        assert!(SurrogateSpec::arctan(0.0f64).is_err());
        assert!(SurrogateSpec::piecewise_linear(-1.0f64).is_err());
        assert!(SurrogateSpec::arctan(f64::NAN).is_err());
    }

    #[test]
    fn family_parses() {
        assert_eq!(
            "arctan".parse::<SurrogateFamily>().unwrap(),
            SurrogateFamily::Arctan
        );
        assert_eq!(
            "piecewise_linear".parse::<SurrogateFamily>().unwrap(),
            SurrogateFamily::PiecewiseLinear
        );
        assert!("rectangular".parse::<SurrogateFamily>().is_err());
    }

    #[test]
    fn relaxed_zero_at_threshold() {
        for alpha in [0.5, 1.0, 2.0, 7.0] {
            assert_eq!(atan(alpha).relaxed(0.0), 0.0);
            assert_eq!(plin(alpha).relaxed(0.0), 0.0);
        }
    }

    #[test]
    fn piecewise_relaxed_flat_outside_support() {
        let s = plin(1.0);
        let h = 1e-6;
        for u in [-5.0, -1.5, 1.5, 4.0] {
            assert_eq!(s.relaxed(u + h) - s.relaxed(u - h), 0.0);
        }
        // continuous at the support edges
        assert_abs_diff_eq!(s.relaxed(1.0 - 1e-12), 0.5, epsilon = 1e-11);
    }

    fn central_difference(spec: &SurrogateSpec<f64>, u: f64, h: f64) -> f64 {
        (spec.relaxed(u + h) - spec.relaxed(u - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    #[test]
    fn arctan_finite_difference_point() {
        let s = atan(2.0);
        let fd = central_difference(&s, 0.3, 1e-6);
        assert!(rel_err(fd, s.derivative(0.3)) <= 1e-6);
    }

    #[test]
    fn derivative_consistency_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for spec in [atan(2.0), atan(0.7), plin(1.0), plin(2.5)] {
            let mut worst = 0.0f64;
            for _ in 0..1000 {
                let u: f64 = rng.random_range(-2.0..2.0);
                worst = worst.max(rel_err(
                    central_difference(&spec, u, 1e-6),
                    spec.derivative(u),
                ));
            }
            assert!(worst <= 1e-6, "{spec:?}: worst rel err {worst}");
        }
    }

    proptest! {
        #[test]
        fn nonnegative_symmetric_peaked(u in -10.0f64..10.0, alpha in 0.05f64..20.0) {
            for spec in [atan(alpha), plin(alpha)] {
                let g = spec.derivative(u);
                prop_assert!(g >= 0.0);
                prop_assert_eq!(g, spec.derivative(-u));
                prop_assert!(g <= spec.derivative(0.0));
                prop_assert_eq!(spec.derivative(0.0), alpha);
            }
        }

        #[test]
        fn narrower_piecewise_has_more_zeros(
            us in proptest::collection::vec(-3.0f64..3.0, 50),
            a1 in 0.1f64..10.0,
            extra in 0.0f64..10.0,
        ) {
            let zeros = |alpha: f64| us.iter().filter(|&&u| plin(alpha).derivative(u) == 0.0).count();
            prop_assert!(zeros(a1) <= zeros(a1 + extra));
        }
    }
}
