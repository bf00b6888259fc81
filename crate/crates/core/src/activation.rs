//! Firing-rate modulation functions Φ and their derivatives.
//!
//! Four shapes are supported: the positive part `max(0, x)`, two smooth
//! regularisations of it, and a logistic sigmoid. A constant rate is also
//! provided for degenerate test configurations.

use crate::error::{GridError, Result};

/// Samples used when scanning a derivative for its minimum.
const SLOPE_SCAN_POINTS: usize = 4001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `max(0, x)`.
    Relu,
    /// `0.5 x (1 + x / sqrt(x² + ε))`. Dips slightly below zero for x < 0.
    SmoothEps { epsilon: f64 },
    /// `0.5 (x + sqrt(x² + ε))`. Strictly positive and increasing.
    SmoothSqrt { epsilon: f64 },
    /// `1 / (1 + exp(-gain x))`.
    Sigmoid { gain: f64 },
    /// `Φ ≡ value`, independent of the input.
    Constant { value: f64 },
}

impl Activation {
    pub fn relu() -> Self {
        Activation::Relu
    }

    pub fn smooth_eps(epsilon: f64) -> Result<Self> {
        check_positive("activation.epsilon", epsilon)?;
        Ok(Activation::SmoothEps { epsilon })
    }

    pub fn smooth_sqrt(epsilon: f64) -> Result<Self> {
        check_positive("activation.epsilon", epsilon)?;
        Ok(Activation::SmoothSqrt { epsilon })
    }

    pub fn sigmoid(gain: f64) -> Result<Self> {
        check_positive("activation.gain", gain)?;
        Ok(Activation::Sigmoid { gain })
    }

    pub fn constant(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(GridError::param("activation.value", "must be finite"));
        }
        Ok(Activation::Constant { value })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::SmoothEps { .. } => "smooth_eps",
            Activation::SmoothSqrt { .. } => "smooth_sqrt",
            Activation::Sigmoid { .. } => "sigmoid",
            Activation::Constant { .. } => "constant",
        }
    }

    #[inline]
    pub fn evaluate(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::SmoothEps { epsilon } => 0.5 * x * (1.0 + x / (x * x + epsilon).sqrt()),
            Activation::SmoothSqrt { epsilon } => 0.5 * (x + (x * x + epsilon).sqrt()),
            Activation::Sigmoid { gain } => logistic(gain * x),
            Activation::Constant { value } => value,
        }
    }

    /// Analytic derivative. The positive part takes the midpoint value 0.5 at
    /// the kink.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    0.0
                } else {
                    0.5
                }
            }
            Activation::SmoothEps { epsilon } => {
                let q = x * x + epsilon;
                0.5 + 0.5 * x * (x * x + 2.0 * epsilon) / (q * q.sqrt())
            }
            Activation::SmoothSqrt { epsilon } => 0.5 * (1.0 + x / (x * x + epsilon).sqrt()),
            Activation::Sigmoid { gain } => {
                let y = logistic(gain * x);
                gain * y * (1.0 - y)
            }
            Activation::Constant { .. } => 0.0,
        }
    }

    /// Infimum of Φ' over the real line.
    ///
    /// Zero for every shape except `SmoothEps`, whose derivative reaches a
    /// negative minimum near `x ≈ -1.5 sqrt(ε)`; that minimum is located by a
    /// scan over `[-10 sqrt(ε), 10 sqrt(ε)]`, outside of which Φ' tends to
    /// 0 or 1 monotonically.
    pub fn slope_floor(&self) -> f64 {
        match *self {
            Activation::SmoothEps { epsilon } => {
                let half = 10.0 * epsilon.sqrt();
                self.min_slope(-half, half).min(0.0)
            }
            _ => 0.0,
        }
    }

    /// Minimum of Φ' sampled on `[lo, hi]`.
    pub fn min_slope(&self, lo: f64, hi: f64) -> f64 {
        let step = (hi - lo) / (SLOPE_SCAN_POINTS - 1) as f64;
        (0..SLOPE_SCAN_POINTS)
            .map(|i| self.derivative(lo + step * i as f64))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_nonnegative(&self) -> bool {
        match *self {
            Activation::SmoothEps { .. } => false,
            Activation::Constant { value } => value >= 0.0,
            _ => true,
        }
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(GridError::param(name, format!("must be positive and finite, got {value}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        assert_eq!(Activation::relu().evaluate(-1.0), 0.0);
        let eps = Activation::smooth_eps(0.01).unwrap();
        assert_eq!(eps.evaluate(0.0), 0.0);
        assert_eq!(Activation::sigmoid(15.0).unwrap().evaluate(0.0), 0.5);
        // 0.5 * (1 + 1/sqrt(1.01)) to 17 digits.
        assert_abs_diff_eq!(eps.evaluate(1.0), 0.997_518_595_104_994_6, epsilon = 1e-15);
    }

    #[test]
    fn worked_derivatives() {
        assert_eq!(Activation::relu().derivative(2.0), 1.0);
        assert_eq!(Activation::relu().derivative(0.0), 0.5);
        assert_eq!(Activation::relu().derivative(-3.0), 0.0);
        assert_abs_diff_eq!(Activation::sigmoid(15.0).unwrap().derivative(0.0), 3.75);
        assert_abs_diff_eq!(Activation::smooth_sqrt(0.01).unwrap().derivative(0.0), 0.5);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Activation::smooth_eps(0.0).is_err());
        assert!(Activation::smooth_sqrt(-1.0).is_err());
        assert!(Activation::sigmoid(f64::NAN).is_err());
        assert!(Activation::constant(f64::INFINITY).is_err());
    }

    #[test]
    fn smooth_eps_dips_below_zero_by_a_scale_free_amount() {
        // Φ_ε'(c sqrt ε) does not depend on ε, so the floor is the same for all ε.
        let a = Activation::smooth_eps(0.1).unwrap().slope_floor();
        let b = Activation::smooth_eps(0.0001).unwrap().slope_floor();
        assert!(a < -0.04 && a > -0.05, "floor {a}");
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        // Still above 1/W0 for the reference kernel (W0 ≈ -20.67).
        assert!(a > 1.0 / -20.6711);
    }

    #[test]
    fn finite_difference_matches_derivative() {
        let h = 1e-5;
        for act in [
            Activation::smooth_eps(0.01).unwrap(),
            Activation::smooth_eps(0.1).unwrap(),
            Activation::smooth_sqrt(0.01).unwrap(),
            Activation::sigmoid(15.0).unwrap(),
        ] {
            for i in 0..=400 {
                let x = -2.0 + 0.01 * i as f64;
                let fd = (act.evaluate(x + h) - act.evaluate(x - h)) / (2.0 * h);
                // C h² with a generous C: third derivatives of the sigmoid
                // reach ~15³/10 near the origin.
                assert!(
                    (act.derivative(x) - fd).abs() <= 1e4 * h * h + 1e-9,
                    "{} at x={x}: {} vs {fd}",
                    act.name(),
                    act.derivative(x)
                );
            }
        }
    }

    #[test]
    fn smooth_variants_approach_relu() {
        for eps in [0.1, 0.01] {
            for act in [
                Activation::smooth_eps(eps).unwrap(),
                Activation::smooth_sqrt(eps).unwrap(),
            ] {
                for i in 0..=4000 {
                    let x = -2.0 + 0.001 * i as f64;
                    let gap = (act.evaluate(x) - x.max(0.0)).abs();
                    assert!(gap <= 0.5 * eps.sqrt() + 1e-15, "{} eps={eps} x={x}", act.name());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn sigmoid_stays_in_unit_interval(x in -1e6f64..1e6, gain in 0.1f64..100.0) {
            let y = Activation::sigmoid(gain).unwrap().evaluate(x);
            prop_assert!((0.0..=1.0).contains(&y));
        }

        #[test]
        fn monotone_shapes_are_nondecreasing(x in -5.0f64..5.0, dx in 0.0f64..1.0) {
            for act in [
                Activation::relu(),
                Activation::smooth_sqrt(0.01).unwrap(),
                Activation::sigmoid(15.0).unwrap(),
            ] {
                prop_assert!(act.evaluate(x + dx) >= act.evaluate(x));
            }
        }
    }
}
