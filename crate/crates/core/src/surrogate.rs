//! Surrogate derivatives for the spike threshold.
//!
//! The forward pass of a spiking neuron uses a Heaviside step, whose
//! derivative is zero almost everywhere. During backpropagation the step's
//! derivative is replaced by one of the bump functions below, evaluated at
//! the distance `x = u - thr` of the membrane potential from threshold.
//! Every bump is normalised to peak at 1.0 for `x = 0`.
//!
//! Each surrogate also has a smooth, sigmoid-shaped primitive with range
//! (0, 1), used by the smooth-twin neuron for finite-difference checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// `1 / (1 + k|x|)^2`
    #[default]
    Superspike,
    /// `4 sig(kx) (1 - sig(kx))`
    SigmoidDerivative,
    /// `max(0, 1 - k|x|)`
    PiecewiseLinear,
    /// `1 / (1 + (kx)^2)`
    Arctan,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 4] = [
        SurrogateKind::Superspike,
        SurrogateKind::SigmoidDerivative,
        SurrogateKind::PiecewiseLinear,
        SurrogateKind::Arctan,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFn {
    pub kind: SurrogateKind,
    #[serde(default = "SurrogateFn::default_slope")]
    pub slope: f64,
}

impl Default for SurrogateFn {
    fn default() -> Self {
        SurrogateFn {
            kind: SurrogateKind::Superspike,
            slope: Self::DEFAULT_SLOPE,
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::ZERO {
        F::ONE / (F::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::ONE + e)
    }
}

impl SurrogateFn {
    pub const DEFAULT_SLOPE: f64 = 10.0;

    fn default_slope() -> f64 {
        Self::DEFAULT_SLOPE
    }

    pub fn new(kind: SurrogateKind, slope: f64) -> Result<Self> {
        let s = SurrogateFn { kind, slope };
        s.validate()?;
        Ok(s)
    }

    pub fn superspike(slope: f64) -> Self {
        SurrogateFn {
            kind: SurrogateKind::Superspike,
            slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slope.is_finite() && self.slope > 0.0) {
            return Err(Error::validation(
                "surrogate slope",
                format!("must be positive and finite, got {}", self.slope),
            ));
        }
        Ok(())
    }

    /// Surrogate derivative of the step at `x = u - thr`.
    pub fn derivative<F: Scalar>(&self, x: F) -> F {
        let k = F::from_f64(self.slope);
        match self.kind {
            SurrogateKind::Superspike => {
                let d = F::ONE + k * x.abs();
                F::ONE / (d * d)
            }
            SurrogateKind::SigmoidDerivative => {
                let s = sigmoid(k * x.abs());
                F::from_f64(4.0) * s * (F::ONE - s)
            }
            SurrogateKind::PiecewiseLinear => (F::ONE - k * x.abs()).max(F::ZERO),
            SurrogateKind::Arctan => {
                let z = k * x;
                F::ONE / (F::ONE + z * z)
            }
        }
    }

    /// Smooth step with range (0, 1) and value 1/2 at `x = 0`, shaped like
    /// this surrogate with slope `sharpness`.
    pub fn smooth_step<F: Scalar>(&self, x: F, sharpness: F) -> F {
        let half = F::from_f64(0.5);
        match self.kind {
            SurrogateKind::Superspike => {
                half + half * sharpness * x / (F::ONE + sharpness * x.abs())
            }
            SurrogateKind::SigmoidDerivative => sigmoid(sharpness * x),
            SurrogateKind::PiecewiseLinear => {
                let z = sharpness * x;
                if z <= -F::ONE {
                    F::ZERO
                } else if z < F::ZERO {
                    half * (F::ONE + z) * (F::ONE + z)
                } else if z < F::ONE {
                    F::ONE - half * (F::ONE - z) * (F::ONE - z)
                } else {
                    F::ONE
                }
            }
            SurrogateKind::Arctan => {
                half + (sharpness * x).atan() / F::from_f64(std::f64::consts::PI)
            }
        }
    }

    /// Exact derivative of [`smooth_step`](Self::smooth_step).
    pub fn smooth_step_derivative<F: Scalar>(&self, x: F, sharpness: F) -> F {
        let k = sharpness;
        match self.kind {
            SurrogateKind::Superspike => {
                let d = F::ONE + k * x.abs();
                F::from_f64(0.5) * k / (d * d)
            }
            SurrogateKind::SigmoidDerivative => {
                let s = sigmoid(k * x.abs());
                k * s * (F::ONE - s)
            }
            SurrogateKind::PiecewiseLinear => k * (F::ONE - k * x.abs()).max(F::ZERO),
            SurrogateKind::Arctan => {
                let z = k * x;
                k / (F::from_f64(std::f64::consts::PI) * (F::ONE + z * z))
            }
        }
    }
}
