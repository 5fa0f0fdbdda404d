//! Current-based leaky integrate-and-fire neurons.
//!
//! Each neuron carries two internal states, the membrane potential `U` and
//! the synaptic current `I`, plus its last spike `S`. One step is
//!
//! ```text
//! I'    = beta * I + x
//! U_pre = alpha * U + I'
//! S'    = step(U_pre - thr)
//! U'    = U_pre - thr * S'        (subtract)
//!       = U_pre - U_pre * S'      (to_zero)
//! ```
//!
//! Every line is built from tape primitives, so gradients flow through the
//! reset term as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::SurrogateFn;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    Subtract,
    ToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Membrane decay.
    pub alpha: f64,
    /// Synaptic current decay.
    pub beta: f64,
    #[serde(default = "LifParams::default_thr")]
    pub thr: f64,
    #[serde(default)]
    pub surrogate: SurrogateFn,
    #[serde(default)]
    pub reset: ResetMode,
}

impl LifParams {
    fn default_thr() -> f64 {
        1.0
    }

    /// Decays `alpha`, `beta` with threshold 1, superspike surrogate and
    /// reset by subtraction.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = LifParams {
            alpha,
            beta,
            thr: 1.0,
            surrogate: SurrogateFn::default(),
            reset: ResetMode::Subtract,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_surrogate(mut self, surrogate: SurrogateFn) -> Self {
        self.surrogate = surrogate;
        self
    }

    pub fn with_reset(mut self, reset: ResetMode) -> Self {
        self.reset = reset;
        self
    }

    pub fn with_thr(mut self, thr: f64) -> Self {
        self.thr = thr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.alpha) {
            return Err(Error::validation(
                "alpha",
                format!("must lie in (0, 1), got {}", self.alpha),
            ));
        }
        if !open_unit(self.beta) {
            return Err(Error::validation(
                "beta",
                format!("must lie in (0, 1), got {}", self.beta),
            ));
        }
        if !(self.thr > 0.0 && self.thr.is_finite()) {
            return Err(Error::validation(
                "thr",
                format!("must be positive and finite, got {}", self.thr),
            ));
        }
        self.surrogate.validate()
    }
}

#[derive(Debug, Clone)]
pub struct NeuronState<F: Scalar> {
    pub u: Tensor<F>,
    pub i: Tensor<F>,
    pub s: Tensor<F>,
}

impl<F: Scalar> NeuronState<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        NeuronState {
            u: Tensor::zeros(shape),
            i: Tensor::zeros(shape),
            s: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.u.shape()
    }

    /// Untracked copy.
    pub fn detach(&self) -> Self {
        NeuronState {
            u: self.u.detach(),
            i: self.i.detach(),
            s: self.s.detach(),
        }
    }

    pub fn value_eq(&self, other: &Self) -> bool {
        self.u.value_eq(&other.u) && self.i.value_eq(&other.i) && self.s.value_eq(&other.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Zeros,
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl InitMode {
    pub fn validate(&self) -> Result<()> {
        if let InitMode::Uniform { lo, hi } = *self {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::validation(
                    "uniform init range",
                    format!("need finite lo < hi, got [{lo}, {hi})"),
                ));
            }
        }
        Ok(())
    }
}

/// Initial state for `n` neurons. `U` and `I` follow `mode`, `S` is zero.
pub fn init_state<F: Scalar>(n: usize, mode: InitMode, seed: u64) -> Result<NeuronState<F>> {
    if n == 0 {
        return Err(Error::validation("neuron count", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_state_shaped(&[n], mode, &mut rng)
}

/// As [`init_state`] for an arbitrary layer shape, drawing from `rng`.
pub fn init_state_shaped<F: Scalar, R: Rng>(
    shape: &[usize],
    mode: InitMode,
    rng: &mut R,
) -> Result<NeuronState<F>> {
    mode.validate()?;
    if shape.contains(&0) {
        return Err(Error::validation("state shape", format!("{shape:?}")));
    }
    match mode {
        InitMode::Zeros => Ok(NeuronState::zeros(shape)),
        InitMode::Uniform { lo, hi } => {
            let n: usize = shape.iter().product();
            let draw = |rng: &mut R| -> Vec<F> {
                (0..n).map(|_| F::from_f64(rng.gen_range(lo..hi))).collect()
            };
            let u = draw(rng);
            let i = draw(rng);
            Ok(NeuronState {
                u: Tensor::new(shape.to_vec(), u)?,
                i: Tensor::new(shape.to_vec(), i)?,
                s: Tensor::zeros(shape),
            })
        }
    }
}

fn check_shapes<F: Scalar>(state: &NeuronState<F>, input: &Tensor<F>) -> Result<()> {
    for t in [&state.i, &state.s] {
        if t.shape() != state.u.shape() {
            return Err(Error::shape("lif state", state.u.shape(), t.shape()));
        }
    }
    if input.shape() != state.u.shape() {
        return Err(Error::shape("lif_step", state.u.shape(), input.shape()));
    }
    Ok(())
}

fn integrate<F: Scalar>(
    tape: &mut Tape<F>,
    state: &NeuronState<F>,
    input: &Tensor<F>,
    p: &LifParams,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let decayed_i = tape.scale(&state.i, F::from_f64(p.beta))?;
    let i = tape.add(&decayed_i, input)?;
    let decayed_u = tape.scale(&state.u, F::from_f64(p.alpha))?;
    let u_pre = tape.add(&decayed_u, &i)?;
    Ok((i, u_pre))
}

fn reset<F: Scalar>(
    tape: &mut Tape<F>,
    u_pre: &Tensor<F>,
    s: &Tensor<F>,
    p: &LifParams,
) -> Result<Tensor<F>> {
    let drop = match p.reset {
        ResetMode::Subtract => tape.scale(s, F::from_f64(p.thr))?,
        ResetMode::ToZero => tape.mul(u_pre, s)?,
    };
    tape.sub(u_pre, &drop)
}

/// One LIF update. Returns the new state and its spikes (equal to `state.s`
/// of the result).
pub fn lif_step<F: Scalar>(
    tape: &mut Tape<F>,
    state: &NeuronState<F>,
    input: &Tensor<F>,
    params: &LifParams,
) -> Result<(NeuronState<F>, Tensor<F>)> {
    check_shapes(state, input)?;
    let (i, u_pre) = integrate(tape, state, input, params)?;
    let s = tape.threshold(&u_pre, F::from_f64(params.thr), params.surrogate)?;
    let u = reset(tape, &u_pre, &s, params)?;
    Ok((NeuronState { u, i, s: s.clone() }, s))
}

/// [`lif_step`] with the hard threshold replaced by the surrogate's smooth
/// primitive at the given sharpness.
pub fn lif_smooth_step<F: Scalar>(
    tape: &mut Tape<F>,
    state: &NeuronState<F>,
    input: &Tensor<F>,
    params: &LifParams,
    sharpness: f64,
) -> Result<(NeuronState<F>, Tensor<F>)> {
    if !(sharpness > 0.0 && sharpness.is_finite()) {
        return Err(Error::validation(
            "sharpness",
            format!("must be positive and finite, got {sharpness}"),
        ));
    }
    check_shapes(state, input)?;
    let (i, u_pre) = integrate(tape, state, input, params)?;
    let s = tape.smooth_threshold(
        &u_pre,
        F::from_f64(params.thr),
        params.surrogate,
        F::from_f64(sharpness),
    )?;
    let u = reset(tape, &u_pre, &s, params)?;
    Ok((NeuronState { u, i, s: s.clone() }, s))
}
