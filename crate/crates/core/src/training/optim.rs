use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::topology::ParamMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Optimizer::Adam { beta1, beta2, eps } = *self {
            let unit = |v: f64| (0.0..1.0).contains(&v);
            if !unit(beta1) || !unit(beta2) {
                return Err(Error::validation("adam betas", "must lie in [0, 1)"));
            }
            if eps.is_nan() || eps <= 0.0 {
                return Err(Error::validation("adam eps", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Moment estimates carried between Adam steps.
#[derive(Debug, Clone, Default)]
pub struct OptState<F: Scalar> {
    pub step: u64,
    pub m: ParamMap<F>,
    pub v: ParamMap<F>,
}

/// Returns updated parameters. `grads` must have exactly the keys and shapes
/// of `params`.
pub fn optimizer_step<F: Scalar>(
    params: &ParamMap<F>,
    grads: &ParamMap<F>,
    state: &mut OptState<F>,
    optimizer: &Optimizer,
    lr: f64,
) -> Result<ParamMap<F>> {
    if params.len() != grads.len() || params.keys().ne(grads.keys()) {
        return Err(Error::Contract(format!(
            "gradient keys {:?} do not match parameter keys {:?}",
            grads.keys().collect::<Vec<_>>(),
            params.keys().collect::<Vec<_>>()
        )));
    }
    for (k, p) in params {
        if p.shape() != grads[k].shape() {
            return Err(Error::shape("optimizer_step", p.shape(), grads[k].shape()));
        }
    }
    let lr_f = F::from_f64(lr);
    state.step += 1;
    let mut out = ParamMap::new();
    match *optimizer {
        Optimizer::Sgd => {
            for (k, p) in params {
                let data = p
                    .data()
                    .iter()
                    .zip(grads[k].data())
                    .map(|(&w, &g)| w - lr_f * g)
                    .collect();
                out.insert(*k, Tensor::new(p.shape().to_vec(), data)?);
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let t = state.step as i32;
            let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
            let c1 = F::from_f64(1.0 - beta1.powi(t));
            let c2 = F::from_f64(1.0 - beta2.powi(t));
            let eps = F::from_f64(eps);
            for (k, p) in params {
                let g = grads[k].data();
                let n = p.numel();
                let m_prev = state
                    .m
                    .get(k)
                    .map(|m| m.to_vec())
                    .unwrap_or_else(|| vec![F::ZERO; n]);
                let v_prev = state
                    .v
                    .get(k)
                    .map(|v| v.to_vec())
                    .unwrap_or_else(|| vec![F::ZERO; n]);
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                let mut w = Vec::with_capacity(n);
                for j in 0..n {
                    let mj = b1 * m_prev[j] + (F::ONE - b1) * g[j];
                    let vj = b2 * v_prev[j] + (F::ONE - b2) * g[j] * g[j];
                    let m_hat = mj / c1;
                    let v_hat = vj / c2;
                    w.push(p.data()[j] - lr_f * m_hat / (v_hat.sqrt() + eps));
                    m.push(mj);
                    v.push(vj);
                }
                let shape = p.shape().to_vec();
                state.m.insert(*k, Tensor::new(shape.clone(), m)?);
                state.v.insert(*k, Tensor::new(shape.clone(), v)?);
                out.insert(*k, Tensor::new(shape, w)?);
            }
        }
    }
    Ok(out)
}
