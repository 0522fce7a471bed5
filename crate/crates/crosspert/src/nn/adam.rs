//! Adam with bias correction, in the same functional style as the rest of
//! the network core: a step consumes (params, grads, state) by reference and
//! returns the updated pair. Batchnorm running statistics are state, not
//! parameters, so the optimizer never touches them.

use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerGrads, LayerParams, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// First/second moment estimates plus hyperparameters for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    m: Gradients<T>,
    v: Gradients<T>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Fresh zero-moment state for `params` with standard betas and epsilon.
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        OptimizerState {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update:
///   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²,
///   θ ← θ − lr · m̂ / (√v̂ + ε)  with  m̂ = m/(1−β₁ᵗ),  v̂ = v/(1−β₂ᵗ).
pub fn adam_step<T: Scalar>(
    params: &ParamSet<T>,
    grads: &Gradients<T>,
    state: &OptimizerState<T>,
) -> Result<(ParamSet<T>, OptimizerState<T>)> {
    if params.layers.len() != grads.layers.len() {
        return Err(Error::Usage(format!(
            "gradient layout ({} layers) does not match parameters ({} layers)",
            grads.layers.len(),
            params.layers.len()
        )));
    }
    let mut new_params = params.clone();
    let mut new_state = state.clone();
    new_state.step = state.step + 1;
    let t = new_state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);

    for li in 0..new_params.layers.len() {
        let (tensors, gtensors, ms, vs): (
            Vec<&mut Tensor<T>>,
            Vec<&Tensor<T>>,
            Vec<&mut Tensor<T>>,
            Vec<&mut Tensor<T>>,
        ) = match (
            &mut new_params.layers[li],
            &grads.layers[li],
            &mut new_state.m.layers[li],
            &mut new_state.v.layers[li],
        ) {
            (
                LayerParams::Dense(dp),
                LayerGrads::Dense { d_weight, d_bias },
                LayerGrads::Dense {
                    d_weight: mw,
                    d_bias: mb,
                },
                LayerGrads::Dense {
                    d_weight: vw,
                    d_bias: vb,
                },
            ) => (
                vec![&mut dp.weight, &mut dp.bias],
                vec![d_weight, d_bias],
                vec![mw, mb],
                vec![vw, vb],
            ),
            (
                LayerParams::BatchNorm(bp),
                LayerGrads::BatchNorm { d_scale, d_shift },
                LayerGrads::BatchNorm {
                    d_scale: ms,
                    d_shift: mh,
                },
                LayerGrads::BatchNorm {
                    d_scale: vs,
                    d_shift: vh,
                },
            ) => (
                vec![&mut bp.scale, &mut bp.shift],
                vec![d_scale, d_shift],
                vec![ms, mh],
                vec![vs, vh],
            ),
            (LayerParams::Stateless, LayerGrads::Stateless, _, _) => continue,
            _ => {
                return Err(Error::Usage(format!(
                    "layer {li}: gradient kind does not match parameter kind"
                )))
            }
        };

        for (((theta, g), m), v) in tensors
            .into_iter()
            .zip(gtensors)
            .zip(ms)
            .zip(vs)
        {
            if theta.shape() != g.shape() {
                return Err(Error::Usage(format!(
                    "layer {li}: gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let beta1 = T::from_f64(state.beta1);
            let one_m_b1 = T::from_f64(1.0 - state.beta1);
            let beta2 = T::from_f64(state.beta2);
            let one_m_b2 = T::from_f64(1.0 - state.beta2);
            let lr = T::from_f64(state.lr);
            let eps = T::from_f64(state.eps);
            let bc1 = T::from_f64(bc1);
            let bc2 = T::from_f64(bc2);
            let td = theta.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..td.len() {
                let gk = g.data()[k];
                md[k] = beta1 * md[k] + one_m_b1 * gk;
                vd[k] = beta2 * vd[k] + one_m_b2 * gk * gk;
                let m_hat = md[k] / bc1;
                let v_hat = vd[k] / bc2;
                td[k] = td[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    for lp in &new_params.layers {
        let finite = match lp {
            LayerParams::Dense(dp) => dp.weight.is_all_finite() && dp.bias.is_all_finite(),
            LayerParams::BatchNorm(bp) => bp.scale.is_all_finite() && bp.shift.is_all_finite(),
            LayerParams::Stateless => true,
        };
        if !finite {
            return Err(Error::Numeric(
                "non-finite parameter values after optimizer step".into(),
            ));
        }
    }
    Ok((new_params, new_state))
}
