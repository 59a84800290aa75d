//! Adam optimizer with bias correction (default β1=0.9, β2=0.999, ε=1e-8).

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second-moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    /// Zero-initialized state matching the parameter shapes.
    pub fn new(params: &[Tensor<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a parameter list; deterministic for fixed inputs.
pub fn adam_step<F: Scalar>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    let mut slots: Vec<&mut Tensor<F>> = params.iter_mut().collect();
    adam_step_slices(&mut slots, grads, state, lr)
}

/// `adam_step` over borrowed parameter slots, for parameter structs that
/// cannot expose one contiguous tensor slice.
pub fn adam_step_slices<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} state slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let b1 = F::from_f64_c(ADAM_BETA1);
    let b2 = F::from_f64_c(ADAM_BETA2);
    let eps = F::from_f64_c(ADAM_EPS);
    let lr = F::from_f64_c(lr);
    let one = F::one();
    let bc1 = one - F::from_f64_c(ADAM_BETA1.powi(state.step as i32));
    let bc2 = one - F::from_f64_c(ADAM_BETA2.powi(state.step as i32));

    for ((p, g), (m, v)) in params
        .iter_mut()
        .map(|p| &mut **p)
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        p.check_finite("adam_step")?;
    }
    Ok(())
}
