use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Adam moments and hyper-parameters for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParameterSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParameterSet {
        &self.v
    }
}

/// One bias-corrected Adam step. Nothing is modified when `grads` holds a NaN
/// or infinity.
pub fn adam_update(params: &mut ParameterSet, grads: &ParameterSet, state: &mut OptimizerState) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    if let Some(idx) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at flat index {idx}; update aborted")));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let apply = state.lr != 0.0;
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut()));
    for ((p, g), (m, v)) in tensors {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
            if apply {
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
    }
    Ok(())
}
