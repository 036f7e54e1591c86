use super::{Grad, Mlp};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        AdamState {
            first: vec![0.0; net.params().len()],
            second: vec![0.0; net.params().len()],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Clears both moments and the step counter, keeping hyperparameters.
    pub fn reset(&mut self) {
        self.first.iter_mut().for_each(|m| *m = 0.0);
        self.second.iter_mut().for_each(|v| *v = 0.0);
        self.step = 0;
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first, &self.second)
    }
}

/// One bias-corrected Adam update of `net` along `grad`.
pub fn adam_step(net: &mut Mlp, grad: &Grad, state: &mut AdamState) -> Result<()> {
    if !grad.congruent_to(net) || state.first.len() != net.params().len() {
        return Err(Error::Shape("optimizer state, gradient and network differ in shape".into()));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("gradient passed to adam_step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, g), m), v) in net
        .params_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
