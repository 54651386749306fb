//! Adam with coupled L2 weight decay.
//!
//! The decay term `wd * param` is added to the gradient before the moment
//! updates, so it is rescaled by the adaptive denominator like any other
//! gradient component.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment buffers and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Adam over a fixed, ordered list of named parameters.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    state: AdamState<T>,
}

impl<T: Element> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Self {
        let (names, params): (Vec<String>, Vec<Tensor<T>>) =
            params.into_iter().map(|(n, t)| (n.to_string(), t.clone())).unzip();
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.numel()];
        let state = AdamState {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        };
        Self {
            config,
            names,
            params,
            state,
        }
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// Replaces the moment buffers, checking them against parameter shapes.
    pub fn set_state(&mut self, state: AdamState<T>) -> Result<()> {
        if state.m.len() != self.params.len() || state.v.len() != self.params.len() {
            return Err(Error::Config(format!(
                "optimizer state holds {} / {} buffers for {} parameters",
                state.m.len(),
                state.v.len(),
                self.params.len()
            )));
        }
        for ((name, p), (m, v)) in self.names.iter().zip(&self.params).zip(state.m.iter().zip(&state.v)) {
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(Error::Config(format!("optimizer state for `{name}` does not match its shape")));
            }
        }
        self.state = state;
        Ok(())
    }

    /// Clears every parameter gradient.
    pub fn zero_grads(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// One bias-corrected Adam update. Every parameter must hold a gradient.
    pub fn step(&mut self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| p.grad_ref().is_none()) {
            return Err(Error::MissingGrad(self.names[i].clone()));
        }
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = |x: f64| T::from_f64_lossy(x);
        let (b1, b2, wd, eps) = (f(c.beta1), f(c.beta2), f(c.weight_decay), f(c.eps));
        let (one_b1, one_b2) = (f(1.0 - c.beta1), f(1.0 - c.beta2));
        let step_size = f(c.lr / bc1);
        let inv_sqrt_bc2 = f(1.0 / bc2.sqrt());
        for (p, (m, v)) in self.params.iter().zip(self.state.m.iter_mut().zip(self.state.v.iter_mut())) {
            let grad = p.grad_ref().expect("checked above");
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                data[i] = data[i] - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
