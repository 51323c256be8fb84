//! SGD, RMSProp and Adam over the named trainable tensors of a model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelParams, ParamGrads};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Rmsprop,
    Adam,
}

impl OptimKind {
    pub fn code(self) -> u8 {
        match self {
            OptimKind::Sgd => 0,
            OptimKind::Rmsprop => 1,
            OptimKind::Adam => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [OptimKind::Sgd, OptimKind::Rmsprop, OptimKind::Adam].into_iter().find(|k| k.code() == c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    /// Decoupled weight decay: `θ ← θ − lr·wd·θ` before the gradient step.
    #[serde(default)]
    pub weight_decay: f64,
}

mod defaults {
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn rho() -> f64 {
        0.9
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl OptimConfig {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        OptimConfig {
            kind,
            lr,
            rho: defaults::rho(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("optimizer.{what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(&format!("lr = {} must be positive", self.lr));
        }
        for (name, v) in [("rho", self.rho), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} = {v} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(&format!("eps = {} must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(&format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Accumulators for one tensor. `m` is only used by Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot<T> {
    pub name: String,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub steps: u64,
    pub slots: Vec<Slot<T>>,
}

impl<T: Real> OptimState<T> {
    /// Fresh state with zeroed accumulators shaped like `tensors`.
    pub fn for_tensors(config: OptimConfig, tensors: &[(&str, &[T])]) -> Result<Self> {
        config.validate()?;
        let slots = tensors
            .iter()
            .map(|(name, t)| Slot {
                name: (*name).to_string(),
                m: if config.kind == OptimKind::Adam { vec![T::zero(); t.len()] } else { Vec::new() },
                v: if config.kind == OptimKind::Sgd { Vec::new() } else { vec![T::zero(); t.len()] },
            })
            .collect();
        Ok(OptimState { config, steps: 0, slots })
    }

    pub fn new(config: OptimConfig, params: &ModelParams<T>) -> Result<Self> {
        Self::for_tensors(config, &params.tensors())
    }

    /// Applies one update. Every gradient is checked before anything is
    /// modified, so a non-finite gradient leaves parameters and state intact.
    pub fn step_tensors(&mut self, mut params: Vec<(&str, &mut [T])>, grads: &[(&str, &[T])]) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::contract(
                "optim step",
                format!(
                    "{} parameter tensors, {} gradients, {} slots",
                    params.len(),
                    grads.len(),
                    self.slots.len()
                ),
            ));
        }
        for ((slot, (pn, p)), (gn, g)) in self.slots.iter().zip(&params).zip(grads) {
            if slot.name != *pn || slot.name != *gn || p.len() != g.len() {
                return Err(Error::contract(
                    "optim step",
                    format!("tensor `{}` misaligned with parameter `{pn}` / gradient `{gn}`", slot.name),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: format!("grad {gn}"),
                });
            }
        }
        self.steps += 1;
        let c = &self.config;
        let lit = T::lit;
        let (lr, eps) = (lit(c.lr), lit(c.eps));
        let decay = lit(1.0 - c.lr * c.weight_decay);
        let bc1 = lit(1.0 - c.beta1.powi(self.steps.min(i32::MAX as u64) as i32));
        let bc2 = lit(1.0 - c.beta2.powi(self.steps.min(i32::MAX as u64) as i32));
        let (rho, beta1, beta2) = (lit(c.rho), lit(c.beta1), lit(c.beta2));
        let one = T::one();
        for ((slot, (_, p)), (_, g)) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads) {
            if c.weight_decay > 0.0 {
                p.iter_mut().for_each(|v| *v = *v * decay);
            }
            match c.kind {
                OptimKind::Sgd => {
                    for (v, &g) in p.iter_mut().zip(g.iter()) {
                        *v = *v - lr * g;
                    }
                }
                OptimKind::Rmsprop => {
                    for ((v, s), &g) in p.iter_mut().zip(slot.v.iter_mut()).zip(g.iter()) {
                        *s = rho * *s + (one - rho) * g * g;
                        *v = *v - lr * g / (s.sqrt() + eps);
                    }
                }
                OptimKind::Adam => {
                    for (((v, m), s), &g) in p.iter_mut().zip(slot.m.iter_mut()).zip(slot.v.iter_mut()).zip(g.iter()) {
                        *m = beta1 * *m + (one - beta1) * g;
                        *s = beta2 * *s + (one - beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *s / bc2;
                        *v = *v - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates the trainable tensors of `params`; λ and β are not reachable
    /// from here.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ParamGrads<T>) -> Result<()> {
        let g = grads.tensors();
        self.step_tensors(params.tensors_mut(), &g)
    }
}
