//! Named parameter store with gradient buffers and Adam moments. Training is
//! f32; gradient-check shadow graphs cast on bind.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::graph::Graph;
use crate::net::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub entries: BTreeMap<String, Param>,
    /// Completed optimizer steps (drives bias correction).
    pub step: u64,
    /// Steps skipped because a gradient was non-finite.
    pub anomalies: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<f32>) {
        let shape = value.shape.clone();
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn n_params(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            for g in p.grad.data.iter_mut() {
                *g = 0.0;
            }
        }
    }

    /// Add the graph's parameter gradients into the store buffers.
    pub fn accumulate_grads<S: Scalar>(&mut self, graph: &Graph<S>) -> Result<()> {
        for (name, grad) in graph.param_grads()? {
            let p = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown param `{name}`")))?;
            if p.grad.shape != grad.shape {
                return Err(Error::contract(format!("gradient shape mismatch on `{name}`")));
            }
            for (dst, src) in p.grad.data.iter_mut().zip(&grad.data) {
                *dst += src.to_f64() as f32;
            }
        }
        Ok(())
    }

    /// Bias-corrected Adam over the trainable subset. If any trainable
    /// gradient is non-finite the whole update is skipped and the anomaly
    /// counter increments.
    pub fn adam_step(&mut self, hp: AdamParams, trainable: impl Fn(&str) -> bool) {
        let finite = self
            .entries
            .iter()
            .filter(|(name, _)| trainable(name))
            .all(|(_, p)| p.grad.all_finite());
        if !finite {
            self.anomalies += 1;
            return;
        }
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - hp.beta1.powf(t);
        let bc2 = 1.0 - hp.beta2.powf(t);
        for (name, p) in self.entries.iter_mut() {
            if !trainable(name) {
                continue;
            }
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i] as f64;
                let m = hp.beta1 * p.m.data[i] as f64 + (1.0 - hp.beta1) * g;
                let v = hp.beta2 * p.v.data[i] as f64 + (1.0 - hp.beta2) * g * g;
                p.m.data[i] = m as f32;
                p.v.data[i] = v as f32;
                let update = hp.lr * (m / bc1) / ((v / bc2).sqrt() + hp.eps);
                p.value.data[i] -= update as f32;
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]));
        let before = s.get("w").unwrap().value.clone();
        s.adam_step(AdamParams::default(), |_| true);
        assert_eq!(s.get("w").unwrap().value, before);
    }

    #[test]
    fn quadratic_toy_converges() {
        // minimize (w - 3)^2 via graph gradients
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[1, 1], vec![2.0]));
        let target = Tensor::from_vec(&[1, 1], vec![3.0]);
        for _ in 0..500 {
            s.zero_grads();
            let mut g = Graph::<f32>::new();
            let w = g.param("w", s.get("w").unwrap().value.clone());
            let loss = g.mse_mean(w, &target);
            g.backward(loss).unwrap();
            s.accumulate_grads(&g).unwrap();
            s.adam_step(AdamParams::with_lr(1e-2), |_| true);
        }
        let w = s.get("w").unwrap().value.data[0] as f64;
        assert!((w - 3.0).powi(2) < 1e-6, "w = {w}");
    }

    #[test]
    fn non_finite_grad_skips_update() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[1], vec![1.0]));
        s.entries.get_mut("w").unwrap().grad.data[0] = f32::NAN;
        s.adam_step(AdamParams::default(), |_| true);
        assert_eq!(s.get("w").unwrap().value.data[0], 1.0);
        assert_eq!(s.anomalies, 1);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::from_vec(&[1, 1], vec![0.5]));
            let target = Tensor::from_vec(&[1, 1], vec![-1.5]);
            for _ in 0..100 {
                s.zero_grads();
                let mut g = Graph::<f32>::new();
                let w = g.param("w", s.get("w").unwrap().value.clone());
                let loss = g.mse_mean(w, &target);
                g.backward(loss).unwrap();
                s.accumulate_grads(&g).unwrap();
                s.adam_step(AdamParams::with_lr(5e-3), |_| true);
            }
            s.get("w").unwrap().value.data[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
