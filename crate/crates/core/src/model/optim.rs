use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// AdamW with decoupled weight decay on matrices (ndim ≥ 2) only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a, I>(config: AdamWConfig, params: I) -> Self
    where
        I: IntoIterator<Item = &'a Tensor<T>>,
    {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self { config, m, v, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Bytes held by the moment buffers.
    pub fn state_bytes(&self) -> usize {
        self.m.iter().chain(&self.v).map(|b| b.len() * std::mem::size_of::<T>()).sum()
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// L2 norm over all gradients.
    pub fn global_norm(grads: &[&[T]]) -> f64 {
        grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::shape("adamw", p.shape(), &[g.len()]));
            }
        }
        let norm = Self::global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adamw" });
        }
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps, clip) = (T::lit(c.lr), T::lit(c.eps), T::lit(clip));
        let decay = T::lit(c.lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decays = p.ndim() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                if decays {
                    *w -= decay * *w;
                }
                *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
