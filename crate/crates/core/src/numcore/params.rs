use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, ParamKey};
use super::tensor::{Real, Tensor};
use crate::error::{OceanError, Result};

/// One named learnable array with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct ParamBlock<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> ParamBlock<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        ParamBlock {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered collection of parameter blocks. The `tag` distinguishes stores
/// whose gradients come back from the same tape.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    tag: u32,
    blocks: Vec<ParamBlock<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(tag: u32) -> Self {
        ParamStore {
            tag,
            blocks: Vec::new(),
            step: 0,
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.blocks.push(ParamBlock::new(name, value));
        self.blocks.len() - 1
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> usize {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data).expect("sized"))
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            store: self.tag,
            index: index as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, index: usize) -> &ParamBlock<T> {
        &self.blocks[index]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut ParamBlock<T> {
        &mut self.blocks[index]
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    /// Adds `scale * g` into the `.grad` of every block of this store that
    /// appears in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (key, g) in &grads.entries {
            if key.store != self.tag {
                continue;
            }
            let b = &mut self.blocks[key.index as usize];
            for (d, &s) in b.grad.data_mut().iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(T::zero());
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.grad.is_finite())
    }

    pub fn grad_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = T::lit(max_norm / norm);
            for b in &mut self.blocks {
                b.grad.scale_assign(k);
            }
        }
        norm
    }

    /// Applies one bias-corrected Adam update using the accumulated
    /// gradients (1-based step `t`), then zeroes them.
    pub fn adam_step(&mut self, cfg: &AdamConfig, t: u64) -> Result<()> {
        if t == 0 {
            return Err(OceanError::invalid("adam_step: steps are 1-based, got t = 0"));
        }
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - b2.powi(t.min(i32::MAX as u64) as i32);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step = T::lit(cfg.lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(cfg.eps);
        for b in &mut self.blocks {
            let ParamBlock {
                value, grad, m, v, ..
            } = b;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((val, &g), (m, v)) in it {
                *m = tb1 * *m + one_b1 * g;
                *v = tb2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / sqrt_bc2 + eps;
                *val -= step * *m / denom;
            }
            b.grad.fill(T::zero());
        }
        self.step = t;
        Ok(())
    }

    /// Convenience: advance the store's own step counter and apply Adam.
    pub fn adam_next(&mut self, cfg: &AdamConfig) -> Result<()> {
        let t = self.step + 1;
        self.adam_step(cfg, t)
    }

    /// Copies values (not optimizer state) from `other`, which must have
    /// the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.blocks.len() != self.blocks.len() {
            return Err(OceanError::invalid("copy_values_from: block count differs"));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            if a.value.shape() != b.value.shape() {
                return Err(OceanError::shape("copy_values_from", a.value.shape(), b.value.shape()));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// Same layout and values in another element type; fresh optimizer state.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tag: self.tag,
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock::new(b.name.clone(), b.value.cast()))
                .collect(),
            step: 0,
        }
    }

    /// True if every value is bitwise identical to `other`'s.
    pub fn values_bit_identical(&self, other: &ParamStore<T>) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
