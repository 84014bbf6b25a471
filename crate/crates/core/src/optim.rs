use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Bias-corrected Adam over a [`ParamStore`]. Frozen parameters are never
/// touched, so their payload stays bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> Option<&Moments> {
        self.moments.get(index).and_then(Option::as_ref)
    }

    /// One update using the gradients stored on the parameters. Trainable
    /// parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.t += 1;
        let cfg = self.config;
        let bc1 = 1.0 - libm::powf(cfg.beta1, self.t as f32);
        let bc2 = 1.0 - libm::powf(cfg.beta2, self.t as f32);
        for id in store.trainable_ids() {
            let len = store.get(id).len();
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; len],
                v: vec![0.0; len],
            });
            if slot.m.len() != len {
                return Err(Error::shape(
                    "adam_step",
                    format!("moment buffer {} vs parameter {}", slot.m.len(), len),
                ));
            }
            let tensor = store.get_mut(id);
            let grad = tensor.take_grad();
            let g: &[f32] = grad.as_deref().unwrap_or(&[]);
            let p = tensor.data_mut();
            for j in 0..len {
                let gj = g.get(j).copied().unwrap_or(0.0);
                let m = cfg.beta1 * slot.m[j] + (1.0 - cfg.beta1) * gj;
                let v = cfg.beta2 * slot.v[j] + (1.0 - cfg.beta2) * gj * gj;
                slot.m[j] = m;
                slot.v[j] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p[j] -= cfg.lr * mhat / (kernels::sqrt(vhat) + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all stored gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> f32 {
    clip_grad_norm_all(&mut [store], max_norm)
}

/// [`clip_grad_norm`] with one joint norm over several stores.
pub fn clip_grad_norm_all(stores: &mut [&mut ParamStore], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for store in stores.iter() {
        for id in store.trainable_ids() {
            if let Some(g) = store.get(id).grad() {
                sq += g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
            }
        }
    }
    let norm = libm::sqrt(sq) as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for store in stores.iter_mut() {
            for id in store.trainable_ids() {
                let t = store.get_mut(id);
                if let Some(mut g) = t.take_grad() {
                    g.iter_mut().for_each(|v| *v *= scale);
                    t.accumulate_grad(&g).expect("same length");
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut s = store_with(&[1.0, -2.0]);
        let id = s.require("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(&[0.5]);
        let id = s.require("p").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.01,
            eps: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - (0.5 - 0.01)).abs() < 1e-7);
    }

    #[test]
    fn two_steps_match_closed_form_ema() {
        let mut s = store_with(&[0.0]);
        let id = s.require("p").unwrap();
        let g = 0.3f32;
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..2 {
            s.get_mut(id).accumulate_grad(&[g]).unwrap();
            adam.step(&mut s).unwrap();
        }
        assert_eq!(adam.step_count(), 2);
        let m = adam.moments(id.index()).unwrap();
        // m_2 = (1 - b1^2) g, v_2 = (1 - b2^2) g^2
        let m2 = (1.0 - 0.9f32 * 0.9) * g;
        let v2 = (1.0 - 0.999f32 * 0.999) * g * g;
        assert!((m.m[0] - m2).abs() < 1e-7);
        assert!((m.v[0] - v2).abs() <= 1e-5 * v2);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = store_with(&[1.0]);
        let id = s.require("p").unwrap();
        s.get_mut(id).accumulate_grad(&[5.0]).unwrap();
        s.set_trainable(id, false);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &[1.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = store_with(&[0.0, 0.0]);
        let id = s.require("p").unwrap();
        s.get_mut(id).accumulate_grad(&[3.0, 4.0]).unwrap();
        let before = clip_grad_norm(&mut s, 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        let g = s.get(id).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }
}
