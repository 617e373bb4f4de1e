//! AdamW with a linear warmup / linear decay schedule and global-norm
//! gradient clipping.
//!
//! ```text
//! θ ← θ − lr·λ·θ                      (decoupled decay, weight matrices only)
//! m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
//! θ ← θ − lr · (m/(1−β₁ᵗ)) / (√(v/(1−β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> AdamW {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        AdamW {
            config,
            step: 0,
            m: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, _, t)| zeros(t)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> AdamW {
        AdamW { config, step, m, v }
    }

    /// One update at learning rate `lr`. Parameters without a gradient still
    /// decay and advance their moments with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            let bad: Vec<&str> = grads
                .iter()
                .filter(|(_, g)| !g.is_finite())
                .map(|(id, _)| store.name(id))
                .collect();
            return Err(Error::NonFinite {
                step: self.step as usize,
                detail: format!("non-finite gradient in {}", bad.join(", ")),
            });
        }
        self.step += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let decay = if store.decays(id) { weight_decay } else { 0.0 };
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for k in 0..p.len() {
                let gk = g.map(|g| g.data()[k]).unwrap_or(0.0);
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mut x = p.data()[k];
                x -= lr * decay * x;
                x -= lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
                p.data_mut()[k] = x;
            }
        }
        if !store.all_finite() {
            return Err(Error::NonFinite {
                step: self.step as usize,
                detail: "parameters became non-finite".into(),
            });
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then linear decay to
/// 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearWarmup {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearWarmup {
    /// Warmup length is `ceil(ratio · total_steps)`.
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> LinearWarmup {
        LinearWarmup {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).ceil() as usize,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1);
        self.peak * (self.total_steps - step) as f64 / span as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(x), true);
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        let mut g = Gradients::new(1);
        g.accumulate(id, &Tensor::scalar(0.0));
        opt.step(&mut s, &g, 1e-3).unwrap();
        assert_eq!(s.get(id).item(), 0.7);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // θ=0.5, g=0.2, lr=0.1, λ=0.01, β=(0.9,0.999), ε=1e-8
        // decay: 0.5 - 0.1*0.01*0.5 = 0.4995
        // m=0.02, v=0.00004, m̂=0.2, v̂=0.04, step = 0.1*0.2/(0.2+1e-8)
        let (mut s, id) = scalar_store(0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut g = Gradients::new(1);
        g.accumulate(id, &Tensor::scalar(0.2));
        opt.step(&mut s, &g, 0.1).unwrap();
        let expect = 0.4995 - 0.1 * 0.2 / (0.2 + 1e-8);
        assert!((s.get(id).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = scalar_store(0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut g = Gradients::new(1);
        g.accumulate(id, &Tensor::scalar(f64::NAN));
        let err = opt.step(&mut s, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn warmup_schedule_shape() {
        let total = 100;
        let s = LinearWarmup::new(1e-3, 0.06, total);
        assert_eq!(s.warmup_steps, 6);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(6) - 1e-3).abs() < 1e-15);
        assert!(s.lr_at(3) < s.lr_at(6));
        assert!(s.lr_at(50) < s.lr_at(6));
        assert_eq!(s.lr_at(100), 0.0);
    }

    fn grads_of(values: &[f64]) -> Gradients {
        let mut g = Gradients::new(1);
        g.accumulate(ParamId(0), &Tensor::row_vector(values.to_vec()));
        g
    }

    #[test]
    fn clipping_examples() {
        let mut g = grads_of(&[0.3, 0.4]);
        assert!((clip_global_norm(&mut g, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.3, 0.4]);
        let mut g = grads_of(&[0.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_norm_never_exceeds_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = Tensor::randn(1, 7, 3.0, &mut rng);
            let mut g = grads_of(t.data());
            clip_global_norm(&mut g, 1.0);
            assert!(g.global_norm() <= 1.0 + 1e-12);
        }
    }
}
