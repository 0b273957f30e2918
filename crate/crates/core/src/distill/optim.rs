//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

use super::config::OptimConfig;

/// Learning rate for 0-based `step`: linear warmup to `lr` over
/// `warmup_steps`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(cfg: &OptimConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Matrices are decayed; vectors, scalars and the position and class
/// embeddings are not.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name != "pos_embed" && name != "cls_token"
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(&self.cfg, self.step)
    }

    /// Applies one update. `grads` follows the parameter order of
    /// [`Model::for_each_mut`]. Returns the learning rate used.
    pub fn update(&mut self, model: &mut Model, grads: &[Vec<f64>]) -> Result<f64> {
        self.update_params(&mut |f| model.for_each_mut(f), grads)
    }

    /// Like [`AdamW::update`] for any parameter collection; `visit` must
    /// present the parameters in the same order on every call.
    pub fn update_params(
        &mut self,
        visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor)),
        grads: &[Vec<f64>],
    ) -> Result<f64> {
        let mut lens = Vec::new();
        visit(&mut |_, t| lens.push(t.numel()));
        if lens.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer expected {} gradient buffers, got {}",
                lens.len(),
                grads.len()
            )));
        }
        if let Some(i) = (0..lens.len()).find(|&i| lens[i] != grads[i].len()) {
            return Err(Error::InvalidArgument(format!(
                "gradient buffer {i} has length {}, parameter has {}",
                grads[i].len(),
                lens[i]
            )));
        }
        if self.m.is_empty() {
            self.m = lens.iter().map(|&n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != lens.len() || (0..lens.len()).any(|i| self.m[i].len() != lens[i]) {
            return Err(Error::InvalidArgument(
                "parameter layout changed between optimizer steps".into(),
            ));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut idx = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        visit(&mut |name, param| {
            let g = &grads[idx];
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            idx += 1;
            let wd = if decays(name, param.shape()) { c.weight_decay } else { 0.0 };
            let params = param.data_mut().iter_mut().zip(g);
            for ((p, &gi), (mi, vi)) in params.zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let step = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *p -= lr * (step + wd * *p);
            }
        });
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> OptimConfig {
        OptimConfig {
            lr: 1e-2,
            min_lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 4,
            total_steps: 14,
        }
    }

    #[test]
    fn schedule_shape() {
        let c = cfg();
        assert!((lr_at(&c, 0) - 2.5e-3).abs() < 1e-15);
        assert!((lr_at(&c, 3) - 1e-2).abs() < 1e-15);
        assert!((lr_at(&c, 4) - 1e-2).abs() < 1e-15);
        assert!((lr_at(&c, 9) - (1e-4 + 0.5 * (1e-2 - 1e-4))).abs() < 1e-15);
        assert!((lr_at(&c, 14) - 1e-4).abs() < 1e-15);
        assert!((lr_at(&c, 100) - 1e-4).abs() < 1e-15);
        for s in 4..14 {
            assert!(lr_at(&c, s + 1) <= lr_at(&c, s));
        }
    }

    fn tiny_model() -> Model {
        let mut mc = ModelConfig::toy_student();
        mc.embed_dim = 4;
        mc.mlp_dim = 4;
        mc.num_blocks = 1;
        mc.image_size = 8;
        Model::student(&mc, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn grads_like(model: &Model, value: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        model.for_each(&mut |_, t| out.push(vec![value; t.numel()]));
        out
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut c = cfg();
        c.lr = 0.0;
        c.min_lr = 0.0;
        let mut model = tiny_model();
        let before = model.clone();
        let mut opt = AdamW::new(c);
        let grads = grads_like(&model, 0.3);
        for _ in 0..3 {
            opt.update(&mut model, &grads).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // Bias correction makes the first Adam step ±lr per coordinate.
        let mut c = cfg();
        c.weight_decay = 0.0;
        c.warmup_steps = 0;
        let mut model = tiny_model();
        let before = model.clone();
        let mut opt = AdamW::new(c);
        let grads = grads_like(&model, 2.0);
        opt.update(&mut model, &grads).unwrap();
        let mut deltas = Vec::new();
        model.for_each(&mut |_, t| deltas.extend_from_slice(t.data()));
        let mut orig = Vec::new();
        before.for_each(&mut |_, t| orig.extend_from_slice(t.data()));
        for (a, b) in deltas.iter().zip(&orig) {
            assert!((b - a - 1e-2).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_decay_only_touches_matrices() {
        let mut c = cfg();
        c.warmup_steps = 0;
        let mut model = tiny_model();
        let before = model.clone();
        let mut opt = AdamW::new(c);
        let grads = grads_like(&model, 0.0);
        opt.update(&mut model, &grads).unwrap();
        let mut changed = Vec::new();
        let mut after = Vec::new();
        model.for_each(&mut |n, t| after.push((n.to_string(), t.clone())));
        before.for_each(&mut |n, t| {
            let (_, a) = after.iter().find(|(m, _)| m == n).unwrap();
            if a != t {
                changed.push(n.to_string());
            }
        });
        assert!(changed.contains(&"embed_w".to_string()));
        assert!(changed.contains(&"projection".to_string()));
        for fixed in ["pos_embed", "cls_token", "mask_token", "blocks.0.mixer.alpha", "embed_b"] {
            assert!(!changed.contains(&fixed.to_string()), "{fixed}");
        }
    }

    #[test]
    fn rejects_wrong_gradient_count() {
        let mut model = tiny_model();
        let mut opt = AdamW::new(cfg());
        assert!(opt.update(&mut model, &[vec![0.0]]).is_err());
    }
}
