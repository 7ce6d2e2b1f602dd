//! Decoupled-weight-decay adaptive-moment optimizer, learning-rate
//! schedules, and global gradient-norm clipping.

/// Learning-rate schedule over a fixed step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Optimizer hyperparameters. Betas and epsilon are the conventional
/// (0.9, 0.999, 1e-8); decay is decoupled from the moment update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub schedule: LrSchedule,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl AdamWConfig {
    pub fn new(lr: f32, weight_decay: f32, schedule: LrSchedule, total_steps: usize) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            total_steps,
            warmup_steps: 0,
        }
    }

    /// Learning rate applied at 0-indexed step `t`.
    pub fn lr_at(&self, t: usize) -> f32 {
        if t < self.warmup_steps {
            return self.lr * (t + 1) as f32 / self.warmup_steps as f32;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = (self.total_steps.max(1) - self.warmup_steps).max(1);
                let progress = (t - self.warmup_steps) as f64 / span as f64;
                (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
            }
        }
    }
}

/// One optimizer instance driving several parameter groups in lockstep.
pub struct AdamW {
    cfg: AdamWConfig,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, group_sizes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        self.cfg.lr_at(self.step)
    }

    /// Apply one update; `params` and `grads` are parallel group lists.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>]) {
        assert_eq!(params.len(), self.m.len(), "group count");
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "group {gi} size");
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * p[i]);
            }
        }
        self.step += 1;
    }
}

/// L2 norm over all groups, f64 accumulation.
pub fn global_grad_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm does not exceed `max_norm`.
/// Returns (pre-clip, post-clip) norms.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> (f64, f64) {
    let pre = global_grad_norm(grads);
    if pre > max_norm as f64 && pre > 0.0 {
        let scale = (max_norm as f64 / pre) as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    (pre, global_grad_norm(grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let cfg = AdamWConfig::new(1e-3, 0.0, LrSchedule::Cosine, 100);
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!(cfg.lr_at(100).abs() < 1e-9);
        assert!(cfg.lr_at(50) < cfg.lr_at(10));
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut cfg = AdamWConfig::new(1e-2, 0.0, LrSchedule::Cosine, 100);
        cfg.warmup_steps = 10;
        assert!(cfg.lr_at(0) <= 1e-3 + 1e-9);
        assert!((cfg.lr_at(9) - 1e-2).abs() < 1e-9);
    }

    #[test]
    fn quadratic_converges() {
        // Minimize (p - 3)^2 elementwise.
        let mut p = vec![0.0f32; 4];
        let mut opt = AdamW::new(
            AdamWConfig::new(0.1, 0.0, LrSchedule::Constant, 500),
            &[4],
        );
        for _ in 0..500 {
            let g: Vec<f32> = p.iter().map(|&x| 2.0 * (x - 3.0)).collect();
            opt.step(&mut [&mut p], &[g]);
        }
        for x in p {
            assert!((x - 3.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn decay_is_decoupled() {
        // With zero gradient, decay shrinks parameters geometrically.
        let mut p = vec![1.0f32];
        let mut opt = AdamW::new(
            AdamWConfig::new(0.5, 0.1, LrSchedule::Constant, 10),
            &[1],
        );
        opt.step(&mut [&mut p], &[vec![0.0]]);
        assert!((p[0] - (1.0 - 0.5 * 0.1)).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = vec![vec![3.0f32, 4.0]]; // norm 5
        let (pre, post) = clip_global_norm(&mut grads, 0.3);
        assert!((pre - 5.0).abs() < 1e-9);
        assert!(post <= 0.3 + 1e-6);
        // Direction preserved.
        assert!((grads[0][1] / grads[0][0] - 4.0 / 3.0).abs() < 1e-5);
        // Below the cap nothing changes.
        let mut small = vec![vec![0.1f32]];
        let (pre, post) = clip_global_norm(&mut small, 0.3);
        assert_eq!(pre, post);
        assert_eq!(small[0][0], 0.1);
    }
}
