//! Adam with decoupled weight decay, global-norm clipping and a
//! warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::{Params, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only (not to biases, norms or embeddings).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Params<F>,
    pub v: Params<F>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Params<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, cfg: &AdamWConfig, lr: f64, params: &mut Params<F>, grads: &Params<F>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let c = |x: f64| F::from_f64(x).unwrap();
        let (b1, b2, eps) = (c(cfg.beta1), c(cfg.beta2), c(cfg.eps));
        let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
        let step = c(lr / bc1);
        let inv_bc2 = c(1.0 / bc2);
        let decay = c(1.0 - lr * cfg.weight_decay);

        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            let decayed = p.ndim() == 2 && !name.contains("emb");
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    if decayed {
                        *p *= decay;
                    }
                    *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let k = F::from_f64(max_norm / norm).unwrap();
        for (_, mut t) in grads.tensors_mut() {
            t.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Floor as a fraction of the peak.
    pub min_ratio: f64,
}

impl LrSchedule {
    /// Learning rate for the 0-based update index `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps.min(step)) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak_lr * (self.min_ratio + (1.0 - self.min_ratio) * cosine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::LayoutSpec;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::new(LayoutSpec::three_stem(8.0, [4, 4, 4, 4, 4, 4]), 2);
        cfg.d_model = 8;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.ff_mult = 1;
        cfg
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
            min_ratio: 0.0,
        };
        assert!((s.lr(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!((s.lr(60) - 5e-4).abs() < 1e-12);
        assert!(s.lr(110).abs() < 1e-15);
        assert!(s.lr(500).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let cfg = tiny();
        let mut p = Params::<f64>::zeros(&cfg);
        p.layers[0].wq.fill(2.0);
        p.layers[0].bq.fill(2.0);
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        let opt = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        st.step(&opt, 0.5, &mut p, &g);
        assert!(p.layers[0].wq.iter().all(|&x| (x - 2.0 * 0.95).abs() < 1e-12));
        assert!(p.layers[0].bq.iter().all(|&x| x == 2.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = tiny();
        let mut p = Params::<f64>::zeros(&cfg);
        let mut g = p.zeros_like();
        g.lnf_b.fill(3.0);
        let mut st = AdamState::new(&p);
        let opt = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        st.step(&opt, 0.01, &mut p, &g);
        // Bias-corrected first step is lr * sign(g).
        assert!(p.lnf_b.iter().all(|&x| (x + 0.01).abs() < 1e-9));
    }

    #[test]
    fn clipping() {
        let cfg = tiny();
        let mut g = Params::<f64>::zeros(&cfg);
        g.lnf_b.fill(1.0);
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - (8f64).sqrt()).abs() < 1e-12);
        let after: f64 = g.lnf_b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
