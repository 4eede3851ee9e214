//! AdamW with decoupled weight decay, per-group learning-rate multipliers and
//! a warmup-then-linear-decay schedule.

use crate::autodiff::Gradients;
use crate::config::{Schedule, TrainConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for [`ParamGroup::Scaling`].
    pub scaling_lr_multiplier: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
            scaling_lr_multiplier: c.scaling_lr_multiplier,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    cfg: AdamWConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Float> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at base learning rate `lr`. Parameters without a gradient
    /// still decay and still advance their moments with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let group = store.group(id);
            let rate = match group {
                ParamGroup::Scaling => lr * self.cfg.scaling_lr_multiplier,
                _ => lr,
            };
            let decay = if group == ParamGroup::Weight { self.cfg.weight_decay } else { 0.0 };
            let grad = grads.param(id);
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = grad.map_or(0.0, |g| g.data()[k].as_f64());
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
                let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
                m[k] = F::from_f64(mk);
                v[k] = F::from_f64(vk);
                let mut wk = w[k].as_f64();
                wk -= rate * decay * wk;
                wk -= rate * (mk / bc1) / ((vk / bc2).sqrt() + self.cfg.eps);
                w[k] = F::from_f64(wk);
            }
        }
    }
}

/// Learning rate at optimizer step `step` (0-based) of `total`.
///
/// Warmup rises linearly from 0 at step 0 to `peak` at step `warmup`, then the
/// schedule decays linearly to 0 at `total` or stays constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub kind: Schedule,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total: usize, kind: Schedule) -> Self {
        let warmup = (warmup_ratio * total as f64).round() as usize;
        Self { peak, warmup: warmup.min(total), total, kind }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        match self.kind {
            Schedule::Constant => self.peak,
            Schedule::LinearDecay => {
                let span = self.total.saturating_sub(self.warmup).max(1) as f64;
                let left = self.total.saturating_sub(step) as f64;
                self.peak * (left / span).clamp(0.0, 1.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn quadratic_converges() {
        let mut store = ParamStore::<f64>::new();
        let target = Tensor::from_f64(&[3], &[1.5, -2.0, 0.25]).unwrap();
        let id = store.insert("w", Tensor::zeros(&[3]), ParamGroup::Weight);
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0, scaling_lr_multiplier: 1.0 };
        let mut opt = AdamW::new(cfg, &store);
        let sched = LrSchedule::new(0.05, 0.0, 500, Schedule::LinearDecay);
        for step in 0..500 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let w = g.param(id);
                let c = g.constant(target.clone());
                let neg = g.scale(c, -1.0).unwrap();
                let diff = g.add(w, neg).unwrap();
                let sq = g.mul(diff, diff).unwrap();
                let loss = g.sum(sq).unwrap();
                g.backward(loss).unwrap()
            };
            opt.step(&mut store, &grads, sched.at(step));
        }
        assert!(store.get(id).max_abs_diff(&target).unwrap() < 1e-4, "{:?}", store.get(id));
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::ones(&[2, 2]), ParamGroup::Weight);
        let before = store.clone();
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.1, scaling_lr_multiplier: 1.25 };
        let mut opt = AdamW::new(cfg, &store);
        let grads = {
            let mut g = Graph::with_params(&store);
            let w = g.param(id);
            let loss = g.sum(w).unwrap();
            g.backward(loss).unwrap()
        };
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn scaling_group_moves_faster_and_skips_decay() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::ones(&[1]), ParamGroup::NoDecay);
        let b = store.insert("b", Tensor::ones(&[1]), ParamGroup::Scaling);
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 0.0, weight_decay: 0.5, scaling_lr_multiplier: 1.25 };
        let mut opt = AdamW::new(cfg, &store);
        let grads = {
            let mut g = Graph::with_params(&store);
            let (va, vb) = (g.param(a), g.param(b));
            let s = g.add(va, vb).unwrap();
            let loss = g.sum(s).unwrap();
            g.backward(loss).unwrap()
        };
        opt.step(&mut store, &grads, 0.1);
        // First Adam step moves by exactly lr·sign(g).
        assert!((store.get(a).item() - 0.9).abs() < 1e-12);
        assert!((store.get(b).item() - 0.875).abs() < 1e-12);
    }

    #[test]
    fn warmup_then_linear_decay() {
        let s = LrSchedule::new(1e-3, 0.1, 200, Schedule::LinearDecay);
        assert_eq!(s.warmup, 20);
        assert_eq!(s.at(0), 0.0);
        assert!(s.at(10) < s.at(19));
        assert_eq!(s.at(20), 1e-3);
        let peak = (0..200).map(|k| s.at(k)).fold(0.0, f64::max);
        assert_eq!(peak, 1e-3);
        assert!(s.at(199) > 0.0 && s.at(199) < 1e-4);
        assert_eq!(s.at(200), 0.0);
        let c = LrSchedule::new(1.0, 0.0, 10, Schedule::Constant);
        assert_eq!(c.at(0), 1.0);
        assert_eq!(c.at(9), 1.0);
    }
}
