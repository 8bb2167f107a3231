use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::numcore::{GradStore, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(FuseError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment accumulators keyed by parameter name, plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: AdamWConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet, hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Linear warmup over `ceil(warmup_ratio * total)` steps, then cosine decay to 0.
pub fn cosine_lr(step: u64, total: u64, max_lr: f64, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warmup = (warmup_ratio * total as f64).ceil() as u64;
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    let span = total - warmup;
    if span == 0 {
        return max_lr;
    }
    let progress = (step - warmup) as f64 / span as f64;
    max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    if !grads.all_finite() {
        return Err(FuseError::Numeric("non-finite gradient".into()));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// One decoupled-weight-decay Adam step. Parameters without a gradient
/// entry are left untouched (frozen).
pub fn adamw_update(params: &mut ParamSet, grads: &GradStore, state: &mut OptimState, lr: f64) -> Result<()> {
    let h = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for g in grads.iter() {
        let name = g.name();
        let p = params.tensor_mut(name)?;
        let m = state.m.tensor_mut(name)?;
        if p.shape() != g.shape() || m.shape() != g.shape() {
            return Err(FuseError::Dimension(format!("optimizer shape mismatch for {name}")));
        }
        let v = state.v.tensor_mut(name)?;
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + h.eps);
            *p -= lr * (step + h.weight_decay * *p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamTensor;
    use proptest::prelude::*;

    fn set(vals: &[(&str, Vec<f64>)]) -> ParamSet {
        let mut s = ParamSet::new();
        for (n, v) in vals {
            s.push(ParamTensor::from_vec(*n, &[v.len()], v.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn schedule_endpoints() {
        let (total, lr, r) = (500, 3e-3, 0.008);
        assert_eq!(cosine_lr(0, total, lr, r), 0.0);
        assert_eq!(cosine_lr(4, total, lr, r), lr);
        assert!(cosine_lr(total, total, lr, r).abs() < 1e-12);
        assert!((cosine_lr(2, total, lr, r) - lr / 2.0).abs() < 1e-15);
        // continuity at the boundary
        let before = lr * (4.0 - 1e-9) / 4.0;
        assert!((before - cosine_lr(4, total, lr, r)).abs() < 1e-11);
        assert_eq!(cosine_lr(0, 10, 1.0, 0.0), 1.0);
    }

    proptest! {
        #[test]
        fn schedule_bounded(step in 0u64..1000, total in 1u64..1000, ratio in 0.0f64..0.99) {
            let lr = cosine_lr(step.min(total), total, 1.0, ratio);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&lr));
        }

        #[test]
        fn clipping_never_grows(vals in proptest::collection::vec(-10.0f64..10.0, 1..12), max in 0.1f64..5.0) {
            let mut g = set(&[("a", vals.clone())]);
            let before = g.global_norm();
            clip_grad_norm(&mut g, max).unwrap();
            prop_assert!(g.global_norm() <= before + 1e-12);
            prop_assert!(g.global_norm() <= max.max(before) + 1e-12);
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = set(&[("a", vec![0.3, 0.4])]);
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g.flatten(), vec![0.3, 0.4]);

        let mut g = set(&[("a", vec![0.0, 4.0])]);
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 4.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);

        let mut g = set(&[("a", vec![1.0, 2.0]), ("b", vec![-2.0, 3.0, 0.5])]);
        let flat = g.flatten();
        let oracle = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((norm - oracle).abs() < 1e-12);
        for (a, b) in g.flatten().iter().zip(&flat) {
            assert!((a - b / oracle).abs() < 1e-12);
        }

        let mut bad = set(&[("a", vec![0.0])]);
        bad.tensor_mut("a").unwrap().data_mut()[0] = f64::NAN;
        assert!(clip_grad_norm(&mut bad, 1.0).is_err());
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = set(&[("a", vec![1.5, -2.0])]);
        let g = p.zeros_like();
        let hyper = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::new(&p, hyper);
        adamw_update(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p.flatten(), vec![1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_sign_step() {
        let mut p = set(&[("a", vec![0.0, 0.0])]);
        let g = set(&[("a", vec![0.7, -3.0])]);
        let mut st = OptimState::new(&p, AdamWConfig::default());
        adamw_update(&mut p, &g, &mut st, 1e-2).unwrap();
        assert!((p.flatten()[0] + 1e-2).abs() < 1e-9);
        assert!((p.flatten()[1] - 1e-2).abs() < 1e-9);
    }

    #[test]
    fn three_steps_match_hand_trace() {
        let (b1, b2, wd, eps, lr) = (0.9f64, 0.95f64, 0.1, 1e-8, 0.05);
        let grads = [[0.5, -1.0], [0.2, 0.4], [-0.3, 0.1]];
        let mut p = set(&[("w", vec![1.0, -0.5])]);
        let mut st = OptimState::new(&p, AdamWConfig::default());

        let mut hp = [1.0f64, -0.5];
        let mut hm = [0.0f64; 2];
        let mut hv = [0.0f64; 2];
        for (t, g) in grads.iter().enumerate() {
            adamw_update(&mut p, &set(&[("w", g.to_vec())]), &mut st, lr).unwrap();
            let t = (t + 1) as f64;
            for i in 0..2 {
                hm[i] = b1 * hm[i] + (1.0 - b1) * g[i];
                hv[i] = b2 * hv[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = hm[i] / (1.0 - b1.powf(t));
                let vhat = hv[i] / (1.0 - b2.powf(t));
                hp[i] = hp[i] * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        for (a, b) in p.flatten().iter().zip(hp) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn missing_grad_means_frozen() {
        let mut p = set(&[("a", vec![1.0]), ("b", vec![2.0])]);
        let g = set(&[("a", vec![1.0])]);
        let mut st = OptimState::new(&p, AdamWConfig::default());
        adamw_update(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p.tensor("b").unwrap().data(), &[2.0]);
        assert_ne!(p.tensor("a").unwrap().data(), &[1.0]);
    }
}
