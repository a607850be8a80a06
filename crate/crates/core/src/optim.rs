//! AdamW with decoupled weight decay and a linear-warmup / cosine-decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::lora::{AdapterSet, Matrix};
use crate::model::FactorGrad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl ScheduleConfig {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_ratio: f64) -> Result<Self> {
        let cfg = Self { peak_lr, total_steps, warmup_ratio };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be > 0, got {}", self.peak_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).floor() as usize
    }
}

/// Learning rate at `step` (0-based).
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(Error::ScheduleExhausted { step, total: cfg.total_steps });
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    let decay_len = (cfg.total_steps - warmup) as f64;
    let progress = (step - warmup) as f64 / decay_len;
    let lr = cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(lr.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!("betas must be in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Moments for a list of parameter tensors sharing one step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    step_count: u64,
}

impl AdamWState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            first_moment: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
            second_moment: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
            step_count: 0,
        }
    }

    /// State laid out as `[A_0, B_0, A_1, B_1, ...]` for an adapter set.
    pub fn for_adapters(set: &AdapterSet) -> Self {
        let shapes: Vec<_> = set
            .sites
            .iter()
            .flat_map(|ad| [ad.a().dim(), ad.b().dim()])
            .collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Matrix] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Matrix] {
        &self.second_moment
    }

    /// One AdamW update of every tensor in `params`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64, hp: &AdamWParams) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(shape_err(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != self.first_moment[i].dim() || g.dim() != p.dim() {
                return Err(shape_err(format!(
                    "tensor {i}: param {:?}, grad {:?}, state {:?}",
                    p.dim(),
                    g.dim(),
                    self.first_moment[i].dim()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(*g)
                .and(m)
                .and(v)
                .for_each(|theta, &grad, m, v| {
                    *m = hp.beta1 * *m + (1.0 - hp.beta1) * grad;
                    *v = hp.beta2 * *v + (1.0 - hp.beta2) * grad * grad;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *theta -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * *theta);
                });
        }
        Ok(())
    }

    /// Apply per-site factor gradients to an adapter set.
    pub fn step_adapters(&mut self, set: &mut AdapterSet, grads: &[FactorGrad], lr: f64, hp: &AdamWParams) -> Result<()> {
        if grads.len() != set.sites.len() {
            return Err(shape_err(format!("{} gradients for {} sites", grads.len(), set.sites.len())));
        }
        let mut params: Vec<&mut Matrix> = Vec::with_capacity(2 * grads.len());
        for ad in set.sites.iter_mut() {
            let (a, b) = ad.factors_mut();
            params.push(a);
            params.push(b);
        }
        let grad_refs: Vec<&Matrix> = grads.iter().flat_map(|g| [&g.a, &g.b]).collect();
        self.step(&mut params, &grad_refs, lr, hp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        let cfg = ScheduleConfig::new(2e-5, 100, 0.1).unwrap();
        assert_eq!(cfg.warmup_steps(), 10);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(10, &cfg).unwrap(), 2e-5);
        let big = ScheduleConfig::new(2e-5, 10_000, 0.1).unwrap();
        let last = lr_at(9_999, &big).unwrap();
        let decay = (10_000 - big.warmup_steps()) as f64;
        let bound = 2e-5 * (1.0 - (std::f64::consts::PI * (1.0 - 1.0 / decay)).cos()) / 2.0;
        assert!(last >= 0.0 && last <= bound + 1e-18);
        assert!(matches!(lr_at(100, &cfg), Err(Error::ScheduleExhausted { step: 100, total: 100 })));
    }

    #[test]
    fn schedule_is_continuous_at_warmup_junction() {
        let cfg = ScheduleConfig::new(1.0, 1000, 0.1).unwrap();
        let before = lr_at(99, &cfg).unwrap();
        let at = lr_at(100, &cfg).unwrap();
        let after = lr_at(101, &cfg).unwrap();
        assert!((at - 1.0).abs() < 1e-15);
        assert!((at - before).abs() <= 0.011 && (at - after).abs() < 1e-4);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let cfg = ScheduleConfig::new(0.5, 4, 0.0).unwrap();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = array![[1.0, -2.0]];
        let g = Matrix::zeros((1, 2));
        let mut st = AdamWState::new(&[(1, 2)]);
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        st.step(&mut [&mut p], &[&g], 0.1, &hp).unwrap();
        assert_eq!(p, array![[1.0, -2.0]]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_hand_example() {
        let mut p = array![[1.0]];
        let g = array![[1.0]];
        let mut st = AdamWState::new(&[(1, 1)]);
        let hp = AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        st.step(&mut [&mut p], &[&g], 0.1, &hp).unwrap();
        assert!((p[[0, 0]] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only_step() {
        let mut p = array![[1.0]];
        let g = array![[0.0]];
        let mut st = AdamWState::new(&[(1, 1)]);
        let hp = AdamWParams { weight_decay: 0.01, ..Default::default() };
        st.step(&mut [&mut p], &[&g], 0.1, &hp).unwrap();
        assert!((p[[0, 0]] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn update_sign_follows_negative_first_moment() {
        let mut p = Matrix::zeros((1, 4));
        let g = array![[0.5, -2.0, 3.0, -0.1]];
        let mut st = AdamWState::new(&[(1, 4)]);
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        st.step(&mut [&mut p], &[&g], 0.01, &hp).unwrap();
        for (dp, m) in p.iter().zip(st.first_moment()[0].iter()) {
            assert_eq!(dp.signum(), -m.signum());
        }
    }

    #[test]
    fn steps_are_bit_deterministic() {
        let run = || {
            let mut p = array![[0.3, 0.7], [-1.1, 2.0]];
            let mut st = AdamWState::new(&[(2, 2)]);
            for k in 0..5 {
                let g = p.mapv(|v| v * 0.5 + k as f64);
                st.step(&mut [&mut p], &[&g], 0.01, &AdamWParams::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Matrix::zeros((2, 2));
        let g = Matrix::zeros((2, 3));
        let mut st = AdamWState::new(&[(2, 2)]);
        assert!(st.step(&mut [&mut p], &[&g], 0.1, &AdamWParams::default()).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
