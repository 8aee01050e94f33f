//! Adam and the learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::AuxTensor;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamStore::zeros_like(params.layout()),
            v: ParamStore::zeros_like(params.layout()),
        }
    }

    /// One bias-corrected update of every learnable tensor for which
    /// `trainable(name)` holds. Fails without touching anything if any
    /// gradient is non-finite.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &ParamStore<T>,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        if params.layout() != grads.layout() || params.layout() != self.m.layout() {
            return Err(Error::Shape("optimizer, parameter and gradient layouts differ".into()));
        }
        let ids: Vec<_> = params
            .ids()
            .filter(|&id| params.spec(id).kind.learnable() && trainable(&params.spec(id).name))
            .collect();
        for &id in &ids {
            if let Some(k) = grads.get(id).iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{k}] is {}",
                    params.spec(id).name,
                    grads.get(id)[k]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr / (1.0 - self.beta1.powi(t)));
        let v_corr = T::of(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = T::of(self.eps);
        for id in ids {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let w = params.get_mut(id);
            for i in 0..w.len() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                w[i] -= step_size * m[i] / ((v[i] * v_corr).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as checkpoint tensors (`adam.m/<name>`, `adam.v/<name>`, `adam.step`).
    pub fn to_aux(&self) -> Vec<AuxTensor<T>> {
        let mut out = Vec::with_capacity(2 * self.m.layout().len() + 1);
        for (prefix, store) in [("adam.m/", &self.m), ("adam.v/", &self.v)] {
            for id in store.ids() {
                let spec = store.spec(id);
                out.push(AuxTensor {
                    name: format!("{prefix}{}", spec.name),
                    shape: spec.shape.clone(),
                    data: store.get(id).to_vec(),
                });
            }
        }
        out.push(AuxTensor { name: "adam.step".into(), shape: vec![1], data: vec![T::of(self.step as f64)] });
        out
    }

    pub fn from_aux(params: &ParamStore<T>, aux: &[AuxTensor<T>]) -> Result<Self> {
        let mut adam = Self::new(params);
        let find = |name: &str| aux.iter().find(|a| a.name == name);
        for (prefix, store) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
            for id in store.ids().collect::<Vec<_>>() {
                let name = format!("{prefix}{}", store.spec(id).name);
                let t = find(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                if t.data.len() != store.get(id).len() {
                    return Err(Error::Shape(format!("{name} has {} values", t.data.len())));
                }
                store.get_mut(id).copy_from_slice(&t.data);
            }
        }
        let step = find("adam.step").ok_or_else(|| Error::Format("checkpoint lacks adam.step".into()))?;
        adam.step = step.data.first().map(|v| v.as_f64() as u64).unwrap_or(0);
        Ok(adam)
    }
}

/// `base * (1 - step / total)^0.9`.
pub fn poly_lr(step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::InvalidArgument(format!("poly schedule at {step} of {total}")));
    }
    Ok(base_lr * (1.0 - step as f64 / total as f64).powf(0.9))
}

/// How the pre-training rate evolves over (1-based) epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSchedule {
    /// Rate at the reference batch size.
    pub base_lr: f64,
    pub reference_batch: usize,
    /// Linear ramp from zero over `warmup_epochs`.
    pub warmup: bool,
    pub warmup_epochs: usize,
    /// Linear decay to zero over the run instead of a constant rate.
    pub linear_decay: bool,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self { base_lr: 3e-4, reference_batch: 30, warmup: false, warmup_epochs: 10, linear_decay: false }
    }
}

/// `base_lr * batch / reference_batch`, with the optional warmup and decay.
pub fn pretrain_lr(epoch: usize, total_epochs: usize, batch_size: usize, s: &PretrainSchedule) -> f64 {
    let target = s.base_lr * batch_size as f64 / s.reference_batch as f64;
    let mut lr = target;
    if s.linear_decay && total_epochs > 0 {
        lr *= 1.0 - epoch.saturating_sub(1) as f64 / total_epochs as f64;
    }
    if s.warmup && s.warmup_epochs > 0 && epoch < s.warmup_epochs {
        lr *= epoch as f64 / s.warmup_epochs as f64;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamKind, ParamLayout};

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut layout = ParamLayout::default();
        layout.declare("w", vec![1], ParamKind::Weight { fan_in: 1 });
        layout.declare("rm", vec![1], ParamKind::RunningMean);
        let mut s = ParamStore::zeros_like(&layout);
        s.values[0][0] = v;
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.5, -0.02] {
            let mut p = scalar_store(1.0);
            let mut grads = ParamStore::zeros_like(p.layout());
            grads.values[0][0] = g;
            grads.values[1][0] = 5.0;
            let mut adam = Adam::new(&p);
            adam.update(&mut p, &grads, 1e-3, |_| true).unwrap();
            let delta = p.values[0][0] - 1.0;
            assert!((delta + 1e-3 * f64::signum(g)).abs() < 1e-8, "{delta}");
            // running statistics are not optimized
            assert_eq!(p.values[1][0], 0.0);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_store(0.7);
        let grads = ParamStore::zeros_like(p.layout());
        let mut adam = Adam::new(&p);
        for _ in 0..3 {
            adam.update(&mut p, &grads, 1e-2, |_| true).unwrap();
        }
        assert_eq!(p.values[0][0], 0.7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_store(0.7);
        let mut grads = ParamStore::zeros_like(p.layout());
        grads.values[0][0] = f64::NAN;
        let mut adam = Adam::new(&p);
        assert!(adam.update(&mut p, &grads, 1e-2, |_| true).is_err());
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn moments_round_trip_through_aux() {
        let mut p = scalar_store(0.7);
        let mut grads = ParamStore::zeros_like(p.layout());
        grads.values[0][0] = 0.3;
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &grads, 1e-2, |_| true).unwrap();
        let back = Adam::from_aux(&p, &adam.to_aux()).unwrap();
        assert_eq!(back, adam);
    }

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(0, 100, 5e-4).unwrap(), 5e-4);
        assert_eq!(poly_lr(100, 100, 5e-4).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 5e-4).unwrap() - 2.680e-4).abs() < 1e-7);
        assert!(poly_lr(101, 100, 5e-4).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = poly_lr(s, 100, 5e-4).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn pretrain_rate_scales_with_batch() {
        let s = PretrainSchedule::default();
        assert!((pretrain_lr(1, 1000, 30, &s) - 3e-4).abs() < 1e-18);
        assert!((pretrain_lr(7, 1000, 15, &s) - 1.5e-4).abs() < 1e-18);
        assert_eq!(pretrain_lr(3, 1000, 30, &s), pretrain_lr(900, 1000, 30, &s));
        let w = PretrainSchedule { warmup: true, ..s.clone() };
        assert!((pretrain_lr(5, 1000, 30, &w) - 1.5e-4).abs() < 1e-18);
        assert_eq!(pretrain_lr(10, 1000, 30, &w), 3e-4);
        assert_eq!(pretrain_lr(50, 1000, 30, &w), pretrain_lr(60, 1000, 30, &w));
        let d = PretrainSchedule { linear_decay: true, ..s };
        assert!(pretrain_lr(2, 10, 30, &d) < pretrain_lr(1, 10, 30, &d));
    }
}
