//! Central finite-difference check of analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// A scalar function of the parameters with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamStore<f64>) -> Result<(f64, ParamStore<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub probes: usize,
    /// Step is `rel_step * max(1, |theta|)`.
    pub rel_step: f64,
    /// When the difference quotients at step `h` and `h / shrink` disagree
    /// beyond `stability_tol` (relative) plus the rounding noise of the
    /// loss, a rectifier kink lies within the step; the step then keeps
    /// shrinking, at most `max_refinements` times.
    pub max_refinements: usize,
    pub shrink: f64,
    pub stability_tol: f64,
    /// Rounding noise of one loss evaluation, in units of `eps * |loss|`.
    pub noise_ulps: f64,
    /// Denominator floor of the relative error, so that two gradients that
    /// are both numerically zero compare equal.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { probes: 200, rel_step: 1e-4, max_refinements: 8, shrink: 2.0, stability_tol: 1e-6, noise_ulps: 16.0, abs_floor: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step that produced `numeric`.
    pub step: f64,
    pub refinements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    /// Probes whose step had to be reduced below the nominal one.
    pub fn refined(&self) -> usize {
        self.probes.iter().filter(|p| p.refinements > 0).count()
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences with step `rel_step * max(1, |theta|)`. Rectifiers
/// make the loss piecewise smooth, so a step that straddles a kink is
/// detected (the quotient changes when the step shrinks) and refined.
///
/// Probes are spread over tensors first (uniformly among learnable tensors,
/// round-robin over a shuffled order) and then over elements, so small
/// tensors such as biases and normalization scales are always covered.
pub fn grad_check<O: Objective>(
    objective: &O,
    params: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (loss, grads) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    let mut tensors: Vec<ParamId> = params.ids().filter(|&id| params.spec(id).kind.learnable()).collect();
    if tensors.is_empty() {
        return Err(Error::InvalidArgument("no learnable parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tensors.shuffle(&mut rng);
    let mut chosen = std::collections::BTreeSet::new();
    let mut picks = Vec::with_capacity(cfg.probes);
    let total: usize = tensors.iter().map(|&id| params.get(id).len()).sum();
    let target = cfg.probes.min(total);
    let mut round = 0usize;
    while picks.len() < target {
        let id = tensors[round % tensors.len()];
        round += 1;
        let len = params.get(id).len();
        if chosen.iter().filter(|(t, _)| *t == id.0).count() >= len {
            continue;
        }
        loop {
            let k = rng.random_range(0..len);
            if chosen.insert((id.0, k)) {
                picks.push((id, k));
                break;
            }
        }
    }

    let mut work = params.clone();
    let mut probes = Vec::with_capacity(picks.len());
    let mut max_rel_error = 0.0f64;
    for (id, k) in picks {
        let theta = params.get(id)[k];
        let mut h = cfg.rel_step * theta.abs().max(1.0);
        let mut quotient = |h: f64| -> Result<f64> {
            work.get_mut(id)[k] = theta + h;
            let up = objective.loss(&work)?;
            work.get_mut(id)[k] = theta - h;
            let down = objective.loss(&work)?;
            work.get_mut(id)[k] = theta;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss at perturbed {}[{k}]", params.spec(id).name)));
            }
            Ok((up - down) / (2.0 * h))
        };
        let mut numeric = quotient(h)?;
        let mut refinements = 0;
        while refinements < cfg.max_refinements {
            let finer = quotient(h / cfg.shrink)?;
            let noise = cfg.noise_ulps * f64::EPSILON * loss.abs().max(1.0) / (h / cfg.shrink);
            if (numeric - finer).abs() <= cfg.stability_tol * numeric.abs().max(finer.abs()) + noise {
                break;
            }
            numeric = finer;
            h /= cfg.shrink;
            refinements += 1;
        }
        let analytic = grads.get(id)[k];
        let rel_error = relative_error(analytic, numeric, cfg.abs_floor);
        max_rel_error = max_rel_error.max(rel_error);
        probes.push(Probe {
            name: params.spec(id).name.clone(),
            index: k,
            analytic,
            numeric,
            rel_error,
            step: h,
            refinements,
        });
    }
    Ok(GradCheckReport { loss, probes, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamKind, ParamLayout};

    struct Quartic {
        id: ParamId,
    }

    impl Objective for Quartic {
        fn loss(&self, p: &ParamStore<f64>) -> Result<f64> {
            Ok(p.get(self.id).iter().map(|v| v.powi(4) + v).sum())
        }
        fn loss_and_grad(&self, p: &ParamStore<f64>) -> Result<(f64, ParamStore<f64>)> {
            let mut g = ParamStore::zeros_like(p.layout());
            for (o, v) in g.get_mut(self.id).iter_mut().zip(p.get(self.id)) {
                *o = 4.0 * v.powi(3) + 1.0;
            }
            Ok((self.loss(p)?, g))
        }
    }

    fn setup() -> (ParamStore<f64>, ParamId) {
        let mut layout = ParamLayout::default();
        let id = layout.declare("w", vec![50], ParamKind::Weight { fan_in: 4 });
        layout.declare("b", vec![3], ParamKind::Bias);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (ParamStore::initialize(layout, &mut rng), id)
    }

    #[test]
    fn exact_gradient_passes() {
        let (p, id) = setup();
        let cfg = GradCheckConfig { probes: 40, ..Default::default() };
        let r = grad_check(&Quartic { id }, &p, &cfg).unwrap();
        assert_eq!(r.probes.len(), 40);
        assert!(r.max_rel_error < 1e-7, "{}", r.max_rel_error);
        // the unused bias tensor is probed and has zero gradient on both sides
        assert!(r.probes.iter().any(|pr| pr.name == "b" && pr.analytic == 0.0 && pr.rel_error == 0.0));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Wrong(Quartic);
        impl Objective for Wrong {
            fn loss(&self, p: &ParamStore<f64>) -> Result<f64> {
                self.0.loss(p)
            }
            fn loss_and_grad(&self, p: &ParamStore<f64>) -> Result<(f64, ParamStore<f64>)> {
                let (l, mut g) = self.0.loss_and_grad(p)?;
                g.get_mut(self.0.id)[0] *= 1.01;
                Ok((l, g))
            }
        }
        let (p, id) = setup();
        let cfg = GradCheckConfig { probes: 53, ..Default::default() };
        let r = grad_check(&Wrong(Quartic { id }), &p, &cfg).unwrap();
        assert!(r.max_rel_error > 1e-3);
    }
}
