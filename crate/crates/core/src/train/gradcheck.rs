//! Finite-difference check of the full pre-training objective on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{grad_check, GradCheckConfig, GradCheckReport, LossSpec, LossTerm};
use crate::model::{ModelConfig, ModelState};
use crate::nn::{FeatureMap, ParamKind};
use crate::train::objective::{PretextBatch, PretextObjective};

/// Tolerance on the weighted total.
pub const TOTAL_TOLERANCE: f64 = 1e-4;
/// Tolerance on each loss term checked on its own.
pub const TERM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PretextCheck {
    pub model: ModelConfig,
    /// Number of views (pairs of augmented views, so even).
    pub batch: usize,
    pub probes: usize,
    pub seed: u64,
    /// Half-width of the uniform draw for biases and normalization shifts.
    /// Zero biases put some rectifier inputs exactly on the kink.
    pub jitter: f64,
    pub loss: LossSpec,
}

impl Default for PretextCheck {
    fn default() -> Self {
        Self {
            model: ModelConfig::micro(4, 2),
            batch: 4,
            probes: 200,
            seed: 0,
            jitter: 0.1,
            loss: LossSpec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretextCheckReport {
    pub total: GradCheckReport,
    /// One report per enabled term, each with only that term switched on.
    pub terms: Vec<(LossTerm, GradCheckReport)>,
}

impl PretextCheckReport {
    pub fn passed(&self) -> bool {
        self.total.max_rel_error < TOTAL_TOLERANCE
            && self.terms.iter().all(|(_, r)| r.max_rel_error < TERM_TOLERANCE)
    }

    /// `(label, max relative error, tolerance)` rows, total first.
    pub fn summary(&self) -> Vec<(String, f64, f64)> {
        let mut rows = vec![("L_total".to_string(), self.total.max_rel_error, TOTAL_TOLERANCE)];
        for (term, r) in &self.terms {
            rows.push((term.name().to_string(), r.max_rel_error, TERM_TOLERANCE));
        }
        rows
    }
}

impl PretextCheck {
    /// The seeded model with jittered biases and shifts, in double precision.
    pub fn state(&self) -> Result<ModelState<f64>> {
        let mut state = ModelState::<f64>::init(&self.model, self.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6a17);
        for id in state.params.ids().collect::<Vec<_>>() {
            if matches!(state.params.spec(id).kind, ParamKind::Bias | ParamKind::NormShift) {
                for v in state.params.get_mut(id) {
                    *v = rng.random_range(-self.jitter..=self.jitter);
                }
            }
        }
        Ok(state)
    }

    /// Random views with pairwise labels spread over the tasks and groups.
    pub fn batch(&self) -> Result<PretextBatch<f64>> {
        if self.batch < 2 || !self.batch.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("gradient check needs an even batch, got {}", self.batch)));
        }
        let s = self.model.input_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let data = (0..self.model.in_channels * self.batch * s * s).map(|_| rng.random::<f64>()).collect();
        let views = FeatureMap::from_vec(self.model.in_channels, self.batch, s, s, data)?;
        let pairs = self.batch / 2;
        let (t, g) = (self.model.num_tasks, self.model.num_groups);
        let mut tasks = Vec::with_capacity(self.batch);
        let mut groups = Vec::with_capacity(self.batch);
        for p in 0..pairs {
            let task = (p * t.max(1) / pairs.max(1)).min(t - 1);
            let group = (task * g / t).min(g - 1);
            tasks.extend([task, task]);
            groups.extend([group, group]);
        }
        Ok(PretextBatch { views, tasks, groups })
    }

    pub fn run(&self) -> Result<PretextCheckReport> {
        self.loss.validate()?;
        let state = self.state()?;
        let batch = self.batch()?;
        let net = state.network()?;
        let gc = GradCheckConfig { probes: self.probes, seed: self.seed, ..Default::default() };
        let check = |spec: LossSpec| grad_check(&PretextObjective { net: &net, batch: &batch, spec }, &state.params, &gc);
        let total = check(self.loss.clone())?;
        let mut terms = Vec::new();
        for term in LossTerm::ALL {
            if self.loss.enabled(term) {
                let mut only = self.loss.clone();
                for t in LossTerm::ALL {
                    only.set_enabled(t, t == term);
                }
                terms.push((term, check(only)?));
            }
        }
        Ok(PretextCheckReport { total, terms })
    }
}
