//! Training objectives and their gradients.

pub mod classification;
pub mod contrastive;
pub mod gradcheck;
pub mod reconstruction;

use serde::{Deserialize, Serialize};

pub use classification::{class_loss, class_loss_batch, pixel_cross_entropy, softmax};
pub use contrastive::{cosine_sim, image_loss, ntxent_single, ContrastiveBatch};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Objective, Probe};
pub use reconstruction::{rec_loss, rec_loss_grad};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Image,
    Task,
    Group,
    Reconstruction,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Image, LossTerm::Task, LossTerm::Group, LossTerm::Reconstruction];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Image => "L_img",
            LossTerm::Task => "L_task",
            LossTerm::Group => "L_group",
            LossTerm::Reconstruction => "L_rec",
        }
    }
}

/// Weights, temperature and per-term switches of the pre-training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub lambda_img: f64,
    pub lambda_task: f64,
    pub lambda_group: f64,
    pub lambda_rec: f64,
    pub temperature: f64,
    pub use_img: bool,
    pub use_task: bool,
    pub use_group: bool,
    pub use_rec: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            lambda_img: 1.0 / 3.0,
            lambda_task: 1.0 / 3.0,
            lambda_group: 1.0 / 3.0,
            lambda_rec: 50.0,
            temperature: 0.5,
            use_img: true,
            use_task: true,
            use_group: true,
            use_rec: true,
        }
    }
}

impl LossSpec {
    /// Only `term` enabled, all weights unchanged.
    pub fn only(term: LossTerm) -> Self {
        let mut s = Self::default();
        for t in LossTerm::ALL {
            s.set_enabled(t, t == term);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for t in LossTerm::ALL {
            let w = self.weight(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("weight of {} must be finite and >= 0, got {w}", t.name())));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !LossTerm::ALL.iter().any(|&t| self.enabled(t)) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        Ok(())
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Image => self.lambda_img,
            LossTerm::Task => self.lambda_task,
            LossTerm::Group => self.lambda_group,
            LossTerm::Reconstruction => self.lambda_rec,
        }
    }

    pub fn enabled(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::Image => self.use_img,
            LossTerm::Task => self.use_task,
            LossTerm::Group => self.use_group,
            LossTerm::Reconstruction => self.use_rec,
        }
    }

    pub fn set_enabled(&mut self, term: LossTerm, on: bool) {
        match term {
            LossTerm::Image => self.use_img = on,
            LossTerm::Task => self.use_task = on,
            LossTerm::Group => self.use_group = on,
            LossTerm::Reconstruction => self.use_rec = on,
        }
    }

    /// Weight actually applied: zero for a disabled term.
    pub fn effective_weight(&self, term: LossTerm) -> f64 {
        if self.enabled(term) {
            self.weight(term)
        } else {
            0.0
        }
    }
}

/// Values of the individual terms; `None` for terms that were not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub img: Option<f64>,
    pub task: Option<f64>,
    pub group: Option<f64>,
    pub rec: Option<f64>,
}

impl LossTerms {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        match term {
            LossTerm::Image => self.img,
            LossTerm::Task => self.task,
            LossTerm::Group => self.group,
            LossTerm::Reconstruction => self.rec,
        }
    }

    pub fn set(&mut self, term: LossTerm, value: Option<f64>) {
        match term {
            LossTerm::Image => self.img = value,
            LossTerm::Task => self.task = value,
            LossTerm::Group => self.group = value,
            LossTerm::Reconstruction => self.rec = value,
        }
    }
}

/// `lambda_1 L_img + lambda_2 L_task + lambda_3 L_group + lambda_4 L_rec`
/// over the enabled terms that carry a value.
pub fn total_loss(terms: &LossTerms, spec: &LossSpec) -> f64 {
    LossTerm::ALL
        .iter()
        .filter(|&&t| spec.enabled(t))
        .filter_map(|&t| terms.get(t).map(|v| spec.weight(t) * v))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_with_defaults() {
        let terms = LossTerms { img: Some(3.0), task: Some(3.0), group: Some(3.0), rec: Some(0.1) };
        let spec = LossSpec::default();
        assert!((total_loss(&terms, &spec) - 8.0).abs() < 1e-12);
        assert_eq!(total_loss(&LossTerms::default(), &spec), 0.0);
        let zeros = LossTerms { img: Some(0.0), task: Some(0.0), group: Some(0.0), rec: Some(0.0) };
        assert_eq!(total_loss(&zeros, &spec), 0.0);
    }

    #[test]
    fn disabling_removes_exactly_its_contribution() {
        let terms = LossTerms { img: Some(1.7), task: Some(0.4), group: Some(2.3), rec: Some(0.02) };
        let full = total_loss(&terms, &LossSpec::default());
        let spec = LossSpec { use_group: false, ..LossSpec::default() };
        let partial = total_loss(&terms, &spec);
        assert!((full - partial - 2.3 / 3.0).abs() < 1e-12);
        assert_eq!(spec.effective_weight(LossTerm::Group), 0.0);
    }

    #[test]
    fn validation() {
        assert!(LossSpec::default().validate().is_ok());
        assert!(LossSpec { temperature: 0.0, ..LossSpec::default() }.validate().is_err());
        assert!(LossSpec { lambda_rec: -1.0, ..LossSpec::default() }.validate().is_err());
        let mut s = LossSpec::only(LossTerm::Image);
        assert!(s.validate().is_ok());
        s.use_img = false;
        assert!(s.validate().is_err());
    }
}
