//! One forward/backward evaluation of the pre-training and fine-tuning objectives.

use crate::error::{Error, Result};
use crate::losses::{
    class_loss_batch, image_loss, pixel_cross_entropy, rec_loss_grad, total_loss, ContrastiveBatch, LossSpec,
    LossTerm, LossTerms, Objective,
};
use crate::model::{EncoderCache, Network, PyramidGrad};
use crate::nn::{FeatureMap, Matrix, ParamStore};
use crate::scalar::Scalar;

/// `2N` augmented views ordered pairwise, with zero-based labels per view.
#[derive(Debug, Clone)]
pub struct PretextBatch<T> {
    pub views: FeatureMap<T>,
    pub tasks: Vec<usize>,
    pub groups: Vec<usize>,
}

impl<T: Scalar> PretextBatch<T> {
    pub fn validate(&self) -> Result<()> {
        let b = self.views.batch;
        if b < 2 || !b.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("pre-training needs view pairs, got {b} views")));
        }
        if self.tasks.len() != b || self.groups.len() != b {
            return Err(Error::Shape(format!(
                "{b} views but {} task and {} group labels",
                self.tasks.len(),
                self.groups.len()
            )));
        }
        Ok(())
    }
}

pub struct PretextEval<T> {
    pub terms: LossTerms,
    pub total: f64,
    /// Gradient of the weighted total; absent for forward-only evaluation.
    pub grads: Option<ParamStore<T>>,
    pub encoder_cache: EncoderCache<T>,
}

fn scaled<T: Scalar>(mut m: Matrix<T>, s: f64) -> Matrix<T> {
    let s = T::of(s);
    m.data.iter_mut().for_each(|v| *v *= s);
    m
}

fn accumulate<T: Scalar>(acc: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match acc {
        Some(a) => a.add_assign(&g),
        None => *acc = Some(g),
    }
}

/// Training-mode forward of every enabled pretext term and, optionally, the
/// backward pass of `L_total`. Disabled terms are neither computed nor logged.
pub fn pretext_step<T: Scalar>(
    net: &Network,
    p: &ParamStore<T>,
    batch: &PretextBatch<T>,
    spec: &LossSpec,
    with_grad: bool,
) -> Result<PretextEval<T>> {
    batch.validate()?;
    let (pyr, encoder_cache) = net.encode(p, &batch.views, true)?;
    let mut terms = LossTerms::default();
    let mut grads = with_grad.then(|| ParamStore::zeros_like(p.layout()));
    let needs_fusion = [LossTerm::Image, LossTerm::Task, LossTerm::Group].iter().any(|&t| spec.enabled(t));
    let mut pyramid_grad = PyramidGrad::default();

    if needs_fusion {
        let (v_all, fusion_cache) = net.fuse(p, &pyr);
        let mut dv: Option<Matrix<T>> = None;
        if spec.use_img {
            let (z, cache) = net.project_image(p, &v_all);
            let (l, dz) = image_loss(&ContrastiveBatch::new(z)?, T::of(spec.temperature))?;
            terms.img = Some(l.as_f64());
            if let Some(g) = grads.as_mut() {
                let dz = scaled(dz, spec.lambda_img);
                accumulate(&mut dv, net.heads.image.backward(p, &cache, &dz, g));
            }
        }
        for (term, head, labels) in [
            (LossTerm::Task, &net.heads.task, &batch.tasks),
            (LossTerm::Group, &net.heads.group, &batch.groups),
        ] {
            if !spec.enabled(term) {
                continue;
            }
            let (logits, cache) = head.forward(p, &v_all);
            let (l, dl) = class_loss_batch(&logits, labels)?;
            terms.set(term, Some(l.as_f64()));
            if let Some(g) = grads.as_mut() {
                let dl = scaled(dl, spec.weight(term));
                accumulate(&mut dv, head.backward(p, &cache, &dl, g));
            }
        }
        if let (Some(g), Some(dv)) = (grads.as_mut(), dv) {
            pyramid_grad.merge(net.fusion.backward(p, &fusion_cache, &dv, g));
        }
    }

    if spec.use_rec {
        let (recon, cache) = net.decode(p, &pyr);
        let (l, mut dy) = rec_loss_grad(&recon, &batch.views)?;
        terms.rec = Some(l.as_f64());
        drop(recon);
        if let Some(g) = grads.as_mut() {
            let w = T::of(spec.lambda_rec);
            dy.data.iter_mut().for_each(|v| *v *= w);
            pyramid_grad.merge(net.decoder.backward(p, &cache, &dy, g));
        }
    }

    if let Some(g) = grads.as_mut() {
        net.encoder.backward(p, &encoder_cache, pyramid_grad, g);
    }
    let total = total_loss(&terms, spec);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("pre-training loss is {total} ({terms:?})")));
    }
    Ok(PretextEval { terms, total, grads, encoder_cache })
}

pub struct SegmentationEval<T> {
    pub loss: f64,
    pub grads: Option<ParamStore<T>>,
    pub encoder_cache: EncoderCache<T>,
}

/// Per-pixel cross-entropy of the decoder output against `masks`
/// (sample-major `B x S x S` class indices).
pub fn segmentation_step<T: Scalar>(
    net: &Network,
    p: &ParamStore<T>,
    images: &FeatureMap<T>,
    masks: &[u8],
    with_grad: bool,
) -> Result<SegmentationEval<T>> {
    let (pyr, encoder_cache) = net.encode(p, images, true)?;
    let (logits, cache) = net.decode(p, &pyr);
    let (l, dy) = pixel_cross_entropy(&logits, masks)?;
    let loss = l.as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("segmentation loss is {loss}")));
    }
    drop(logits);
    let grads = if with_grad {
        let mut g = ParamStore::zeros_like(p.layout());
        let pg = net.decoder.backward(p, &cache, &dy, &mut g);
        net.encoder.backward(p, &encoder_cache, pg, &mut g);
        Some(g)
    } else {
        None
    };
    Ok(SegmentationEval { loss, grads, encoder_cache })
}

/// The weighted pre-training objective on a fixed batch, for gradient checks.
pub struct PretextObjective<'a> {
    pub net: &'a Network,
    pub batch: &'a PretextBatch<f64>,
    pub spec: LossSpec,
}

impl Objective for PretextObjective<'_> {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        Ok(pretext_step(self.net, params, self.batch, &self.spec, false)?.total)
    }

    fn loss_and_grad(&self, params: &ParamStore<f64>) -> Result<(f64, ParamStore<f64>)> {
        let eval = pretext_step(self.net, params, self.batch, &self.spec, true)?;
        Ok((eval.total, eval.grads.expect("requested")))
    }
}
