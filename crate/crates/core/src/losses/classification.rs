//! Softmax cross-entropy for the task- and group-level heads.

use crate::error::{Error, Result};
use crate::losses::contrastive::log_sum_exp;
use crate::nn::{FeatureMap, Matrix};
use crate::scalar::Scalar;

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| (z - lse).exp()).collect()
}

/// `-log softmax(logits)[y]` with a zero-based class index.
pub fn class_loss<T: Scalar>(logits: &[T], y: usize) -> Result<T> {
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!("class {y} outside {} logits", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[y])
}

/// Batch mean of [`class_loss`] and its gradient with respect to the logits.
pub fn class_loss_batch<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    if labels.len() != logits.rows {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.rows)));
    }
    if logits.rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_b = T::one() / T::of(logits.rows as f64);
    let mut total = T::zero();
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        total += class_loss(row, y)?;
        for (g, p) in grad.row_mut(r).iter_mut().zip(softmax(row)) {
            *g = p * inv_b;
        }
        grad.row_mut(r)[y] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// Mean per-pixel cross-entropy of `C x B x H x W` logits against integer
/// masks stored sample-major (`B x H x W`), plus the gradient.
pub fn pixel_cross_entropy<T: Scalar>(logits: &FeatureMap<T>, masks: &[u8]) -> Result<(T, FeatureMap<T>)> {
    let plane = logits.plane();
    let pixels = logits.batch * plane;
    if masks.len() != pixels {
        return Err(Error::Shape(format!("{} mask pixels for {pixels} predictions", masks.len())));
    }
    if pixels == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let c = logits.channels;
    let per = logits.per_channel();
    let inv = T::one() / T::of(pixels as f64);
    let mut grad = FeatureMap::zeros(c, logits.batch, logits.height, logits.width);
    let mut total = 0.0f64;
    let mut z = vec![T::zero(); c];
    for (i, &y) in masks.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(Error::InvalidArgument(format!("mask class {y} but only {c} output channels")));
        }
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = logits.data[k * per + i];
        }
        let lse = log_sum_exp(&z);
        total += (lse - z[y]).as_f64();
        for (k, &zk) in z.iter().enumerate() {
            grad.data[k * per + i] = (zk - lse).exp() * inv;
        }
        grad.data[y * per + i] -= inv;
    }
    Ok((T::of(total / pixels as f64), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_log_c() {
        for c in [2usize, 4, 8] {
            let l: f64 = class_loss(&vec![0.37; c], 1).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let l: f64 = class_loss(&[-50.0, 60.0, 0.0], 1).unwrap();
        assert!((0.0..1e-30).contains(&l));
        assert!(class_loss(&[0.0f64, 1.0], 2).is_err());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let logits = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.9).sin() * 2.0).collect());
        let labels = [3, 0, 2];
        let (_, g) = class_loss_batch(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let mut p = logits.clone();
            p.data[i] += h;
            let mut m = logits.clone();
            m.data[i] -= h;
            let fd = (class_loss_batch(&p, &labels).unwrap().0 - class_loss_batch(&m, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pixel_loss_matches_per_pixel_mean() {
        let data: Vec<f64> = (0..3 * 2 * 4).map(|i| ((i * 5) as f64 * 0.37).cos()).collect();
        let logits = FeatureMap::from_vec(3, 2, 2, 2, data).unwrap();
        let masks = [0u8, 1, 2, 2, 1, 0, 0, 1];
        let (l, g) = pixel_cross_entropy(&logits, &masks).unwrap();
        let per = 8;
        let mut expect = 0.0;
        for (i, &y) in masks.iter().enumerate() {
            let z: Vec<f64> = (0..3).map(|k| logits.data[k * per + i]).collect();
            expect += class_loss(&z, y as usize).unwrap();
        }
        assert!((l - expect / 8.0).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..logits.data.len() {
            let mut p = logits.clone();
            p.data[i] += h;
            let mut m = logits.clone();
            m.data[i] -= h;
            let fd = (pixel_cross_entropy(&p, &masks).unwrap().0 - pixel_cross_entropy(&m, &masks).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
        assert!(pixel_cross_entropy(&logits, &[3u8; 8]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_loss_nonnegative(logits in prop::collection::vec(-30.0f64..30.0, 1..12), y in 0usize..12) {
            let s: f64 = softmax(&logits).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            if y < logits.len() {
                prop_assert!(class_loss(&logits, y).unwrap() >= 0.0);
            }
        }
    }
}
