//! Per-pixel mean-squared reconstruction error.

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::scalar::Scalar;

/// Mean over the batch of each image's mean squared error. Every image has
/// the same size, so this is the mean over all elements.
pub fn rec_loss<T: Scalar>(recon: &FeatureMap<T>, input: &FeatureMap<T>) -> Result<T> {
    Ok(rec_loss_with_grad(recon, input, false)?.0)
}

/// [`rec_loss`] plus its gradient with respect to `recon`.
pub fn rec_loss_grad<T: Scalar>(recon: &FeatureMap<T>, input: &FeatureMap<T>) -> Result<(T, FeatureMap<T>)> {
    let (l, g) = rec_loss_with_grad(recon, input, true)?;
    Ok((l, g.expect("requested")))
}

fn rec_loss_with_grad<T: Scalar>(
    recon: &FeatureMap<T>,
    input: &FeatureMap<T>,
    want_grad: bool,
) -> Result<(T, Option<FeatureMap<T>>)> {
    if recon.dims() != input.dims() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?} (C, B, H, W)",
            recon.dims(),
            input.dims()
        )));
    }
    let n = recon.data.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty reconstruction".into()));
    }
    let sum: f64 = recon
        .data
        .iter()
        .zip(&input.data)
        .map(|(&r, &x)| {
            let d = (r - x).as_f64();
            d * d
        })
        .sum();
    let grad = want_grad.then(|| {
        let scale = T::of(2.0 / n as f64);
        let mut g = FeatureMap::zeros(recon.channels, recon.batch, recon.height, recon.width);
        for ((o, &r), &x) in g.data.iter_mut().zip(&recon.data).zip(&input.data) {
            *o = scale * (r - x);
        }
        g
    });
    Ok((T::of(sum / n as f64), grad))
}
