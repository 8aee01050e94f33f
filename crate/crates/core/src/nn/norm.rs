use crate::nn::params::{ParamId, ParamKind, ParamLayout, ParamStore};
use crate::nn::tensor::FeatureMap;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Lane-parallel reduction: eight running sums in `T` per block of 1024
/// elements, blocks combined in `f64`.
fn reduce<T: Scalar>(n: usize, term: impl Fn(usize) -> T) -> f64 {
    const LANES: usize = 8;
    const BLOCK: usize = 1024;
    let mut total = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let mut acc = [T::zero(); LANES];
        let mut i = start;
        while i + LANES <= end {
            for (l, a) in acc.iter_mut().enumerate() {
                *a += term(i + l);
            }
            i += LANES;
        }
        let mut block = acc.iter().map(|v| v.as_f64()).sum::<f64>();
        for j in i..end {
            block += term(j).as_f64();
        }
        total += block;
        start = end;
    }
    total
}

/// Per-channel batch normalization over `(B, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

/// Saved tensors for the backward pass plus the batch statistics that
/// still have to be folded into the running averages.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
    training: bool,
}

impl BatchNorm2d {
    pub fn declare(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        Self {
            scale: layout.declare(format!("{name}.scale"), vec![channels], ParamKind::NormScale),
            shift: layout.declare(format!("{name}.shift"), vec![channels], ParamKind::NormShift),
            running_mean: layout.declare(
                format!("{name}.running_mean"),
                vec![channels],
                ParamKind::RunningMean,
            ),
            running_var: layout.declare(
                format!("{name}.running_var"),
                vec![channels],
                ParamKind::RunningVar,
            ),
            channels,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        training: bool,
    ) -> (FeatureMap<T>, BnCache<T>) {
        assert_eq!(x.channels, self.channels);
        let per = x.per_channel();
        let gamma = p.get(self.scale);
        let beta = p.get(self.shift);
        let mut y = FeatureMap::zeros(x.channels, x.batch, x.height, x.width);
        let mut normalized = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(self.channels);
        let mut batch_mean = Vec::with_capacity(self.channels);
        let mut batch_var_unbiased = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let xs = &x.data[c * per..(c + 1) * per];
            let (mean, var) = if training {
                let mean = reduce(per, |i| xs[i]) / per as f64;
                let mt = T::of(mean);
                let var = reduce(per, |i| {
                    let d = xs[i] - mt;
                    d * d
                }) / per as f64;
                batch_mean.push(mean);
                batch_var_unbiased.push(if per > 1 { var * per as f64 / (per - 1) as f64 } else { var });
                (mean, var)
            } else {
                (p.get(self.running_mean)[c].as_f64(), p.get(self.running_var)[c].as_f64())
            };
            let is = T::of(1.0 / (var + BN_EPS).sqrt());
            let m = T::of(mean);
            inv_std.push(is);
            let (g, b) = (gamma[c], beta[c]);
            let ns = &mut normalized[c * per..(c + 1) * per];
            let ys = &mut y.data[c * per..(c + 1) * per];
            for ((n, yv), &xv) in ns.iter_mut().zip(ys.iter_mut()).zip(xs) {
                *n = (xv - m) * is;
                *yv = g * *n + b;
            }
        }
        (y, BnCache { normalized, inv_std, batch_mean, batch_var_unbiased, training })
    }

    #[allow(clippy::needless_range_loop)]
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &FeatureMap<T>,
        grads: &mut ParamStore<T>,
    ) -> FeatureMap<T> {
        let per = dy.per_channel();
        let gamma = p.get(self.scale);
        let mut dx = FeatureMap::zeros(dy.channels, dy.batch, dy.height, dy.width);
        for c in 0..self.channels {
            let ds = &dy.data[c * per..(c + 1) * per];
            let ns = &cache.normalized[c * per..(c + 1) * per];
            let sum_dy = reduce(per, |i| ds[i]);
            let sum_dy_n = reduce(per, |i| ds[i] * ns[i]);
            grads.get_mut(self.scale)[c] += T::of(sum_dy_n);
            grads.get_mut(self.shift)[c] += T::of(sum_dy);
            let scale = gamma[c] * cache.inv_std[c];
            let dxs = &mut dx.data[c * per..(c + 1) * per];
            if cache.training {
                let mean_dy = T::of(sum_dy / per as f64);
                let mean_dy_n = T::of(sum_dy_n / per as f64);
                for ((o, &d), &n) in dxs.iter_mut().zip(ds).zip(ns) {
                    *o = scale * (d - mean_dy - n * mean_dy_n);
                }
            } else {
                for (o, &d) in dxs.iter_mut().zip(ds) {
                    *o = scale * d;
                }
            }
        }
        dx
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running averages.
    pub fn update_running<T: Scalar>(&self, p: &mut ParamStore<T>, cache: &BnCache<T>) {
        if !cache.training {
            return;
        }
        for c in 0..self.channels {
            let rm = p.get_mut(self.running_mean);
            rm[c] = T::of((1.0 - BN_MOMENTUM) * rm[c].as_f64() + BN_MOMENTUM * cache.batch_mean[c]);
            let rv = p.get_mut(self.running_var);
            rv[c] = T::of(
                (1.0 - BN_MOMENTUM) * rv[c].as_f64() + BN_MOMENTUM * cache.batch_var_unbiased[c],
            );
        }
    }
}
