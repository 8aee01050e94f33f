use crate::nn::params::{ParamId, ParamKind, ParamLayout, ParamStore};
use crate::nn::tensor::{FeatureMap, Matrix};
use crate::scalar::{gemm, MatRef, Scalar};

/// Affine layer `y = x W^T + b` on row-major `[batch][features]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn declare(layout: &mut ParamLayout, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: layout.declare(
                format!("{name}.weight"),
                vec![out_features, in_features],
                ParamKind::Weight { fan_in: in_features },
            ),
            bias: layout.declare(format!("{name}.bias"), vec![out_features], ParamKind::Bias),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.cols, self.in_features, "linear input width");
        let mut y = Matrix::zeros(x.rows, self.out_features);
        let bias = p.get(self.bias);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(bias);
        }
        gemm(
            MatRef::new(&x.data, x.rows, x.cols),
            MatRef::t(p.get(self.weight), self.out_features, self.in_features),
            T::one(),
            &mut y.data,
        );
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        grads: &mut ParamStore<T>,
    ) -> Matrix<T> {
        gemm(
            MatRef::t(&dy.data, dy.rows, dy.cols),
            MatRef::new(&x.data, x.rows, x.cols),
            T::one(),
            grads.get_mut(self.weight),
        );
        let gb = grads.get_mut(self.bias);
        for r in 0..dy.rows {
            for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(x.rows, x.cols);
        gemm(
            MatRef::new(&dy.data, dy.rows, dy.cols),
            MatRef::new(p.get(self.weight), self.out_features, self.in_features),
            T::zero(),
            &mut dx.data,
        );
        dx
    }
}

pub fn relu_in_place<T: Scalar>(data: &mut [T]) {
    for v in data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by the positivity of an already-rectified output.
pub fn relu_backward_in_place<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Global average pooling: `[C][B][H][W]` to `[B][C]`.
pub fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.batch, x.channels);
    let inv = 1.0 / x.plane() as f64;
    for c in 0..x.channels {
        for b in 0..x.batch {
            let s: f64 = x.sample_plane(c, b).iter().map(|v| v.as_f64()).sum();
            out.data[b * x.channels + c] = T::of(s * inv);
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(
    dy: &Matrix<T>,
    channels: usize,
    batch: usize,
    height: usize,
    width: usize,
) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(channels, batch, height, width);
    let inv = T::of(1.0 / (height * width) as f64);
    for c in 0..channels {
        for b in 0..batch {
            let g = dy.data[b * channels + c] * inv;
            dx.sample_plane_mut(c, b).iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}
