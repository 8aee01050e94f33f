//! Multi-scale feature fusion and the three projection heads hanging off it.

use crate::model::config::ModelConfig;
use crate::model::encoder::{FeaturePyramid, PyramidGrad};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward_in_place, relu_in_place, Linear, Matrix,
    ParamLayout, ParamStore,
};
use crate::scalar::Scalar;

/// Two affine layers with a rectifier in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FcPair {
    pub first: Linear,
    pub second: Linear,
}

#[derive(Debug, Clone)]
pub struct FcPairCache<T> {
    input: Matrix<T>,
    hidden: Matrix<T>,
}

impl FcPair {
    pub fn declare(layout: &mut ParamLayout, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            first: Linear::declare(layout, &format!("{name}.fc1"), input, hidden),
            second: Linear::declare(layout, &format!("{name}.fc2"), hidden, output),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: Matrix<T>) -> (Matrix<T>, FcPairCache<T>) {
        let mut hidden = self.first.forward(p, &x);
        relu_in_place(&mut hidden.data);
        let y = self.second.forward(p, &hidden);
        (y, FcPairCache { input: x, hidden })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &FcPairCache<T>,
        dy: &Matrix<T>,
        grads: &mut ParamStore<T>,
    ) -> Matrix<T> {
        let mut dh = self.second.backward(p, &cache.hidden, dy, grads);
        relu_backward_in_place(&cache.hidden.data, &mut dh.data);
        self.first.backward(p, &cache.input, &dh, grads)
    }
}

/// Pools layer-2..layer-4 and projects each to a vector; `V_all` is their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub branches: [FcPair; 3],
    widths: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct FusionCache<T> {
    branches: Vec<FcPairCache<T>>,
    dims: [[usize; 4]; 3],
}

impl Fusion {
    pub fn declare(layout: &mut ParamLayout, cfg: &ModelConfig) -> Self {
        let stage = cfg.stage_widths();
        let out = cfg.fusion_widths();
        let branches = [0, 1, 2].map(|i| {
            FcPair::declare(layout, &format!("fusion.v{}", i + 2), stage[i + 1], out[i], out[i])
        });
        Self { branches, widths: out }
    }

    pub fn output_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, pyr: &FeaturePyramid<T>) -> (Matrix<T>, FusionCache<T>) {
        let levels = [&pyr.f2, &pyr.f3, &pyr.f4];
        let mut parts = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for (branch, f) in self.branches.iter().zip(levels) {
            let (v, c) = branch.forward(p, global_avg_pool(f));
            parts.push(v);
            caches.push(c);
        }
        let v_all = Matrix::concat_cols(&parts.iter().collect::<Vec<_>>());
        (v_all, FusionCache { branches: caches, dims: levels.map(|f| f.dims()) })
    }

    /// Returns gradients for layer-2..layer-4 (pyramid slots 1..=3).
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &FusionCache<T>,
        dv: &Matrix<T>,
        grads: &mut ParamStore<T>,
    ) -> PyramidGrad<T> {
        let parts = dv.split_cols(&self.widths);
        let mut out = PyramidGrad::default();
        for (i, ((branch, c), dpart)) in self.branches.iter().zip(&cache.branches).zip(&parts).enumerate() {
            let dpool = branch.backward(p, c, dpart, grads);
            let [ch, b, h, w] = cache.dims[i];
            out.add(i + 1, global_avg_pool_backward(&dpool, ch, b, h, w));
        }
        out
    }
}

/// `H` (two affine layers from `V_all`), a rectifier, then `F` (two more).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub trunk: FcPair,
    pub out: FcPair,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache<T> {
    trunk: FcPairCache<T>,
    out: FcPairCache<T>,
}

impl ClassifierHead {
    fn declare(layout: &mut ParamLayout, name: &str, input: usize, width: usize, classes: usize) -> Self {
        Self {
            trunk: FcPair::declare(layout, &format!("{name}.h"), input, width, width),
            out: FcPair::declare(layout, &format!("{name}.f"), width, width, classes),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, v: &Matrix<T>) -> (Matrix<T>, ClassifierCache<T>) {
        let (mut h, trunk) = self.trunk.forward(p, v.clone());
        relu_in_place(&mut h.data);
        let (logits, out) = self.out.forward(p, h);
        (logits, ClassifierCache { trunk, out })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ClassifierCache<T>,
        dlogits: &Matrix<T>,
        grads: &mut ParamStore<T>,
    ) -> Matrix<T> {
        let mut dh = self.out.backward(p, &cache.out, dlogits, grads);
        relu_backward_in_place(&cache.out.input.data, &mut dh.data);
        self.trunk.backward(p, &cache.trunk, &dh, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    /// Image-level projection `P_l`.
    pub image: FcPair,
    /// Task-level classifier `P_t`.
    pub task: ClassifierHead,
    /// Group-level classifier `P_g`.
    pub group: ClassifierHead,
}

impl Heads {
    pub fn declare(layout: &mut ParamLayout, cfg: &ModelConfig) -> Self {
        let v = cfg.fused_dim();
        let h = cfg.head_width();
        let group = ClassifierHead::declare(layout, "heads.group", v, h, cfg.num_groups);
        let task = ClassifierHead::declare(layout, "heads.task", v, h, cfg.num_tasks);
        let image = FcPair::declare(layout, "heads.image", v, cfg.embed_dim, cfg.embed_dim);
        Self { image, task, group }
    }
}
