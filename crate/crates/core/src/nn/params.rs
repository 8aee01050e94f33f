use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a tensor is initialized and whether the optimizer touches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight drawn from `N(0, 2 / fan_in)`.
    Weight { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of tensor declarations produced while laying out a network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn declare(&mut self, name: impl Into<String>, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec { name, shape, kind });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.specs.iter().filter(|s| s.kind.learnable()).map(ParamSpec::numel).sum()
    }

    pub fn position(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }
}

/// Values for every tensor in a [`ParamLayout`], same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub(crate) layout: ParamLayout,
    pub(crate) values: Vec<Vec<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn initialize<R: Rng>(layout: ParamLayout, rng: &mut R) -> Self {
        let values = layout.specs.iter().map(|s| init_tensor(s, rng)).collect();
        Self { layout, values }
    }

    pub fn zeros_like(layout: &ParamLayout) -> Self {
        let values = layout.specs.iter().map(|s| vec![T::zero(); s.numel()]).collect();
        Self { layout: layout.clone(), values }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.layout.specs[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&[T]> {
        self.layout.position(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Re-draws one tensor from its declared initializer.
    pub fn reinit<R: Rng>(&mut self, id: ParamId, rng: &mut R) {
        let spec = self.layout.specs[id.0].clone();
        self.values[id.0] = init_tensor(&spec, rng);
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

fn init_tensor<T: Scalar, R: Rng>(spec: &ParamSpec, rng: &mut R) -> Vec<T> {
    let n = spec.numel();
    match spec.kind {
        ParamKind::Weight { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::of(normal.sample(rng))).collect()
        }
        ParamKind::Bias | ParamKind::NormShift | ParamKind::RunningMean => vec![T::zero(); n],
        ParamKind::NormScale | ParamKind::RunningVar => vec![T::one(); n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_follows_kinds() {
        let mut layout = ParamLayout::default();
        let w = layout.declare("w", vec![64, 9], ParamKind::Weight { fan_in: 9 });
        let b = layout.declare("b", vec![4], ParamKind::Bias);
        let g = layout.declare("g", vec![4], ParamKind::NormScale);
        let rv = layout.declare("rv", vec![4], ParamKind::RunningVar);
        assert_eq!(layout.learnable_count(), 64 * 9 + 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::<f64>::initialize(layout, &mut rng);
        assert!(store.get(b).iter().all(|&v| v == 0.0));
        assert!(store.get(g).iter().all(|&v| v == 1.0));
        assert!(store.get(rv).iter().all(|&v| v == 1.0));
        let ws = store.get(w);
        let var = ws.iter().map(|v| v * v).sum::<f64>() / ws.len() as f64;
        assert!((var - 2.0 / 9.0).abs() < 0.06, "var {var}");
    }
}
