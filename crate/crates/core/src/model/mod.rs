//! Encoder–decoder with multi-scale fusion and projection heads.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod heads;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_state, save_state, Checkpoint, CheckpointMeta};
pub use config::ModelConfig;
pub use decoder::{Decoder, DecoderCache, OUTPUT_LAYER};
pub use encoder::{Encoder, EncoderCache, FeaturePyramid, PyramidGrad};
pub use heads::{ClassifierCache, ClassifierHead, FcPair, FcPairCache, Fusion, FusionCache, Heads};

use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Matrix, ParamLayout, ParamStore};
use crate::scalar::Scalar;

/// Layer graph for one [`ModelConfig`]. Holds no parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub heads: Heads,
    pub decoder: Decoder,
    layout: ParamLayout,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let encoder = Encoder::declare(&mut layout, config);
        let fusion = Fusion::declare(&mut layout, config);
        let heads = Heads::declare(&mut layout, config);
        let decoder = Decoder::declare(&mut layout, config);
        Ok(Self { config: config.clone(), encoder, fusion, heads, decoder, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_parameters(&self) -> usize {
        self.layout.learnable_count()
    }

    fn check_input<T: Scalar>(&self, x: &FeatureMap<T>) -> Result<()> {
        let s = self.config.input_size;
        if x.channels != self.config.in_channels || x.height != s || x.width != s {
            return Err(Error::Shape(format!(
                "network expects {}x{s}x{s} inputs, got {}x{}x{}",
                self.config.in_channels, x.channels, x.height, x.width
            )));
        }
        if !x.height.is_multiple_of(32) {
            return Err(Error::Config(format!("spatial size {} not divisible by 32", x.height)));
        }
        Ok(())
    }

    pub fn encode<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        training: bool,
    ) -> Result<(FeaturePyramid<T>, EncoderCache<T>)> {
        self.check_input(x)?;
        Ok(self.encoder.forward(p, x, training))
    }

    pub fn fuse<T: Scalar>(&self, p: &ParamStore<T>, pyr: &FeaturePyramid<T>) -> (Matrix<T>, FusionCache<T>) {
        self.fusion.forward(p, pyr)
    }

    /// Image-level embedding `z`.
    pub fn project_image<T: Scalar>(&self, p: &ParamStore<T>, v_all: &Matrix<T>) -> (Matrix<T>, FcPairCache<T>) {
        self.heads.image.forward(p, v_all.clone())
    }

    pub fn classify_task<T: Scalar>(&self, p: &ParamStore<T>, v_all: &Matrix<T>) -> (Matrix<T>, ClassifierCache<T>) {
        self.heads.task.forward(p, v_all)
    }

    pub fn classify_group<T: Scalar>(&self, p: &ParamStore<T>, v_all: &Matrix<T>) -> (Matrix<T>, ClassifierCache<T>) {
        self.heads.group.forward(p, v_all)
    }

    pub fn decode<T: Scalar>(&self, p: &ParamStore<T>, pyr: &FeaturePyramid<T>) -> (FeatureMap<T>, DecoderCache<T>) {
        self.decoder.forward(p, pyr)
    }

    /// Evaluation-mode `V_all` for a batch.
    pub fn features<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> Result<Matrix<T>> {
        let (pyr, _) = self.encode(p, x, false)?;
        Ok(self.fuse(p, &pyr).0)
    }

    /// Evaluation-mode decoder output for a batch.
    pub fn predict<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (pyr, _) = self.encode(p, x, false)?;
        Ok(self.decode(p, &pyr).0)
    }
}

/// Parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Fan-in scaled normal weights, zero biases, unit/zero normalization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let net = Network::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::initialize(net.layout().clone(), &mut rng);
        Ok(Self { config: config.clone(), params })
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(&self.config)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.layout().learnable_count()
    }

    /// Rebuilds the model for `out_channels` outputs; every tensor except the
    /// output convolution is carried over, which is freshly initialized.
    pub fn with_output_channels(&self, out_channels: usize, seed: u64) -> Result<Self> {
        let config = self.config.clone().with_out_channels(out_channels);
        let fresh = Self::init(&config, seed)?;
        self.transfer_into(fresh)
    }

    /// Copies every tensor of `self` into `target` by name; only the output
    /// convolution may differ in shape (it keeps the target's values).
    pub fn transfer_into(&self, mut target: Self) -> Result<Self> {
        let head_prefix = format!("{OUTPUT_LAYER}.");
        for id in target.params.ids().collect::<Vec<_>>() {
            let spec = target.params.spec(id).clone();
            let is_head = spec.name.starts_with(&head_prefix);
            match self.params.layout().position(&spec.name) {
                Some(src) => {
                    let src_spec = self.params.spec(src);
                    if src_spec.shape == spec.shape {
                        target.params.get_mut(id).copy_from_slice(self.params.get(src));
                    } else if !is_head {
                        return Err(Error::Shape(format!(
                            "parameter {} has shape {:?} in the source but {:?} in the target",
                            spec.name, src_spec.shape, spec.shape
                        )));
                    }
                }
                None => {
                    return Err(Error::Shape(format!("parameter {} missing from the source", spec.name)));
                }
            }
        }
        if target.params.layout().len() != self.params.layout().len() {
            return Err(Error::Shape("source has parameters unknown to the target".into()));
        }
        Ok(target)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState { config: self.config.clone(), params: self.params.cast() }
    }
}

/// Replicates single-channel `size x size` images into a `3 x B x S x S` map.
pub fn grayscale_batch<T: Scalar>(images: &[&[f32]], channels: usize, size: usize) -> FeatureMap<T> {
    let plane = size * size;
    let mut fm = FeatureMap::zeros(channels, images.len(), size, size);
    for c in 0..channels {
        for (b, img) in images.iter().enumerate() {
            assert_eq!(img.len(), plane, "image size");
            for (d, &s) in fm.sample_plane_mut(c, b).iter_mut().zip(img.iter()) {
                *d = T::of(s as f64);
            }
        }
    }
    fm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_state() {
        let cfg = ModelConfig::micro(3, 2);
        let a = ModelState::<f32>::init(&cfg, 7).unwrap();
        let b = ModelState::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = ModelState::<f32>::init(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_swap_keeps_backbone() {
        let cfg = ModelConfig::micro(3, 2);
        let a = ModelState::<f32>::init(&cfg, 1).unwrap();
        let b = a.with_output_channels(2, 9).unwrap();
        assert_eq!(b.config.out_channels, 2);
        let name = "encoder.layer2.1.conv1.weight";
        assert_eq!(a.params.by_name(name), b.params.by_name(name));
        let head = format!("{OUTPUT_LAYER}.weight");
        assert_eq!(b.params.by_name(&head).unwrap().len(), 2 * cfg.decoder_fuse_width() * 16);
    }

    #[test]
    fn other_shape_mismatch_is_rejected() {
        let a = ModelState::<f32>::init(&ModelConfig::micro(3, 2), 1).unwrap();
        let b = ModelState::<f32>::init(&ModelConfig::micro(4, 2), 1).unwrap();
        assert!(a.transfer_into(b).is_err());
    }
}
