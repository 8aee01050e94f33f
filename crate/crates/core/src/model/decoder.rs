//! Multi-scale decoder: one transposed-convolution chain per encoder stage,
//! concatenated at full resolution and mixed by two 4x4 convolutions.

use crate::model::config::ModelConfig;
use crate::model::encoder::{FeaturePyramid, PyramidGrad};
use crate::nn::{
    relu_backward_in_place, relu_in_place, Conv2d, ConvTranspose2d, FeatureMap, ParamLayout, ParamStore,
    Window,
};
use crate::scalar::Scalar;

/// Name prefix of the output convolution, the only part replaced when
/// the number of output channels changes.
pub const OUTPUT_LAYER: &str = "decoder.fout2";

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `chains[l]` upsamples layer-(l+1); lengths 2, 3, 4, 5.
    pub chains: Vec<Vec<ConvTranspose2d>>,
    pub fout1: Conv2d,
    pub fout2: Conv2d,
    chain_out: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    /// Input of every transposed convolution, per chain.
    chain_inputs: Vec<Vec<FeatureMap<T>>>,
    concat: FeatureMap<T>,
    hidden: FeatureMap<T>,
}

fn same_4x4() -> Window {
    // even kernel: one row/column of padding before, two after keeps the size
    Window::new(4, 1, 1, 2)
}

impl Decoder {
    pub fn declare(layout: &mut ParamLayout, cfg: &ModelConfig) -> Self {
        let widths = cfg.stage_widths();
        let up = Window::new(4, 2, 1, 1);
        let mut chains = Vec::with_capacity(4);
        let mut chain_out = Vec::with_capacity(4);
        for level in 1..=4 {
            let schedule = cfg.decoder_chain(level);
            let mut cin = widths[level - 1];
            let mut chain = Vec::with_capacity(schedule.len());
            for (i, &cout) in schedule.iter().enumerate() {
                let name = format!("decoder.up{level}.{i}");
                chain.push(ConvTranspose2d::declare(layout, &name, cin, cout, up, true));
                cin = cout;
            }
            chain_out.push(cin);
            chains.push(chain);
        }
        let cat: usize = chain_out.iter().sum();
        let fuse = cfg.decoder_fuse_width();
        let fout1 = Conv2d::declare(layout, "decoder.fout1", cat, fuse, same_4x4(), true);
        let fout2 = Conv2d::declare(layout, OUTPUT_LAYER, fuse, cfg.out_channels, same_4x4(), true);
        Self { chains, fout1, fout2, chain_out }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, pyr: &FeaturePyramid<T>) -> (FeatureMap<T>, DecoderCache<T>) {
        let levels = [&pyr.f1, &pyr.f2, &pyr.f3, &pyr.f4];
        let mut outs = Vec::with_capacity(4);
        let mut chain_inputs = Vec::with_capacity(4);
        for (chain, f) in self.chains.iter().zip(levels) {
            let mut inputs = Vec::with_capacity(chain.len());
            let mut h = f.clone();
            for layer in chain {
                let mut y = layer.forward(p, &h);
                relu_in_place(&mut y.data);
                inputs.push(h);
                h = y;
            }
            chain_inputs.push(inputs);
            outs.push(h);
        }
        let concat = FeatureMap::concat_channels(&outs.iter().collect::<Vec<_>>());
        drop(outs);
        let mut hidden = self.fout1.forward(p, &concat);
        relu_in_place(&mut hidden.data);
        let y = self.fout2.forward(p, &hidden);
        (y, DecoderCache { chain_inputs, concat, hidden })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &DecoderCache<T>,
        dy: &FeatureMap<T>,
        grads: &mut ParamStore<T>,
    ) -> PyramidGrad<T> {
        let mut dh = self
            .fout2
            .backward(p, &cache.hidden, dy, grads, true)
            .expect("input grad requested");
        relu_backward_in_place(&cache.hidden.data, &mut dh.data);
        let dcat = self
            .fout1
            .backward(p, &cache.concat, &dh, grads, true)
            .expect("input grad requested");
        drop(dh);
        let parts = dcat.split_channels(&self.chain_out);
        let outputs = cache.concat.split_channels(&self.chain_out);
        let mut out = PyramidGrad::default();
        for (level, ((chain, inputs), (mut d, y))) in self
            .chains
            .iter()
            .zip(&cache.chain_inputs)
            .zip(parts.into_iter().zip(outputs))
            .enumerate()
        {
            // the rectified output of layer i is the input of layer i+1
            for (i, layer) in chain.iter().enumerate().rev() {
                let activated = if i + 1 == chain.len() { &y } else { &inputs[i + 1] };
                relu_backward_in_place(&activated.data, &mut d.data);
                d = layer
                    .backward(p, &inputs[i], &d, grads, true)
                    .expect("input grad requested");
            }
            out.add(level, d);
        }
        out
    }
}
