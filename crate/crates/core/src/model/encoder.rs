//! Residual encoder: two stem convolutions followed by four basic-block stages.

use crate::model::config::{ModelConfig, STAGE_BLOCKS};
use crate::nn::{
    relu_backward_in_place, relu_in_place, BatchNorm2d, BnCache, Conv2d, FeatureMap, ParamLayout,
    ParamStore, Window,
};
use crate::scalar::Scalar;

/// Outputs of layer-1..layer-4.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub f1: FeatureMap<T>,
    pub f2: FeatureMap<T>,
    pub f3: FeatureMap<T>,
    pub f4: FeatureMap<T>,
}

/// Gradient with respect to each pyramid level; `None` means zero.
#[derive(Debug, Clone)]
pub struct PyramidGrad<T> {
    pub levels: [Option<FeatureMap<T>>; 4],
}

impl<T: Scalar> Default for PyramidGrad<T> {
    fn default() -> Self {
        Self { levels: [None, None, None, None] }
    }
}

impl<T: Scalar> PyramidGrad<T> {
    pub fn add(&mut self, level: usize, g: FeatureMap<T>) {
        match &mut self.levels[level] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: PyramidGrad<T>) {
        for (i, g) in other.levels.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(i, g);
            }
        }
    }
}

/// conv -> batch norm -> relu.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct ConvBnReluCache<T> {
    input: FeatureMap<T>,
    bn: BnCache<T>,
    output: FeatureMap<T>,
}

impl ConvBnRelu {
    fn declare(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::declare(layout, &format!("{name}.conv"), cin, cout, Window::new(3, stride, 1, 1), false),
            bn: BatchNorm2d::declare(layout, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: FeatureMap<T>,
        training: bool,
    ) -> (FeatureMap<T>, ConvBnReluCache<T>) {
        let z = self.conv.forward(p, &x);
        let (mut y, bn) = self.bn.forward(p, &z, training);
        relu_in_place(&mut y.data);
        (y.clone(), ConvBnReluCache { input: x, bn, output: y })
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ConvBnReluCache<T>,
        mut dy: FeatureMap<T>,
        grads: &mut ParamStore<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        relu_backward_in_place(&cache.output.data, &mut dy.data);
        let dz = self.bn.backward(p, &cache.bn, &dy, grads);
        self.conv.backward(p, &cache.input, &dz, grads, need_input_grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone)]
pub struct BasicBlockCache<T> {
    input: FeatureMap<T>,
    bn1: BnCache<T>,
    hidden: FeatureMap<T>,
    bn2: BnCache<T>,
    shortcut_bn: Option<BnCache<T>>,
    output: FeatureMap<T>,
}

impl BasicBlock {
    fn declare(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv2d::declare(layout, &format!("{name}.conv1"), cin, cout, Window::new(3, stride, 1, 1), false);
        let bn1 = BatchNorm2d::declare(layout, &format!("{name}.bn1"), cout);
        let conv2 = Conv2d::declare(layout, &format!("{name}.conv2"), cout, cout, Window::new(3, 1, 1, 1), false);
        let bn2 = BatchNorm2d::declare(layout, &format!("{name}.bn2"), cout);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::declare(layout, &format!("{name}.down.conv"), cin, cout, Window::new(1, stride, 0, 0), false),
                BatchNorm2d::declare(layout, &format!("{name}.down.bn"), cout),
            )
        });
        Self { conv1, bn1, conv2, bn2, shortcut }
    }

    fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: FeatureMap<T>,
        training: bool,
    ) -> (FeatureMap<T>, BasicBlockCache<T>) {
        let z1 = self.conv1.forward(p, &x);
        let (mut hidden, bn1) = self.bn1.forward(p, &z1, training);
        drop(z1);
        relu_in_place(&mut hidden.data);
        let z2 = self.conv2.forward(p, &hidden);
        let (mut out, bn2) = self.bn2.forward(p, &z2, training);
        drop(z2);
        let shortcut_bn = match &self.shortcut {
            Some((conv, bn)) => {
                let zs = conv.forward(p, &x);
                let (s, cache) = bn.forward(p, &zs, training);
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(&x);
                None
            }
        };
        relu_in_place(&mut out.data);
        let cache = BasicBlockCache { input: x, bn1, hidden, bn2, shortcut_bn, output: out.clone() };
        (out, cache)
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &BasicBlockCache<T>,
        mut dy: FeatureMap<T>,
        grads: &mut ParamStore<T>,
    ) -> FeatureMap<T> {
        relu_backward_in_place(&cache.output.data, &mut dy.data);
        let dz2 = self.bn2.backward(p, &cache.bn2, &dy, grads);
        let mut dh = self
            .conv2
            .backward(p, &cache.hidden, &dz2, grads, true)
            .expect("input grad requested");
        drop(dz2);
        relu_backward_in_place(&cache.hidden.data, &mut dh.data);
        let dz1 = self.bn1.backward(p, &cache.bn1, &dh, grads);
        drop(dh);
        let mut dx = self
            .conv1
            .backward(p, &cache.input, &dz1, grads, true)
            .expect("input grad requested");
        match (&self.shortcut, &cache.shortcut_bn) {
            (Some((conv, bn)), Some(bn_cache)) => {
                let dzs = bn.backward(p, bn_cache, &dy, grads);
                let ds = conv
                    .backward(p, &cache.input, &dzs, grads, true)
                    .expect("input grad requested");
                dx.add_assign(&ds);
            }
            _ => dx.add_assign(&dy),
        }
        dx
    }

    fn norms(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.bn1, &self.bn2];
        if let Some((_, bn)) = &self.shortcut {
            v.push(bn);
        }
        v
    }

    fn norm_caches<'a, T>(&self, cache: &'a BasicBlockCache<T>) -> Vec<&'a BnCache<T>> {
        let mut v = vec![&cache.bn1, &cache.bn2];
        if let Some(c) = &cache.shortcut_bn {
            v.push(c);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub conv1_1: ConvBnRelu,
    pub conv1_2: ConvBnRelu,
    pub stages: Vec<Vec<BasicBlock>>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    conv1_1: ConvBnReluCache<T>,
    conv1_2: ConvBnReluCache<T>,
    stages: Vec<Vec<BasicBlockCache<T>>>,
}

impl Encoder {
    pub fn declare(layout: &mut ParamLayout, cfg: &ModelConfig) -> Self {
        let stem = cfg.stem_width();
        let conv1_1 = ConvBnRelu::declare(layout, "encoder.conv1_1", cfg.in_channels, stem, 1);
        let conv1_2 = ConvBnRelu::declare(layout, "encoder.conv1_2", stem, stem, 2);
        let widths = cfg.stage_widths();
        let mut cin = stem;
        let mut stages = Vec::with_capacity(4);
        for (s, (&blocks, &cout)) in STAGE_BLOCKS.iter().zip(&widths).enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let name = format!("encoder.layer{}.{}", s + 1, b);
                let (bin, stride) = if b == 0 { (cin, 2) } else { (cout, 1) };
                stage.push(BasicBlock::declare(layout, &name, bin, cout, stride));
            }
            cin = cout;
            stages.push(stage);
        }
        Self { conv1_1, conv1_2, stages }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        training: bool,
    ) -> (FeaturePyramid<T>, EncoderCache<T>) {
        let (h, c11) = self.conv1_1.forward(p, x.clone(), training);
        let (mut h, c12) = self.conv1_2.forward(p, h, training);
        let mut outs = Vec::with_capacity(4);
        let mut stage_caches = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, c) = block.forward(p, h, training);
                caches.push(c);
                h = y;
            }
            outs.push(h.clone());
            stage_caches.push(caches);
        }
        let f4 = outs.pop().expect("4 stages");
        let f3 = outs.pop().expect("4 stages");
        let f2 = outs.pop().expect("4 stages");
        let f1 = outs.pop().expect("4 stages");
        (
            FeaturePyramid { f1, f2, f3, f4 },
            EncoderCache { conv1_1: c11, conv1_2: c12, stages: stage_caches },
        )
    }

    /// Stem outputs (conv1-1, conv1-2) recorded in the cache.
    pub fn stem_outputs<'a, T>(&self, cache: &'a EncoderCache<T>) -> [&'a FeatureMap<T>; 2] {
        [&cache.conv1_1.output, &cache.conv1_2.output]
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &EncoderCache<T>,
        mut grad: PyramidGrad<T>,
        grads: &mut ParamStore<T>,
    ) {
        let mut running: Option<FeatureMap<T>> = None;
        for (s, (stage, caches)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            if let Some(g) = grad.levels[s].take() {
                running = Some(match running {
                    Some(mut r) => {
                        r.add_assign(&g);
                        r
                    }
                    None => g,
                });
            }
            let Some(mut dy) = running.take() else { continue };
            for (block, c) in stage.iter().zip(caches).rev() {
                dy = block.backward(p, c, dy, grads);
            }
            running = Some(dy);
        }
        let Some(dy) = running else { return };
        let dy = self
            .conv1_2
            .backward(p, &cache.conv1_2, dy, grads, true)
            .expect("input grad requested");
        self.conv1_1.backward(p, &cache.conv1_1, dy, grads, false);
    }

    pub fn update_running_stats<T: Scalar>(&self, p: &mut ParamStore<T>, cache: &EncoderCache<T>) {
        self.conv1_1.bn.update_running(p, &cache.conv1_1.bn);
        self.conv1_2.bn.update_running(p, &cache.conv1_2.bn);
        for (stage, caches) in self.stages.iter().zip(&cache.stages) {
            for (block, c) in stage.iter().zip(caches) {
                for (bn, bc) in block.norms().into_iter().zip(block.norm_caches(c)) {
                    bn.update_running(p, bc);
                }
            }
        }
    }
}
