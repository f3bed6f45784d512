//! VGG-16 feature extractor, truncated after `conv3_3`.
//!
//! Features are read after the ReLU of each named convolution. Inputs in
//! `[0, 1]` are normalized with the ImageNet channel statistics first.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{Container, NamedTensor, VGG_MAGIC};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::Mask;
use crate::tensor::{gemm_bt, maxpool2x2, maxpool2x2_adjoint, Conv3x3, Tensor3};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

const CONV_NAMES: [&str; 7] = ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VggLayer {
    Conv1_1,
    Conv1_2,
    Conv2_2,
    Conv3_3,
}

impl VggLayer {
    pub const ALL: [VggLayer; 4] = [VggLayer::Conv1_1, VggLayer::Conv1_2, VggLayer::Conv2_2, VggLayer::Conv3_3];

    pub fn name(self) -> &'static str {
        match self {
            VggLayer::Conv1_1 => "conv1_1",
            VggLayer::Conv1_2 => "conv1_2",
            VggLayer::Conv2_2 => "conv2_2",
            VggLayer::Conv3_3 => "conv3_3",
        }
    }

    fn conv_index(self) -> usize {
        match self {
            VggLayer::Conv1_1 => 0,
            VggLayer::Conv1_2 => 1,
            VggLayer::Conv2_2 => 3,
            VggLayer::Conv3_3 => 6,
        }
    }

    /// Position of this layer in [`VggLayer::ALL`].
    pub fn slot(self) -> usize {
        match self {
            VggLayer::Conv1_1 => 0,
            VggLayer::Conv1_2 => 1,
            VggLayer::Conv2_2 => 2,
            VggLayer::Conv3_3 => 3,
        }
    }

    /// Spatial side of this layer's features for a square input.
    pub fn feature_side(self, input_side: usize) -> usize {
        match self {
            VggLayer::Conv1_1 | VggLayer::Conv1_2 => input_side,
            VggLayer::Conv2_2 => input_side / 2,
            VggLayer::Conv3_3 => input_side / 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer: VggLayer,
    pub data: Tensor3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VggConfig {
    /// Channel widths of blocks 1, 2 and 3.
    pub block_channels: [usize; 3],
    pub seed: u64,
}

impl VggConfig {
    pub fn standard() -> Self {
        Self {
            block_channels: [64, 128, 256],
            seed: 0,
        }
    }

    /// Narrow random-weight network for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            block_channels: [8, 16, 32],
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn conv_shapes(&self) -> [(usize, usize); 7] {
        let [a, b, c] = self.block_channels;
        [(3, a), (a, a), (a, b), (b, b), (b, c), (c, c), (c, c)]
    }

    pub fn channels(&self, layer: VggLayer) -> usize {
        self.conv_shapes()[layer.conv_index()].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vgg16Features {
    config: VggConfig,
    convs: Vec<Conv3x3>,
}

/// Values a forward pass retains for [`Vgg16Features::backward`].
pub struct VggTrace {
    input_side: usize,
    relu_on: Vec<Vec<bool>>,
    pools: Vec<(Vec<usize>, (usize, usize, usize))>,
}

impl Vgg16Features {
    /// He-initialized random weights from a seed.
    pub fn init_random(config: VggConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7667_6731);
        let convs = config
            .conv_shapes()
            .iter()
            .map(|&(cin, cout)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                Conv3x3 {
                    in_channels: cin,
                    out_channels: cout,
                    weight: (0..cout * cin * 9)
                        .map(|_| {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            (v * std) as f32 as f64
                        })
                        .collect(),
                    bias: Some(vec![0.0; cout]),
                }
            })
            .collect();
        Self { config, convs }
    }

    pub fn config(&self) -> &VggConfig {
        &self.config
    }

    pub fn to_container(&self) -> Container {
        let [a, b, c] = self.config.block_channels;
        let mut out = Container::new(VGG_MAGIC, [a as u32, b as u32, c as u32]);
        for (name, conv) in CONV_NAMES.iter().zip(&self.convs) {
            out.push(NamedTensor::from_f64(
                format!("{name}/weight"),
                vec![conv.out_channels, conv.in_channels, 3, 3],
                &conv.weight,
            ));
            out.push(NamedTensor::from_f64(
                format!("{name}/bias"),
                vec![conv.out_channels],
                conv.bias.as_deref().unwrap_or(&[]),
            ));
        }
        out
    }

    /// Loads `I2VG` weights. The header carries the three block widths.
    pub fn from_container(c: &Container) -> Result<Self> {
        let config = VggConfig {
            block_channels: c.header.map(|v| v as usize),
            seed: 0,
        };
        let mut convs = Vec::with_capacity(7);
        for (name, (cin, cout)) in CONV_NAMES.iter().zip(config.conv_shapes()) {
            convs.push(Conv3x3 {
                in_channels: cin,
                out_channels: cout,
                weight: c.tensor(&format!("{name}/weight"), &[cout, cin, 3, 3])?,
                bias: Some(c.tensor(&format!("{name}/bias"), &[cout])?),
            });
        }
        Ok(Self { config, convs })
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, VGG_MAGIC)?)
    }

    fn normalize(image: &ImageBuffer) -> Result<Tensor3> {
        match image.side() {
            Some(s) if s >= 4 => {}
            _ => {
                return Err(Error::contract(format!(
                    "feature extraction needs a square image of side >= 4, got {}x{}",
                    image.height(),
                    image.width()
                )))
            }
        }
        let mut t = image.to_chw();
        for c in 0..3 {
            let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
            t.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(t)
    }

    pub fn extract_features(&self, image: &ImageBuffer) -> Result<Vec<FeatureMap>> {
        Ok(self.forward_traced(image)?.0)
    }

    /// Features of the four named layers, in [`VggLayer::ALL`] order.
    pub fn forward_traced(&self, image: &ImageBuffer) -> Result<(Vec<FeatureMap>, VggTrace)> {
        let mut x = Self::normalize(image)?;
        let mut features = Vec::with_capacity(4);
        let mut relu_on = Vec::with_capacity(7);
        let mut pools = Vec::with_capacity(2);
        for (k, conv) in self.convs.iter().enumerate() {
            if k == 2 || k == 4 {
                let shape = x.shape();
                let (pooled, argmax) = maxpool2x2(&x);
                pools.push((argmax, shape));
                x = pooled;
            }
            x = conv.forward(&x);
            relu_on.push(x.data.iter().map(|&v| v > 0.0).collect());
            x.data.iter_mut().for_each(|v| *v = v.max(0.0));
            if let Some(layer) = VggLayer::ALL.into_iter().find(|l| l.conv_index() == k) {
                features.push(FeatureMap { layer, data: x.clone() });
            }
        }
        let trace = VggTrace {
            input_side: image.height(),
            relu_on,
            pools,
        };
        Ok((features, trace))
    }

    /// Backpropagates gradients given at the named layers (indexed by
    /// [`VggLayer::slot`]) to the input pixels, interleaved RGB.
    pub fn backward(&self, trace: &VggTrace, grads: &[Option<Tensor3>; 4]) -> Vec<f64> {
        let side = trace.input_side;
        let deepest = VggLayer::ALL
            .into_iter()
            .rev()
            .find(|l| grads[l.slot()].is_some());
        let Some(deepest) = deepest else {
            return vec![0.0; side * side * 3];
        };
        let mut g: Option<Tensor3> = None;
        for k in (0..=deepest.conv_index()).rev() {
            if let Some(layer) = VggLayer::ALL.into_iter().find(|l| l.conv_index() == k) {
                if let Some(ext) = &grads[layer.slot()] {
                    match &mut g {
                        Some(acc) => acc.data.iter_mut().zip(&ext.data).for_each(|(a, e)| *a += e),
                        None => g = Some(ext.clone()),
                    }
                }
            }
            let Some(mut cur) = g.take() else { continue };
            cur.data
                .iter_mut()
                .zip(&trace.relu_on[k])
                .for_each(|(v, &on)| if !on { *v = 0.0 });
            cur = self.convs[k].backward_input(&cur);
            if k == 2 || k == 4 {
                let (argmax, shape) = &trace.pools[if k == 2 { 0 } else { 1 }];
                cur = maxpool2x2_adjoint(&cur, argmax, *shape);
            }
            g = Some(cur);
        }
        let g = g.expect("deepest layer has a gradient");
        let hw = side * side;
        let mut out = vec![0.0; hw * 3];
        for c in 0..3 {
            let s = IMAGENET_STD[c];
            for p in 0..hw {
                out[p * 3 + c] = g.data[c * hw + p] / s;
            }
        }
        out
    }
}

/// Masked Gram matrix `G[c,d] = Σ m·f_c·f_d / Σ m`, row-major `C×C`.
/// An all-zero mask yields the zero matrix.
pub fn gram(fm: &FeatureMap, mask: &Mask) -> Result<Vec<f64>> {
    let t = &fm.data;
    mask.ensure_size(t.height, t.width, "gram mask")?;
    let c = t.channels;
    let total = mask.sum();
    if total == 0.0 {
        return Ok(vec![0.0; c * c]);
    }
    let p = t.plane_len();
    let mut weighted = t.data.clone();
    for ch in 0..c {
        weighted[ch * p..(ch + 1) * p]
            .iter_mut()
            .zip(mask.data())
            .for_each(|(v, m)| *v *= m);
    }
    let mut g = vec![0.0; c * c];
    gemm_bt(c, p, c, &weighted, &t.data, &mut g);
    g.iter_mut().for_each(|v| *v /= total);
    for i in 0..c {
        for j in 0..i {
            g[i * c + j] = g[j * c + i];
        }
    }
    Ok(g)
}

/// Area-average downsampling. Each target cell averages the source pixels it
/// covers, weighting partial overlaps by their covered fraction.
pub fn downsample_mask(m: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height > m.height() || width > m.width() || height == 0 || width == 0 {
        return Err(Error::contract(format!(
            "mask downsampling cannot go from {}x{} to {height}x{width}",
            m.height(),
            m.width()
        )));
    }
    if height == m.height() && width == m.width() {
        return Ok(m.clone());
    }
    let ry = area_weights(m.height(), height);
    let rx = area_weights(m.width(), width);
    let mut data = vec![0.0; height * width];
    for (oy, wy) in ry.iter().enumerate() {
        for (ox, wx) in rx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, fy) in wy {
                for &(sx, fx) in wx {
                    acc += fy * fx * m.get(sy, sx);
                }
            }
            data[oy * width + ox] = acc.clamp(0.0, 1.0);
        }
    }
    Mask::new(height, width, data)
}

fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let cell = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * cell, (o + 1) as f64 * cell);
            let mut taps = Vec::new();
            for s in lo.floor() as usize..(hi.ceil() as usize).min(n_in) {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / cell));
                }
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_sides_follow_pooling() {
        let vgg = Vgg16Features::init_random(VggConfig::toy());
        let img = ImageBuffer::filled(16, 16, 0.5);
        let f = vgg.extract_features(&img).unwrap();
        let sides: Vec<_> = f.iter().map(|m| m.data.height).collect();
        assert_eq!(sides, vec![16, 16, 8, 4]);
        let channels: Vec<_> = f.iter().map(|m| m.data.channels).collect();
        assert_eq!(channels, vec![8, 8, 16, 32]);
        assert_eq!(VggLayer::Conv3_3.feature_side(256), 64);
    }

    #[test]
    fn non_square_input_is_rejected() {
        let vgg = Vgg16Features::init_random(VggConfig::toy());
        assert!(vgg.extract_features(&ImageBuffer::filled(8, 16, 0.5)).is_err());
    }

    #[test]
    fn gram_of_constant_features() {
        let fm = FeatureMap {
            layer: VggLayer::Conv3_3,
            data: Tensor3::filled(2, 3, 3, 1.0),
        };
        assert_eq!(gram(&fm, &Mask::ones(3)).unwrap(), vec![1.0; 4]);
        assert_eq!(gram(&fm, &Mask::zeros(3)).unwrap(), vec![0.0; 4]);
        assert!(gram(&fm, &Mask::ones(4)).is_err());
    }

    #[test]
    fn area_downsampling_cases() {
        let checker = Mask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(downsample_mask(&checker, 1, 1).unwrap().data(), &[0.5]);
        let single = Mask::rect(4, 1, 2, 2, 3);
        let d = downsample_mask(&single, 2, 2).unwrap();
        assert_eq!(d.data(), &[0.0, 0.25, 0.0, 0.0]);
        assert!(downsample_mask(&Mask::ones(2), 4, 4).is_err());
        let ones = downsample_mask(&Mask::ones(12), 3, 3).unwrap();
        assert!(ones.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
