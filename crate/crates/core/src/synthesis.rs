//! Style-based synthesis network: a learned 4×4 constant refined by two
//! modulated layers per resolution level, with additive per-layer noise.
//!
//! Layers are numbered from 1. Layers `2k-1` and `2k` belong to level `k`,
//! whose side is `4·2^(k-1)`. Each layer computes
//!
//! ```text
//! x = conv3x3(upsample?(input))        (layer 1 starts from the constant)
//! x = x + strength[c]·noise + bias[c]
//! x = lrelu(x)
//! x = instance_norm(x)
//! out = (1 + s_scale[c])·x + s_shift[c],  [s_scale; s_shift] = A·w_l + b
//! ```
//!
//! `out` is the layer's activation, which is what taps return and injections
//! replace. The image is `(toRGB(out_L) + 1) / 2`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{Container, NamedTensor, GENERATOR_MAGIC};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::tensor::{upsample2x, upsample2x_adjoint, Conv1x1, Conv3x3, Tensor3};

pub const LRELU_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-8;
pub const MEAN_LATENT_SAMPLES: usize = 4096;
const MEAN_LATENT_SEED: u64 = 0x6d65_616e;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub output_resolution: usize,
    pub style_dim: usize,
    /// Feature channels for each resolution level, 4×4 first.
    pub channel_schedule: Vec<usize>,
    pub rgb_channels: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    /// A desk-scale configuration with narrow layers.
    pub fn toy(output_resolution: usize) -> Self {
        let levels = levels_for(output_resolution);
        let channel_schedule = (0..levels)
            .map(|k| match 4usize << k {
                side if side <= 16 => 32,
                32 => 24,
                64 => 16,
                _ => 8,
            })
            .collect();
        Self {
            output_resolution,
            style_dim: 32,
            channel_schedule,
            rgb_channels: 3,
            seed: 0,
        }
    }

    /// The layout of the 1024² face generator.
    pub fn full() -> Self {
        Self {
            output_resolution: 1024,
            style_dim: 512,
            channel_schedule: vec![512, 512, 512, 512, 256, 128, 64, 32, 16],
            rgb_channels: 3,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_style_dim(mut self, style_dim: usize) -> Self {
        self.style_dim = style_dim;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channel_schedule = vec![channels; self.num_levels()];
        self
    }

    pub fn num_levels(&self) -> usize {
        levels_for(self.output_resolution)
    }

    /// Number of style layers (and of noise maps).
    pub fn num_layers(&self) -> usize {
        2 * self.num_levels()
    }

    /// Level (1-based) that owns a 1-based layer index.
    pub fn level_of_layer(layer: usize) -> usize {
        layer.div_ceil(2)
    }

    /// Spatial side of a 1-based layer.
    pub fn layer_side(&self, layer: usize) -> usize {
        4 << (Self::level_of_layer(layer) - 1)
    }

    pub fn layer_channels(&self, layer: usize) -> usize {
        self.channel_schedule[Self::level_of_layer(layer) - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.output_resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Config(format!(
                "output resolution {r} must be a power of two and at least 8"
            )));
        }
        if self.channel_schedule.len() != self.num_levels() {
            return Err(Error::Config(format!(
                "channel schedule has {} entries but resolution {r} has {} levels",
                self.channel_schedule.len(),
                self.num_levels()
            )));
        }
        if self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.style_dim == 0 {
            return Err(Error::Config("style_dim must be positive".into()));
        }
        if self.rgb_channels != 3 {
            return Err(Error::Config(format!("rgb_channels must be 3, got {}", self.rgb_channels)));
        }
        Ok(())
    }
}

fn levels_for(resolution: usize) -> usize {
    (resolution.max(4).trailing_zeros() as usize).saturating_sub(1)
}

/// The W+ code: one style vector per synthesis layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    layers: usize,
    dim: usize,
    values: Vec<f64>,
}

impl StyleCode {
    pub fn new(layers: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * dim {
            return Err(Error::contract(format!(
                "style code of {} values cannot be {layers}x{dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("style code contains non-finite entries"));
        }
        Ok(Self { layers, dim, values })
    }

    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self {
            layers,
            dim,
            values: vec![0.0; layers * dim],
        }
    }

    /// Repeats one style vector across all layers.
    pub fn broadcast(vector: &[f64], layers: usize) -> Self {
        let mut values = Vec::with_capacity(layers * vector.len());
        for _ in 0..layers {
            values.extend_from_slice(vector);
        }
        Self {
            layers,
            dim: vector.len(),
            values,
        }
    }

    /// Entries drawn independently from `U[-1, 1]`.
    pub fn uniform(layers: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..layers * dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { layers, dim, values }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Style vector of a 0-based layer row.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `(1 - t)·a + t·b`.
    pub fn lerp(a: &StyleCode, b: &StyleCode, t: f64) -> StyleCode {
        let values = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect();
        StyleCode {
            layers: a.layers,
            dim: a.dim,
            values,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One single-channel noise map.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMap {
    pub side: usize,
    pub data: Vec<f64>,
}

/// The noise-space variables: two maps per resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    maps: Vec<NoiseMap>,
}

impl NoiseBank {
    pub fn new(maps: Vec<NoiseMap>) -> Result<Self> {
        for (i, m) in maps.iter().enumerate() {
            if m.data.len() != m.side * m.side {
                return Err(Error::contract(format!("noise map {} is not {}x{}", i + 1, m.side, m.side)));
            }
        }
        Ok(Self { maps })
    }

    pub fn zeros(config: &GeneratorConfig) -> Self {
        let maps = (1..=config.num_layers())
            .map(|l| {
                let side = config.layer_side(l);
                NoiseMap {
                    side,
                    data: vec![0.0; side * side],
                }
            })
            .collect();
        Self { maps }
    }

    /// Standard-normal maps drawn from a seeded stream.
    pub fn standard_normal(config: &GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = Self::zeros(config);
        for m in &mut bank.maps {
            m.data.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        }
        bank
    }

    pub fn maps(&self) -> &[NoiseMap] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [NoiseMap] {
        &mut self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().all(|m| m.data.iter().all(|v| v.is_finite()))
    }
}

/// The output of one synthesis layer (1-based index).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub layer: usize,
    pub data: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
struct SynthesisLayer {
    channels: usize,
    conv: Option<Conv3x3>,
    upsample: bool,
    noise_strength: Vec<f64>,
    bias: Vec<f64>,
    /// `2C × style_dim`: modulation scale rows first, then shift rows.
    style_weight: Vec<f64>,
    style_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Synthesis network plus the small mapping network used for the mean latent.
/// Weights are immutable once built, so a `Generator` can be shared freely
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    constant: Tensor3,
    layers: Vec<SynthesisLayer>,
    to_rgb: Vec<Conv1x1>,
    mapping: Vec<DenseLayer>,
    stored_mean_latent: Option<Vec<f64>>,
}

struct LayerCache {
    positive: Vec<bool>,
    normalized: Tensor3,
    inv_std: Vec<f64>,
    scale: Vec<f64>,
}

/// Intermediate values retained by a forward pass for backpropagation.
pub struct SynthesisTrace {
    first_layer: usize,
    caches: Vec<LayerCache>,
}

/// Gradients of a scalar function of the image.
#[derive(Debug, Clone)]
pub struct SynthesisGradients {
    /// Same layout as [`StyleCode::values`].
    pub w: Vec<f64>,
    /// One entry per noise map, same layout as [`NoiseMap::data`].
    pub noise: Vec<Vec<f64>>,
    /// Gradient with respect to an injected activation, when one was used.
    pub injected: Option<Tensor3>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Weights are kept f32-representable so a saved container reloads exactly.
    let v: f64 = StandardNormal.sample(rng);
    (v * std) as f32 as f64
}

fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LRELU_SLOPE * v
    }
}

impl Generator {
    /// Builds a generator with deterministically seeded random weights.
    pub fn init_toy(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.style_dim;
        let c0 = config.channel_schedule[0];
        let constant = Tensor3::from_vec(c0, 4, 4, (0..c0 * 16).map(|_| normal(&mut rng, 1.0)).collect())?;

        let mut layers = Vec::with_capacity(config.num_layers());
        for l in 1..=config.num_layers() {
            let channels = config.layer_channels(l);
            let conv = (l > 1).then(|| {
                let in_channels = if l % 2 == 1 { config.layer_channels(l - 2) } else { channels };
                let std = (2.0 / (in_channels * 9) as f64).sqrt();
                Conv3x3 {
                    in_channels,
                    out_channels: channels,
                    weight: (0..channels * in_channels * 9).map(|_| normal(&mut rng, std)).collect(),
                    bias: None,
                }
            });
            let noise_strength = (0..channels)
                .map(|_| rng.random_range(0.05f64..0.25) as f32 as f64)
                .collect();
            let bias = (0..channels).map(|_| normal(&mut rng, 0.1)).collect();
            let style_std = (1.0 / d as f64).sqrt();
            let style_weight = (0..2 * channels * d).map(|_| normal(&mut rng, style_std)).collect();
            layers.push(SynthesisLayer {
                channels,
                conv,
                upsample: l > 1 && l % 2 == 1,
                noise_strength,
                bias,
                style_weight,
                style_bias: vec![0.0; 2 * channels],
            });
        }

        let to_rgb = config
            .channel_schedule
            .iter()
            .map(|&c| {
                let std = 0.4 / (c as f64).sqrt();
                Conv1x1 {
                    in_channels: c,
                    out_channels: 3,
                    weight: (0..3 * c).map(|_| normal(&mut rng, std)).collect(),
                    bias: vec![0.0; 3],
                }
            })
            .collect();

        let mapping = (0..2)
            .map(|_| {
                let std = (2.0 / d as f64).sqrt();
                DenseLayer {
                    weight: (0..d * d).map(|_| normal(&mut rng, std)).collect(),
                    bias: vec![0.0; d],
                }
            })
            .collect();

        Ok(Self {
            config,
            constant,
            layers,
            to_rgb,
            mapping,
            stored_mean_latent: None,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn resolution(&self) -> usize {
        self.config.output_resolution
    }

    pub fn style_dim(&self) -> usize {
        self.config.style_dim
    }

    /// `(channels, height, width)` of a 1-based layer's activation.
    pub fn activation_shape(&self, layer: usize) -> Result<(usize, usize, usize)> {
        self.check_layer(layer)?;
        let side = self.config.layer_side(layer);
        Ok((self.config.layer_channels(layer), side, side))
    }

    /// Replaces the noise strength of one layer; test fixtures use this to
    /// switch a noise input off.
    pub fn with_noise_strength(mut self, layer: usize, value: f64) -> Result<Self> {
        self.check_layer(layer)?;
        self.layers[layer - 1].noise_strength.iter_mut().for_each(|s| *s = value);
        Ok(self)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::contract(format!(
                "layer {layer} out of range 1..={}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, w: &StyleCode, n: &NoiseBank) -> Result<()> {
        if w.layers() != self.layers.len() || w.dim() != self.config.style_dim {
            return Err(Error::contract(format!(
                "style code is {}x{}, generator expects {}x{}",
                w.layers(),
                w.dim(),
                self.layers.len(),
                self.config.style_dim
            )));
        }
        if n.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "noise bank has {} maps, generator expects {}",
                n.len(),
                self.layers.len()
            )));
        }
        for (i, m) in n.maps().iter().enumerate() {
            let side = self.config.layer_side(i + 1);
            if m.side != side {
                return Err(Error::contract(format!(
                    "noise map {} is {}x{}, expected {side}x{side}",
                    i + 1,
                    m.side,
                    m.side
                )));
            }
        }
        Ok(())
    }

    fn style_vector(&self, i: usize, w: &StyleCode) -> Vec<f64> {
        let layer = &self.layers[i];
        let d = self.config.style_dim;
        let row = w.row(i);
        layer
            .style_weight
            .chunks_exact(d)
            .zip(&layer.style_bias)
            .map(|(a, b)| a.iter().zip(row).map(|(x, y)| x * y).sum::<f64>() + b)
            .collect()
    }

    /// Runs layer `i` (0-based) on the previous activation.
    fn layer_forward(
        &self,
        i: usize,
        prev: Option<&Tensor3>,
        w: &StyleCode,
        n: &NoiseBank,
        caches: Option<&mut Vec<LayerCache>>,
    ) -> Tensor3 {
        let layer = &self.layers[i];
        let mut x = match (&layer.conv, prev) {
            (None, _) => self.constant.clone(),
            (Some(conv), Some(prev)) => {
                if layer.upsample {
                    conv.forward(&upsample2x(prev))
                } else {
                    conv.forward(prev)
                }
            }
            (Some(_), None) => unreachable!("layer {} needs an input", i + 1),
        };
        let noise = &n.maps()[i].data;
        for c in 0..layer.channels {
            let (s, b) = (layer.noise_strength[c], layer.bias[c]);
            for (v, z) in x.plane_mut(c).iter_mut().zip(noise) {
                *v += s * z + b;
            }
        }
        let positive: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
        x.data.iter_mut().for_each(|v| *v = lrelu(*v));

        let hw = x.plane_len() as f64;
        let mut inv_std = vec![0.0; layer.channels];
        for c in 0..layer.channels {
            let plane = x.plane_mut(c);
            let mean = plane.iter().sum::<f64>() / hw;
            plane.iter_mut().for_each(|v| *v -= mean);
            let var = plane.iter().map(|v| v * v).sum::<f64>() / hw;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v *= r);
            inv_std[c] = r;
        }

        let style = self.style_vector(i, w);
        let scale: Vec<f64> = style[..layer.channels].iter().map(|s| 1.0 + s).collect();
        let mut out = x.clone();
        for c in 0..layer.channels {
            let (a, b) = (scale[c], style[layer.channels + c]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = *v * a + b);
        }
        if let Some(caches) = caches {
            caches.push(LayerCache {
                positive,
                normalized: x,
                inv_std,
                scale,
            });
        }
        out
    }

    fn run(
        &self,
        w: &StyleCode,
        n: &NoiseBank,
        injection: Option<&ActivationTensor>,
        stop_after: Option<usize>,
        mut caches: Option<&mut Vec<LayerCache>>,
    ) -> Tensor3 {
        let (first, mut act) = match injection {
            Some(t) => (t.layer, Some(t.data.clone())),
            None => (0, None),
        };
        let last = stop_after.unwrap_or(self.layers.len());
        for i in first..last {
            let out = self.layer_forward(i, act.as_ref(), w, n, caches.as_deref_mut());
            act = Some(out);
        }
        act.expect("at least one layer runs")
    }

    fn to_image(&self, act: &Tensor3) -> ImageBuffer {
        let mut rgb = self.to_rgb.last().expect("at least one level").forward(act);
        rgb.data.iter_mut().for_each(|v| *v = (*v + 1.0) * 0.5);
        ImageBuffer::from_chw(&rgb).expect("toRGB emits three channels")
    }

    fn check_injection(&self, t: &ActivationTensor) -> Result<()> {
        let shape = self.activation_shape(t.layer)?;
        if t.data.shape() != shape {
            return Err(Error::contract(format!(
                "activation for layer {} is {:?}, expected {:?}",
                t.layer,
                t.data.shape(),
                shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, w: &StyleCode, n: &NoiseBank) -> Result<ImageBuffer> {
        self.check_inputs(w, n)?;
        Ok(self.to_image(&self.run(w, n, None, None, None)))
    }

    /// The activation produced by a 1-based layer during [`Generator::forward`].
    pub fn tap_activation(&self, w: &StyleCode, n: &NoiseBank, layer: usize) -> Result<ActivationTensor> {
        self.check_inputs(w, n)?;
        self.check_layer(layer)?;
        Ok(ActivationTensor {
            layer,
            data: self.run(w, n, None, Some(layer), None),
        })
    }

    /// Forward pass with the output of `t.layer` replaced by `t`.
    pub fn forward_with_injection(&self, w: &StyleCode, n: &NoiseBank, t: &ActivationTensor) -> Result<ImageBuffer> {
        self.check_inputs(w, n)?;
        self.check_injection(t)?;
        Ok(self.to_image(&self.run(w, n, Some(t), None, None)))
    }

    /// Forward pass that records what [`Generator::backward`] needs.
    pub fn forward_traced(
        &self,
        w: &StyleCode,
        n: &NoiseBank,
        injection: Option<&ActivationTensor>,
    ) -> Result<(ImageBuffer, SynthesisTrace)> {
        self.check_inputs(w, n)?;
        if let Some(t) = injection {
            self.check_injection(t)?;
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let act = self.run(w, n, injection, None, Some(&mut caches));
        let trace = SynthesisTrace {
            first_layer: injection.map_or(0, |t| t.layer),
            caches,
        };
        Ok((self.to_image(&act), trace))
    }

    /// Backpropagates `grad_image` (interleaved like [`ImageBuffer::pixels`])
    /// to the style code, the noise maps and any injected activation.
    pub fn backward(&self, trace: &SynthesisTrace, grad_image: &[f64]) -> SynthesisGradients {
        let r = self.config.output_resolution;
        let d = self.config.style_dim;
        let mut grad_w = vec![0.0; self.layers.len() * d];
        let mut grad_noise: Vec<Vec<f64>> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, _)| vec![0.0; self.config.layer_side(i + 1).pow(2)])
            .collect();

        let hw = r * r;
        let mut grad_rgb = Tensor3::zeros(3, r, r);
        for p in 0..hw {
            for c in 0..3 {
                grad_rgb.data[c * hw + p] = 0.5 * grad_image[p * 3 + c];
            }
        }
        let mut grad = self.to_rgb.last().expect("at least one level").backward_input(&grad_rgb);

        for (offset, cache) in trace.caches.iter().enumerate().rev() {
            let i = trace.first_layer + offset;
            let layer = &self.layers[i];
            let channels = layer.channels;
            let plane_len = grad.plane_len() as f64;

            // Modulation.
            let mut grad_style = vec![0.0; 2 * channels];
            for c in 0..channels {
                let g = grad.plane(c);
                let xh = cache.normalized.plane(c);
                grad_style[c] = g.iter().zip(xh).map(|(a, b)| a * b).sum();
                grad_style[channels + c] = g.iter().sum();
            }
            let gw = &mut grad_w[i * d..(i + 1) * d];
            for (row, gs) in layer.style_weight.chunks_exact(d).zip(&grad_style) {
                gw.iter_mut().zip(row).for_each(|(acc, a)| *acc += gs * a);
            }

            // Instance normalization and leaky ReLU.
            for c in 0..channels {
                let scale = cache.scale[c];
                let xh = cache.normalized.plane(c);
                let g = grad.plane_mut(c);
                g.iter_mut().for_each(|v| *v *= scale);
                let mean_g = g.iter().sum::<f64>() / plane_len;
                let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / plane_len;
                let r = cache.inv_std[c];
                for (v, x) in g.iter_mut().zip(xh) {
                    *v = r * (*v - mean_g - x * mean_gx);
                }
            }
            for (v, &pos) in grad.data.iter_mut().zip(&cache.positive) {
                if !pos {
                    *v *= LRELU_SLOPE;
                }
            }

            // Noise injection.
            let gn = &mut grad_noise[i];
            for c in 0..channels {
                let s = layer.noise_strength[c];
                gn.iter_mut().zip(grad.plane(c)).for_each(|(acc, g)| *acc += s * g);
            }

            // Convolution and upsampling.
            match &layer.conv {
                Some(conv) => {
                    let g = conv.backward_input(&grad);
                    grad = if layer.upsample { upsample2x_adjoint(&g) } else { g };
                }
                None => grad = Tensor3::zeros(0, 0, 0),
            }
        }

        SynthesisGradients {
            w: grad_w,
            noise: grad_noise,
            injected: (trace.first_layer > 0).then_some(grad),
        }
    }

    /// Output of the mapping network for one latent `z`.
    pub fn map(&self, z: &[f64]) -> Vec<f64> {
        let d = self.config.style_dim;
        let norm = (z.iter().map(|v| v * v).sum::<f64>() / d as f64 + 1e-8).sqrt();
        let mut x: Vec<f64> = z.iter().map(|v| v / norm).collect();
        for layer in &self.mapping {
            x = layer
                .weight
                .chunks_exact(d)
                .zip(&layer.bias)
                .map(|(row, b)| lrelu(row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b))
                .collect();
        }
        x
    }

    /// A W+ code from one mapped random latent, repeated over all layers.
    pub fn sample_style(&self, seed: u64) -> StyleCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..self.config.style_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        StyleCode::broadcast(&self.map(&z), self.layers.len())
    }

    /// The mean latent: the container's stored value when present, otherwise
    /// the average of `num_samples` mapped latents from a fixed seed.
    pub fn mean_latent(&self, num_samples: usize) -> StyleCode {
        match &self.stored_mean_latent {
            Some(v) => StyleCode::broadcast(v, self.layers.len()),
            None => self.mean_latent_seeded(num_samples, MEAN_LATENT_SEED),
        }
    }

    pub fn mean_latent_seeded(&self, num_samples: usize, seed: u64) -> StyleCode {
        let d = self.config.style_dim;
        let n = num_samples.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; d];
        let mut z = vec![0.0; d];
        for _ in 0..n {
            z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            acc.iter_mut().zip(self.map(&z)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        StyleCode::broadcast(&acc, self.layers.len())
    }

    pub fn stored_mean_latent(&self) -> Option<&[f64]> {
        self.stored_mean_latent.as_deref()
    }

    pub fn with_stored_mean_latent(mut self, mean: Vec<f64>) -> Result<Self> {
        if mean.len() != self.config.style_dim {
            return Err(Error::contract("mean latent length must equal style_dim"));
        }
        self.stored_mean_latent = Some(mean);
        Ok(self)
    }

    pub fn to_container(&self) -> Container {
        let cfg = &self.config;
        let d = cfg.style_dim;
        let mut c = Container::new(
            GENERATOR_MAGIC,
            [cfg.output_resolution as u32, d as u32, cfg.num_layers() as u32],
        );
        let k = &self.constant;
        c.push(NamedTensor::from_f64("synthesis/const", vec![k.channels, 4, 4], &k.data));
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("synthesis/layer{}", i + 1);
            if let Some(conv) = &layer.conv {
                c.push(NamedTensor::from_f64(
                    format!("{p}/conv/weight"),
                    vec![conv.out_channels, conv.in_channels, 3, 3],
                    &conv.weight,
                ));
            }
            c.push(NamedTensor::from_f64(format!("{p}/noise_strength"), vec![layer.channels], &layer.noise_strength));
            c.push(NamedTensor::from_f64(format!("{p}/bias"), vec![layer.channels], &layer.bias));
            c.push(NamedTensor::from_f64(format!("{p}/style/weight"), vec![2 * layer.channels, d], &layer.style_weight));
            c.push(NamedTensor::from_f64(format!("{p}/style/bias"), vec![2 * layer.channels], &layer.style_bias));
        }
        for (k, rgb) in self.to_rgb.iter().enumerate() {
            c.push(NamedTensor::from_f64(format!("synthesis/torgb{}/weight", k + 1), vec![3, rgb.in_channels], &rgb.weight));
            c.push(NamedTensor::from_f64(format!("synthesis/torgb{}/bias", k + 1), vec![3], &rgb.bias));
        }
        for (j, fc) in self.mapping.iter().enumerate() {
            c.push(NamedTensor::from_f64(format!("mapping/fc{j}/weight"), vec![d, d], &fc.weight));
            c.push(NamedTensor::from_f64(format!("mapping/fc{j}/bias"), vec![d], &fc.bias));
        }
        if let Some(mean) = &self.stored_mean_latent {
            c.push(NamedTensor::from_f64("mean_latent", vec![d], mean));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let [resolution, style_dim, layer_count] = c.header.map(|v| v as usize);
        let levels = levels_for(resolution);
        let mut channel_schedule = Vec::with_capacity(levels);
        for k in 1..=levels {
            let name = format!("synthesis/layer{}/bias", 2 * k);
            let t = c.find(&name).ok_or_else(|| Error::Load {
                tensor: name.clone(),
                reason: "missing from container".into(),
            })?;
            channel_schedule.push(t.dims.first().copied().unwrap_or(0));
        }
        let config = GeneratorConfig {
            output_resolution: resolution,
            style_dim,
            channel_schedule,
            rgb_channels: 3,
            seed: 0,
        };
        config.validate()?;
        if config.num_layers() != layer_count {
            return Err(Error::Load {
                tensor: "header".into(),
                reason: format!("layer count {layer_count} does not match resolution {resolution}"),
            });
        }
        let d = style_dim;
        let c0 = config.channel_schedule[0];
        let constant = Tensor3::from_vec(c0, 4, 4, c.tensor("synthesis/const", &[c0, 4, 4])?)?;
        let mut layers = Vec::with_capacity(layer_count);
        for l in 1..=layer_count {
            let p = format!("synthesis/layer{l}");
            let channels = config.layer_channels(l);
            let conv = if l > 1 {
                let in_channels = if l % 2 == 1 { config.layer_channels(l - 2) } else { channels };
                Some(Conv3x3 {
                    in_channels,
                    out_channels: channels,
                    weight: c.tensor(&format!("{p}/conv/weight"), &[channels, in_channels, 3, 3])?,
                    bias: None,
                })
            } else {
                None
            };
            layers.push(SynthesisLayer {
                channels,
                conv,
                upsample: l > 1 && l % 2 == 1,
                noise_strength: c.tensor(&format!("{p}/noise_strength"), &[channels])?,
                bias: c.tensor(&format!("{p}/bias"), &[channels])?,
                style_weight: c.tensor(&format!("{p}/style/weight"), &[2 * channels, d])?,
                style_bias: c.tensor(&format!("{p}/style/bias"), &[2 * channels])?,
            });
        }
        let mut to_rgb = Vec::with_capacity(levels);
        for (k, &ch) in config.channel_schedule.iter().enumerate() {
            to_rgb.push(Conv1x1 {
                in_channels: ch,
                out_channels: 3,
                weight: c.tensor(&format!("synthesis/torgb{}/weight", k + 1), &[3, ch])?,
                bias: c.tensor(&format!("synthesis/torgb{}/bias", k + 1), &[3])?,
            });
        }
        let mut mapping = Vec::new();
        for j in 0.. {
            let name = format!("mapping/fc{j}/weight");
            if c.find(&name).is_none() {
                break;
            }
            mapping.push(DenseLayer {
                weight: c.tensor(&name, &[d, d])?,
                bias: c.tensor(&format!("mapping/fc{j}/bias"), &[d])?,
            });
        }
        let stored_mean_latent = match c.find("mean_latent") {
            Some(_) => Some(c.tensor("mean_latent", &[d])?),
            None => None,
        };
        Ok(Self {
            config,
            constant,
            layers,
            to_rgb,
            mapping,
            stored_mean_latent,
        })
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, GENERATOR_MAGIC)?)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(resolution: usize) -> Generator {
        Generator::init_toy(GeneratorConfig::toy(resolution).with_style_dim(16).with_seed(3)).unwrap()
    }

    #[test]
    fn layer_count_law() {
        for (r, l) in [(8, 4), (16, 6), (32, 8), (64, 10), (1024, 18)] {
            let cfg = GeneratorConfig::toy(r);
            assert_eq!(cfg.num_layers(), l);
            assert_eq!(NoiseBank::zeros(&cfg).len(), l);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Generator::init_toy(GeneratorConfig::toy(4)).is_err());
        assert!(Generator::init_toy(GeneratorConfig::toy(48)).is_err());
        let mut cfg = GeneratorConfig::toy(32);
        cfg.channel_schedule.pop();
        assert!(matches!(Generator::init_toy(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn layer_sides_follow_levels() {
        let cfg = GeneratorConfig::full();
        assert_eq!(cfg.layer_side(1), 4);
        assert_eq!(cfg.layer_side(2), 4);
        assert_eq!(cfg.layer_side(4), 8);
        assert_eq!(cfg.layer_side(5), 16);
        assert_eq!(cfg.layer_side(18), 1024);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let g = small(16);
        let w = StyleCode::zeros(5, 16);
        let n = NoiseBank::zeros(g.config());
        assert!(matches!(g.forward(&w, &n), Err(Error::Contract(_))));
        assert!(g.tap_activation(&g.mean_latent(4), &n, 7).is_err());
        assert!(g.tap_activation(&g.mean_latent(4), &n, 0).is_err());
    }

    #[test]
    fn last_layer_tap_has_full_resolution() {
        let g = small(16);
        let n = NoiseBank::standard_normal(g.config(), 1);
        let t = g.tap_activation(&g.mean_latent(4), &n, 6).unwrap();
        assert_eq!((t.data.height, t.data.width), (16, 16));
    }

    #[test]
    fn mean_latent_of_one_sample_is_that_sample() {
        let g = small(16);
        let mean = g.mean_latent_seeded(1, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sample = g.map(&z);
        for l in 0..g.num_layers() {
            assert_eq!(mean.row(l), &sample[..]);
        }
    }
}
