//! End-user editing pipelines built from the embedding blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::blocks::{
    blend_activations, composed_w_opt, i_att, mk_n, w_l, Context, Networks, WTerm, INPAINT_MK_N_WEIGHT, MK_N_WEIGHT,
};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::Mask;
use crate::metrics::psnr;
use crate::optim::{OptimizerConfig, Progress, StageRecord, VariableMask};
use crate::synthesis::{Generator, NoiseBank, StyleCode};

/// Iteration counts of the full-scale pipelines.
pub mod iterations {
    pub const EMBED_W: usize = 5000;
    pub const EMBED_N: usize = 3000;
    pub const EDIT_W: usize = 1000;
    pub const EDIT_N: usize = 1000;
    pub const INPAINT_W: usize = 200;
    pub const INPAINT_N: usize = 1000;
}

/// Divisor applied to every iteration count in toy mode.
pub const TOY_ITERATION_DIVISOR: usize = 5;

pub const EMBED_LR: f64 = 0.01;
pub const GD_LR: f64 = 0.8;
pub const NOISE_LR: f64 = 5.0;
pub const SCRIBBLE_LR: f64 = 0.1;
pub const SCRIBBLE_LAYERS: usize = 5;
pub const SCRIBBLE_ANCHOR: f64 = 1e-6;
pub const ATTRIBUTE_LAYER: usize = 4;
pub const CHANNEL_AVERAGE_LAYER: usize = 6;
pub const INPAINT_OFFSET: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// The generator's mean latent.
    Face,
    /// Entries drawn from `U[−1, 1]`.
    Random,
}

/// Layers enabled for inpainting: the first half of the style layers and
/// the last two.
pub fn inpaint_layers(num_layers: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=num_layers / 2).collect();
    for l in num_layers.saturating_sub(1).max(1)..=num_layers {
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

/// Shared state of one pipeline run: networks, seeds, iteration scaling and
/// the progress sink. Finished stages are appended to `stages`.
pub struct Pipeline<'a, 'p> {
    pub nets: Networks<'a>,
    pub seed: u64,
    pub divisor: usize,
    pub progress_stride: usize,
    pub stages: Vec<StageRecord>,
    progress: &'p mut dyn FnMut(&str, Progress),
}

impl<'a, 'p> Pipeline<'a, 'p> {
    pub fn new(nets: Networks<'a>, seed: u64, divisor: usize, progress: &'p mut dyn FnMut(&str, Progress)) -> Self {
        Self {
            nets,
            seed,
            divisor: divisor.max(1),
            progress_stride: crate::optim::DEFAULT_PROGRESS_STRIDE,
            stages: Vec::new(),
            progress,
        }
    }

    fn g(&self) -> &'a Generator {
        self.nets.generator
    }

    fn scaled(&self, iterations: usize) -> usize {
        (iterations / self.divisor).max(1)
    }

    pub fn adam(&self, lr: f64, iterations: usize) -> OptimizerConfig {
        OptimizerConfig::adam(lr, self.scaled(iterations)).with_progress_stride(self.progress_stride)
    }

    pub fn gd(&self, lr: f64, iterations: usize) -> OptimizerConfig {
        OptimizerConfig::gd(lr, self.scaled(iterations)).with_progress_stride(self.progress_stride)
    }

    /// Fresh standard-normal noise for this run's seed.
    pub fn noise_ini(&self) -> NoiseBank {
        NoiseBank::standard_normal(self.g().config(), self.seed)
    }

    pub fn initial_code(&self, init: Init) -> StyleCode {
        let g = self.g();
        match init {
            Init::Face => g.mean_latent(crate::synthesis::MEAN_LATENT_SAMPLES),
            Init::Random => StyleCode::uniform(g.num_layers(), g.style_dim(), self.seed ^ 0x5eed),
        }
    }

    fn check_image(&self, img: &ImageBuffer, what: &str) -> Result<()> {
        let r = self.g().resolution();
        if img.height() != r || img.width() != r {
            return Err(Error::contract(format!(
                "{what} is {}x{}, generator produces {r}x{r}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, m: &Mask, what: &str) -> Result<()> {
        let r = self.g().resolution();
        m.ensure_size(r, r, what)
    }

    fn record(&mut self, name: &str, w: &StyleCode, n: &NoiseBank, reference: &ImageBuffer, final_loss: f64) -> Result<ImageBuffer> {
        let img = self.g().forward(w, n)?;
        self.stages.push(StageRecord {
            name: name.to_string(),
            psnr: psnr(&img, reference, 1.0)?,
            final_loss,
        });
        Ok(img)
    }

    fn optimize_w(&mut self, stage: &str, terms: &[WTerm], vmask: &VariableMask, w_ini: &StyleCode, n: &NoiseBank, cfg: &OptimizerConfig) -> Result<(StyleCode, f64)> {
        let mut last = f64::NAN;
        let progress = &mut *self.progress;
        let w = composed_w_opt(self.nets, terms, vmask, w_ini, n, cfg, &mut |p| {
            last = p.loss;
            progress(stage, p)
        })?;
        Ok((w, last))
    }

    #[allow(clippy::too_many_arguments)]
    fn optimize_n(&mut self, stage: &str, m: &Mask, w: &StyleCode, n_ini: &NoiseBank, x: &ImageBuffer, y: &ImageBuffer, lambda_x: f64, cfg: &OptimizerConfig) -> Result<(NoiseBank, f64)> {
        let mut last = f64::NAN;
        let progress = &mut *self.progress;
        let n = mk_n(self.nets, m, w, n_ini, x, y, lambda_x, cfg, &mut |p| {
            last = p.loss;
            progress(stage, p)
        })?;
        Ok((n, last))
    }

    /// Style code embedding of `img` with all masks set to one.
    pub fn embed_w(&mut self, stage: &str, img: &ImageBuffer, init: Init, n_ini: &NoiseBank, iterations: usize) -> Result<StyleCode> {
        self.check_image(img, "embedding target")?;
        let ones = Mask::ones(self.g().resolution());
        let w_ini = self.initial_code(init);
        let cfg = self.adam(EMBED_LR, iterations);
        let mut last = f64::NAN;
        let progress = &mut *self.progress;
        let w = w_l(self.nets, &ones, &ones, &VariableMask::w_only(self.nets.layers()), &w_ini, n_ini, img, &cfg, &mut |p| {
            last = p.loss;
            progress(stage, p)
        })?;
        self.record(stage, &w, n_ini, img, last)?;
        Ok(w)
    }

    /// Style code embedding followed by noise embedding.
    pub fn reconstruct(&mut self, img: &ImageBuffer, init: Init, w_iterations: usize, n_iterations: usize) -> Result<(StyleCode, NoiseBank, ImageBuffer)> {
        let n_ini = self.noise_ini();
        let w = self.embed_w("w", img, init, &n_ini, w_iterations)?;
        let ones = Mask::ones(self.g().resolution());
        let zero = ImageBuffer::filled(img.height(), img.width(), 0.0);
        let cfg = self.adam(NOISE_LR, n_iterations);
        let (n, last) = self.optimize_n("n", &ones, &w, &n_ini, img, &zero, MK_N_WEIGHT, &cfg)?;
        let out = self.record("n", &w, &n, img, last)?;
        Ok((w, n, out))
    }

    /// Copies the region of `y` outside `m_blur` into `x`.
    pub fn crossover(&mut self, x: &ImageBuffer, y: &ImageBuffer, m_blur: &Mask, embed_iterations: usize, w_iterations: usize, n_iterations: usize) -> Result<(StyleCode, NoiseBank, ImageBuffer)> {
        self.check_image(y, "second image")?;
        self.check_mask(m_blur, "crossover mask")?;
        let n_ini = self.noise_ini();
        let w_star = self.embed_w("embed", x, Init::Face, &n_ini, embed_iterations)?;
        let inv = m_blur.complement();
        let terms = [
            WTerm::Reconstruction {
                m_p: m_blur.clone(),
                m_m: m_blur.clone(),
                target: x.clone(),
            },
            WTerm::Reconstruction {
                m_p: inv.clone(),
                m_m: inv,
                target: y.clone(),
            },
        ];
        let cfg = self.adam(EMBED_LR, w_iterations);
        let (w, last) = self.optimize_w("w", &terms, &VariableMask::w_only(self.nets.layers()), &w_star, &n_ini, &cfg)?;
        self.record("w", &w, &n_ini, x, last)?;
        let cfg = self.adam(NOISE_LR, n_iterations);
        let (n, last) = self.optimize_n("n", m_blur, &w, &n_ini, x, y, MK_N_WEIGHT, &cfg)?;
        let out = self.record("n", &w, &n, x, last)?;
        Ok((w, n, out))
    }

    /// Fills the region where `m` is one. `m_blur_plus` is the enlarged
    /// blending mask. `offset_seed` perturbs the initial code.
    #[allow(clippy::too_many_arguments)]
    pub fn inpaint(&mut self, i_def: &ImageBuffer, m: &Mask, m_blur_plus: &Mask, init: Init, offset_seed: Option<u64>, w_iterations: usize, n_iterations: usize) -> Result<(StyleCode, NoiseBank, ImageBuffer)> {
        self.check_image(i_def, "defective image")?;
        self.check_mask(m, "defect mask")?;
        self.check_mask(m_blur_plus, "blending mask")?;
        if m.is_all(1.0) {
            return Err(Error::contract("defect mask covers the whole image; nothing is left to anchor the embedding"));
        }
        let mut w_ini = self.initial_code(init);
        if let Some(seed) = offset_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Uniform::new_inclusive(-INPAINT_OFFSET, INPAINT_OFFSET).expect("valid range");
            w_ini.values_mut().iter_mut().for_each(|v| *v += dist.sample(&mut rng));
        }
        let n_ini = self.noise_ini();
        let known = m.complement();
        let layers = self.nets.layers();
        let vmask = VariableMask::w_layers(layers, inpaint_layers(layers));
        let terms = [WTerm::Reconstruction {
            m_p: known.clone(),
            m_m: known,
            target: i_def.clone(),
        }];
        let cfg = self.gd(GD_LR, w_iterations);
        let (w, last) = self.optimize_w("w", &terms, &vmask, &w_ini, &n_ini, &cfg)?;
        let rendered = self.record("w", &w, &n_ini, i_def, last)?;
        let cfg = self.adam(NOISE_LR, n_iterations);
        let (n, last) = self.optimize_n("n", &m_blur_plus.complement(), &w, &n_ini, i_def, &rendered, INPAINT_MK_N_WEIGHT, &cfg)?;
        let out = self.record("n", &w, &n, i_def, last)?;
        Ok((w, n, out))
    }

    /// Embeds a scribbled image into the first `k` style layers, pulled
    /// toward the unscribbled code `w_star`.
    #[allow(clippy::too_many_arguments)]
    pub fn scribble(&mut self, i_scr: &ImageBuffer, w_star: &StyleCode, m_blur: &Mask, k: usize, anchor: f64, w_iterations: usize, n_iterations: usize) -> Result<(StyleCode, NoiseBank, ImageBuffer)> {
        self.check_image(i_scr, "scribbled image")?;
        self.check_mask(m_blur, "scribble mask")?;
        let layers = self.nets.layers();
        if k == 0 || k > layers {
            return Err(Error::contract(format!("scribble layer count {k} is outside 1..={layers}")));
        }
        let n_ini = self.noise_ini();
        let ones = Mask::ones(self.g().resolution());
        let terms = [
            WTerm::Reconstruction {
                m_p: ones.clone(),
                m_m: ones,
                target: i_scr.clone(),
            },
            WTerm::Anchor {
                weight: anchor,
                reference: w_star.clone(),
            },
        ];
        let cfg = self.adam(SCRIBBLE_LR, w_iterations);
        let (w, last) = self.optimize_w("w", &terms, &VariableMask::w_layers(layers, 1..=k), w_star, &n_ini, &cfg)?;
        let rendered = self.record("w", &w, &n_ini, i_scr, last)?;
        let cfg = self.adam(NOISE_LR, n_iterations);
        let (n, last) = self.optimize_n("n", m_blur, &w, &n_ini, i_scr, &rendered, MK_N_WEIGHT, &cfg)?;
        let out = self.record("n", &w, &n, i_scr, last)?;
        Ok((w, n, out))
    }

    /// Keeps `i1` inside `m_blur` and moves the rest toward the style of `i2`.
    pub fn local_style(&mut self, i1: &ImageBuffer, i2: &ImageBuffer, m_blur: &Mask, embed_iterations: usize, w_iterations: usize, n_iterations: usize) -> Result<(StyleCode, NoiseBank, ImageBuffer)> {
        self.check_image(i2, "style image")?;
        self.check_mask(m_blur, "style mask")?;
        let n_ini = self.noise_ini();
        let w_star = self.embed_w("embed", i1, Init::Face, &n_ini, embed_iterations)?;
        let terms = [
            WTerm::Reconstruction {
                m_p: m_blur.clone(),
                m_m: m_blur.clone(),
                target: i1.clone(),
            },
            WTerm::Style {
                m_s: m_blur.complement(),
                target: i2.clone(),
            },
        ];
        let cfg = self.adam(EMBED_LR, w_iterations);
        let (w, last) = self.optimize_w("w", &terms, &VariableMask::w_only(self.nets.layers()), &w_star, &n_ini, &cfg)?;
        let rendered = self.record("w", &w, &n_ini, i1, last)?;
        let cfg = self.adam(NOISE_LR, n_iterations);
        let (n, last) = self.optimize_n("n", m_blur, &w, &n_ini, i1, &rendered, MK_N_WEIGHT, &cfg)?;
        let out = self.record("n", &w, &n, i1, last)?;
        Ok((w, n, out))
    }
}

/// Layer-4 blend of `w1`'s activations inside `m_s` with `w2`'s outside,
/// synthesized under `w1`.
pub fn attribute_transfer(g: &Generator, w1: &StyleCode, w2: &StyleCode, n: &NoiseBank, m_s: &Mask) -> Result<ImageBuffer> {
    i_att(g, m_s, m_s, Context { w: w1, n }, Context { w: w2, n }, w1, n, ATTRIBUTE_LAYER)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleSource {
    First,
    Second,
}

/// Sum of both images' layer-6 activations, synthesized under the chosen code.
pub fn channel_average(g: &Generator, w1: &StyleCode, w2: &StyleCode, n: &NoiseBank, style: StyleSource) -> Result<ImageBuffer> {
    let side = g.resolution();
    let w = match style {
        StyleSource::First => w1,
        StyleSource::Second => w2,
    };
    i_att(
        g,
        &Mask::ones(side),
        &Mask::zeros(side),
        Context { w: w1, n },
        Context { w: w2, n },
        w,
        n,
        CHANNEL_AVERAGE_LAYER,
    )
}

/// The code used for frame `i` of `steps`: `w2` moved toward `w1`.
pub fn interpolation_code(w1: &StyleCode, w2: &StyleCode, i: usize, steps: usize) -> StyleCode {
    StyleCode::lerp(w2, w1, i as f64 / (steps - 1) as f64)
}

/// Attribute transfers while the second code moves linearly toward the first.
pub fn masked_interpolation(g: &Generator, w1: &StyleCode, w2: &StyleCode, n: &NoiseBank, m_s: &Mask, steps: usize) -> Result<Vec<ImageBuffer>> {
    if steps < 2 {
        return Err(Error::contract("masked interpolation needs at least 2 steps"));
    }
    (0..steps)
        .map(|i| attribute_transfer(g, w1, &interpolation_code(w1, w2, i, steps), n, m_s))
        .collect()
}

/// The blended layer tensor used by [`attribute_transfer`], before synthesis.
pub fn attribute_blend(g: &Generator, w1: &StyleCode, w2: &StyleCode, n: &NoiseBank, m_s: &Mask) -> Result<crate::synthesis::ActivationTensor> {
    let a = g.tap_activation(w1, n, ATTRIBUTE_LAYER)?;
    let b = g.tap_activation(w2, n, ATTRIBUTE_LAYER)?;
    blend_activations(m_s, m_s, &a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inpaint_layer_rule() {
        let mut expected: Vec<usize> = (1..=9).collect();
        expected.extend([17, 18]);
        assert_eq!(inpaint_layers(18), expected);
        assert_eq!(inpaint_layers(8), vec![1, 2, 3, 4, 7, 8]);
        assert_eq!(inpaint_layers(4), vec![1, 2, 3, 4]);
    }

    #[test]
    fn interpolation_endpoints() {
        let a = StyleCode::uniform(2, 3, 1);
        let b = StyleCode::uniform(2, 3, 2);
        assert_eq!(interpolation_code(&a, &b, 0, 5), b);
        assert_eq!(interpolation_code(&a, &b, 4, 5), a);
    }
}
