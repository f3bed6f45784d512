//! Embedding and editing building blocks: style-code embedding, noise
//! embedding, style matching, activation blending, and the multi-term style
//! code optimization that several applications share.

use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::{nn_downsample, Mask};
use crate::objectives::{ImageObjective, LossWeights, SpatialMaskSet};
use crate::optim::{run, Anchor, OptimizerConfig, Progress, SynthesisObjective, VariableMask};
use crate::perceptual::Vgg16Features;
use crate::synthesis::{ActivationTensor, Generator, NoiseBank, StyleCode};

/// Weight of each noise-embedding MSE term.
pub const MK_N_WEIGHT: f64 = 1e-5;
/// Weight of the known-region term when noise embedding for inpainting.
pub const INPAINT_MK_N_WEIGHT: f64 = 1e-4;

/// The generator and feature network every block works against.
#[derive(Clone, Copy)]
pub struct Networks<'a> {
    pub generator: &'a Generator,
    pub vgg: &'a Vgg16Features,
}

impl<'a> Networks<'a> {
    pub fn new(generator: &'a Generator, vgg: &'a Vgg16Features) -> Self {
        Self { generator, vgg }
    }

    pub fn side(&self) -> usize {
        self.generator.resolution()
    }

    pub fn layers(&self) -> usize {
        self.generator.num_layers()
    }
}

/// Optimizes the enabled layers of `w` against perceptual and pixel losses
/// toward `x`. Noise is held fixed.
#[allow(clippy::too_many_arguments)]
pub fn w_l(
    nets: Networks<'_>,
    m_p: &Mask,
    m_m: &Mask,
    vmask: &VariableMask,
    w_ini: &StyleCode,
    n_ini: &NoiseBank,
    x: &ImageBuffer,
    cfg: &OptimizerConfig,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<StyleCode> {
    composed_w_opt(
        nets,
        &[WTerm::Reconstruction {
            m_p: m_p.clone(),
            m_m: m_m.clone(),
            target: x.clone(),
        }],
        vmask,
        w_ini,
        n_ini,
        cfg,
        on_progress,
    )
}

/// Optimizes all noise maps so that `M⊙G` matches `x` and `(1−M)⊙G`
/// matches `y`. The style code is held fixed.
#[allow(clippy::too_many_arguments)]
pub fn mk_n(
    nets: Networks<'_>,
    m_m: &Mask,
    w_ini: &StyleCode,
    n_ini: &NoiseBank,
    x: &ImageBuffer,
    y: &ImageBuffer,
    lambda_x: f64,
    cfg: &OptimizerConfig,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<NoiseBank> {
    let mut image = ImageObjective::new();
    image.push_mse(lambda_x, m_m, x)?;
    image.push_mse(MK_N_WEIGHT, &m_m.complement(), y)?;
    let objective = SynthesisObjective::new(nets.generator, image);
    let vmask = VariableMask::n_only(nets.layers());
    Ok(run(&objective, w_ini, n_ini, &vmask, cfg, on_progress)?.1)
}

/// Optimizes all layers of `w` toward the Gram statistics of `y` inside `m_s`.
pub fn m_st(
    nets: Networks<'_>,
    m_s: &Mask,
    w_ini: &StyleCode,
    n_ini: &NoiseBank,
    y: &ImageBuffer,
    cfg: &OptimizerConfig,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<StyleCode> {
    composed_w_opt(
        nets,
        &[WTerm::Style {
            m_s: m_s.clone(),
            target: y.clone(),
        }],
        &VariableMask::w_only(nets.layers()),
        w_ini,
        n_ini,
        cfg,
        on_progress,
    )
}

/// One summand of a multi-term style code objective.
#[derive(Debug, Clone)]
pub enum WTerm {
    /// Perceptual loss under `m_p` plus pixel loss under `m_m`, toward `target`.
    Reconstruction { m_p: Mask, m_m: Mask, target: ImageBuffer },
    /// Gram loss under `m_s` toward `target`.
    Style { m_s: Mask, target: ImageBuffer },
    /// `weight·‖reference − w‖₂`.
    Anchor { weight: f64, reference: StyleCode },
}

/// Builds the summed objective of `terms` for use with [`run`].
pub fn composed_objective<'a>(nets: Networks<'a>, terms: &[WTerm]) -> Result<SynthesisObjective<'a>> {
    if terms.is_empty() {
        return Err(Error::contract("a style code objective needs at least one term"));
    }
    let mut image = ImageObjective::new();
    let mut anchor: Option<Anchor> = None;
    for term in terms {
        match term {
            WTerm::Reconstruction { m_p, m_m, target } => {
                let masks = SpatialMaskSet::new(Mask::ones(target.height()), m_m.clone(), m_p.clone())?;
                image.extend(ImageObjective::eq1(nets.vgg, target, target, &masks, &LossWeights::embedding())?)?;
            }
            WTerm::Style { m_s, target } => {
                image.push_style(nets.vgg, LossWeights::style().lambda_s, m_s, target)?;
            }
            WTerm::Anchor { weight, reference } => {
                if anchor.is_some() {
                    return Err(Error::contract("at most one anchor term is supported"));
                }
                if !(weight.is_finite() && *weight >= 0.0) {
                    return Err(Error::contract(format!("anchor weight must be nonnegative, got {weight}")));
                }
                anchor = Some(Anchor {
                    weight: *weight,
                    reference: reference.clone(),
                });
            }
        }
    }
    let mut objective = SynthesisObjective::new(nets.generator, image);
    objective.anchor = anchor;
    Ok(objective)
}

/// One optimization of `w` under the sum of all `terms`.
pub fn composed_w_opt(
    nets: Networks<'_>,
    terms: &[WTerm],
    vmask: &VariableMask,
    w_ini: &StyleCode,
    n_ini: &NoiseBank,
    cfg: &OptimizerConfig,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<StyleCode> {
    if vmask.optimizes_n() {
        return Err(Error::contract("style code optimization cannot enable noise maps"));
    }
    let objective = composed_objective(nets, terms)?;
    Ok(run(&objective, w_ini, n_ini, vmask, cfg, on_progress)?.0)
}

/// A source of activations for [`i_att`].
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub w: &'a StyleCode,
    pub n: &'a NoiseBank,
}

/// `M1⊙A + (1−M2)⊙B`, with both masks nearest-neighbour downsampled to the
/// activation resolution.
pub fn blend_activations(m1: &Mask, m2: &Mask, a: &ActivationTensor, b: &ActivationTensor) -> Result<ActivationTensor> {
    if a.layer != b.layer || !a.data.same_shape(&b.data) {
        return Err(Error::contract(format!(
            "cannot blend layer {} {:?} with layer {} {:?}",
            a.layer,
            a.data.shape(),
            b.layer,
            b.data.shape()
        )));
    }
    let (h, w) = (a.data.height, a.data.width);
    let m1 = nn_downsample(m1, h, w)?;
    let m2 = nn_downsample(m2, h, w)?;
    let mut out = a.clone();
    let p = a.data.plane_len();
    for c in 0..a.data.channels {
        for i in 0..p {
            let k = c * p + i;
            out.data.data[k] = m1.data()[i] * a.data.data[k] + (1.0 - m2.data()[i]) * b.data.data[k];
        }
    }
    Ok(out)
}

/// Synthesizes under `w, n` with layer `l` replaced by the blend of the
/// activations of `ctx1` and `ctx2` at that layer.
#[allow(clippy::too_many_arguments)]
pub fn i_att(
    g: &Generator,
    m1: &Mask,
    m2: &Mask,
    ctx1: Context<'_>,
    ctx2: Context<'_>,
    w: &StyleCode,
    n: &NoiseBank,
    layer: usize,
) -> Result<ImageBuffer> {
    let side = g.resolution();
    m1.ensure_size(side, side, "M1")?;
    m2.ensure_size(side, side, "M2")?;
    let a = g.tap_activation(ctx1.w, ctx1.n, layer)?;
    let b = g.tap_activation(ctx2.w, ctx2.n, layer)?;
    let blended = blend_activations(m1, m2, &a, &b)?;
    g.forward_with_injection(w, n, &blended)
}

/// `lam·A + (1−lam)·B`.
pub fn tensor_average(a: &ActivationTensor, b: &ActivationTensor, lam: f64) -> Result<ActivationTensor> {
    if !a.data.same_shape(&b.data) {
        return Err(Error::contract("averaged activations must have the same shape"));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::contract(format!("averaging weight {lam} is outside [0, 1]")));
    }
    let mut out = a.clone();
    out.data
        .data
        .iter_mut()
        .zip(&b.data.data)
        .for_each(|(x, y)| *x = lam * *x + (1.0 - lam) * y);
    Ok(out)
}

/// Channels listed in `channels` (1-based) from `A`, the rest from `B`.
pub fn tensor_channel_copy(a: &ActivationTensor, b: &ActivationTensor, channels: &[usize]) -> Result<ActivationTensor> {
    if !a.data.same_shape(&b.data) {
        return Err(Error::contract("copied activations must have the same shape"));
    }
    let count = a.data.channels;
    if let Some(bad) = channels.iter().find(|&&c| c == 0 || c > count) {
        return Err(Error::contract(format!("channel {bad} is outside 1..={count}")));
    }
    let mut out = b.clone();
    for &c in channels {
        out.data.plane_mut(c - 1).copy_from_slice(a.data.plane(c - 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;

    fn constant(layer: usize, c: usize, v: f64) -> ActivationTensor {
        ActivationTensor {
            layer,
            data: Tensor3::filled(c, 2, 2, v),
        }
    }

    #[test]
    fn average_endpoints_and_midpoint() {
        let a = constant(3, 2, 2.0);
        let b = constant(3, 2, 4.0);
        assert_eq!(tensor_average(&a, &b, 1.0).unwrap(), a);
        assert_eq!(tensor_average(&a, &b, 0.0).unwrap(), b);
        assert!(tensor_average(&a, &b, 0.5).unwrap().data.data.iter().all(|&v| v == 3.0));
        assert!(tensor_average(&a, &b, 1.5).is_err());
    }

    #[test]
    fn channel_copy_cases() {
        let a = constant(3, 3, 1.0);
        let b = constant(3, 3, 0.0);
        assert_eq!(tensor_channel_copy(&a, &b, &[1, 2, 3]).unwrap(), a);
        assert_eq!(tensor_channel_copy(&a, &b, &[]).unwrap(), b);
        let one = tensor_channel_copy(&a, &b, &[1]).unwrap();
        let means: Vec<f64> = (0..3).map(|c| one.data.plane(c).iter().sum::<f64>() / 4.0).collect();
        assert_eq!(means, vec![1.0, 0.0, 0.0]);
        assert!(tensor_channel_copy(&a, &b, &[4]).is_err());
        assert!(tensor_channel_copy(&a, &b, &[0]).is_err());
    }

    #[test]
    fn blend_with_unit_and_zero_masks_sums() {
        let a = constant(3, 2, 1.5);
        let b = constant(3, 2, 2.0);
        let sum = blend_activations(&Mask::ones(8), &Mask::zeros(8), &a, &b).unwrap();
        assert!(sum.data.data.iter().all(|&v| v == 3.5));
        assert!(blend_activations(&Mask::ones(8), &Mask::zeros(8), &a, &constant(5, 2, 0.0)).is_err());
    }

    #[test]
    fn empty_term_list_is_rejected() {
        let g = Generator::init_toy(crate::GeneratorConfig::toy(8)).unwrap();
        let vgg = Vgg16Features::init_random(crate::VggConfig::toy());
        assert!(composed_objective(Networks::new(&g, &vgg), &[]).is_err());
    }
}
