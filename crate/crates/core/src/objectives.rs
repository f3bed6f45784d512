//! The masked multi-term image objective and its individual terms.
//!
//! Every term is a function of a synthesized image. [`ImageObjective`] holds a
//! list of weighted terms with their targets prepared once, and evaluates the
//! weighted sum together with its gradient with respect to the image pixels.
//! The VGG network is run at most once per evaluation, however many
//! feature-based terms are present.

use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::Mask;
use crate::perceptual::{downsample_mask, gram, FeatureMap, Vgg16Features, VggLayer};
use crate::synthesis::{Generator, NoiseBank, StyleCode};
use crate::tensor::{gemm, Tensor3};

/// The three spatial masks of the objective, at generator resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMaskSet {
    pub style: Mask,
    pub mse: Mask,
    pub perceptual: Mask,
}

impl SpatialMaskSet {
    pub fn new(style: Mask, mse: Mask, perceptual: Mask) -> Result<Self> {
        let (h, w) = (style.height(), style.width());
        mse.ensure_size(h, w, "M_m")?;
        perceptual.ensure_size(h, w, "M_p")?;
        Ok(Self { style, mse, perceptual })
    }

    pub fn ones(side: usize) -> Self {
        Self {
            style: Mask::ones(side),
            mse: Mask::ones(side),
            perceptual: Mask::ones(side),
        }
    }

    fn ensure_size(&self, height: usize, width: usize) -> Result<()> {
        self.style.ensure_size(height, width, "M_s")?;
        self.mse.ensure_size(height, width, "M_m")?;
        self.perceptual.ensure_size(height, width, "M_p")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_mse1: f64,
    pub lambda_mse2: f64,
    pub lambda_p: f64,
}

impl LossWeights {
    pub const fn new(lambda_s: f64, lambda_mse1: f64, lambda_mse2: f64, lambda_p: f64) -> Self {
        Self {
            lambda_s,
            lambda_mse1,
            lambda_mse2,
            lambda_p,
        }
    }

    /// Weights used by the style-space embedding block.
    pub const fn embedding() -> Self {
        Self::new(0.0, 1e-5, 0.0, 1e-5)
    }

    /// Weights used by the style-matching block.
    pub const fn style() -> Self {
        Self::new(5e-7, 0.0, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_mse1, self.lambda_mse2, self.lambda_p];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::contract("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

fn element_count(image: &ImageBuffer) -> f64 {
    image.pixels().len() as f64
}

/// `(1/N) Σ (M·(a−b))²` over all pixels and channels, `N = H·W·3`.
pub fn masked_mse(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<f64> {
    Ok(masked_mse_grad(a, b, mask)?.0)
}

/// [`masked_mse`] and its gradient with respect to `a`.
pub fn masked_mse_grad(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<(f64, Vec<f64>)> {
    a.ensure_same_size(b, "masked MSE images")?;
    mask.ensure_size(a.height(), a.width(), "masked MSE mask")?;
    let n = element_count(a);
    let mut sum = 0.0;
    let mut grad = vec![0.0; a.pixels().len()];
    for (p, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in 0..3 {
            let i = p * 3 + c;
            let d = a.pixels()[i] - b.pixels()[i];
            sum += (m * d) * (m * d);
            grad[i] = 2.0 * m * m * d / n;
        }
    }
    Ok((sum / n, grad))
}

/// Masked perceptual distance between `image` and `target`.
pub fn perceptual_loss(vgg: &Vgg16Features, mask: &Mask, image: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    image.ensure_same_size(target, "perceptual loss images")?;
    let mut obj = ImageObjective::new();
    obj.push_perceptual(vgg, 1.0, mask, target)?;
    Ok(obj.evaluate(image)?.loss)
}

/// Masked Gram distance on `conv3_3`, divided by `C²`.
pub fn style_loss(vgg: &Vgg16Features, mask: &Mask, image: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    image.ensure_same_size(target, "style loss images")?;
    let mut obj = ImageObjective::new();
    obj.push_style(vgg, 1.0, mask, target)?;
    Ok(obj.evaluate(image)?.loss)
}

/// The full objective evaluated at `G(w, n)`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &Generator,
    vgg: &Vgg16Features,
    w: &StyleCode,
    n: &NoiseBank,
    x: &ImageBuffer,
    y: &ImageBuffer,
    masks: &SpatialMaskSet,
    weights: &LossWeights,
) -> Result<f64> {
    let obj = ImageObjective::eq1(vgg, x, y, masks, weights)?;
    obj.evaluate(&g.forward(w, n)?).map(|e| e.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Mse,
    Perceptual,
    Style,
}

#[derive(Debug, Clone)]
enum Term {
    Mse {
        weight: f64,
        mask: Mask,
        target: ImageBuffer,
    },
    Perceptual {
        weight: f64,
        masks: Vec<Mask>,
        target: Vec<FeatureMap>,
    },
    Style {
        weight: f64,
        mask: Mask,
        target_gram: Vec<f64>,
    },
}

impl Term {
    fn kind(&self) -> TermKind {
        match self {
            Term::Mse { .. } => TermKind::Mse,
            Term::Perceptual { .. } => TermKind::Perceptual,
            Term::Style { .. } => TermKind::Style,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEvaluation {
    pub loss: f64,
    /// Weighted value of each term, in insertion order.
    pub terms: Vec<f64>,
    /// Gradient with respect to the image, interleaved RGB.
    pub grad: Vec<f64>,
}

/// A weighted sum of image-space loss terms with prepared targets.
#[derive(Debug, Clone, Default)]
pub struct ImageObjective<'a> {
    vgg: Option<&'a Vgg16Features>,
    side: Option<usize>,
    terms: Vec<Term>,
}

impl<'a> ImageObjective<'a> {
    pub fn new() -> Self {
        Self {
            vgg: None,
            side: None,
            terms: Vec::new(),
        }
    }

    /// The four-term objective. Terms with zero weight are left out, so their
    /// networks are never evaluated.
    pub fn eq1(
        vgg: &'a Vgg16Features,
        x: &ImageBuffer,
        y: &ImageBuffer,
        masks: &SpatialMaskSet,
        weights: &LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        x.ensure_same_size(y, "content and style images")?;
        masks.ensure_size(x.height(), x.width())?;
        let mut obj = Self::new();
        if weights.lambda_s > 0.0 {
            obj.push_style(vgg, weights.lambda_s, &masks.style, y)?;
        }
        if weights.lambda_mse1 > 0.0 {
            obj.push_mse(weights.lambda_mse1, &masks.mse, x)?;
        }
        if weights.lambda_mse2 > 0.0 {
            obj.push_mse(weights.lambda_mse2, &masks.mse.complement(), y)?;
        }
        if weights.lambda_p > 0.0 {
            obj.push_perceptual(vgg, weights.lambda_p, &masks.perceptual, x)?;
        }
        Ok(obj)
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn kinds(&self) -> Vec<TermKind> {
        self.terms.iter().map(Term::kind).collect()
    }

    /// Appends every term of `other`.
    pub fn extend(&mut self, other: ImageObjective<'a>) -> Result<()> {
        if let Some(side) = other.side {
            self.check_side(side)?;
        }
        if self.vgg.is_none() {
            self.vgg = other.vgg;
        }
        self.terms.extend(other.terms);
        Ok(())
    }

    fn check_side(&mut self, side: usize) -> Result<()> {
        match self.side {
            Some(s) if s != side => Err(Error::contract(format!(
                "objective terms disagree on resolution: {s} vs {side}"
            ))),
            _ => {
                self.side = Some(side);
                Ok(())
            }
        }
    }

    fn target_side(target: &ImageBuffer, mask: &Mask) -> Result<usize> {
        let side = target
            .side()
            .ok_or_else(|| Error::contract("loss targets must be square"))?;
        mask.ensure_size(side, side, "loss mask")?;
        Ok(side)
    }

    fn set_vgg(&mut self, vgg: &'a Vgg16Features) -> Result<()> {
        match self.vgg {
            Some(v) if !std::ptr::eq(v, vgg) => Err(Error::contract("objective terms must share one feature network")),
            _ => {
                self.vgg = Some(vgg);
                Ok(())
            }
        }
    }

    pub fn push_mse(&mut self, weight: f64, mask: &Mask, target: &ImageBuffer) -> Result<()> {
        let side = Self::target_side(target, mask)?;
        self.check_side(side)?;
        self.terms.push(Term::Mse {
            weight,
            mask: mask.clone(),
            target: target.clone(),
        });
        Ok(())
    }

    pub fn push_perceptual(&mut self, vgg: &'a Vgg16Features, weight: f64, mask: &Mask, target: &ImageBuffer) -> Result<()> {
        let side = Self::target_side(target, mask)?;
        self.check_side(side)?;
        self.set_vgg(vgg)?;
        let target = vgg.extract_features(target)?;
        let masks = target
            .iter()
            .map(|f| downsample_mask(mask, f.data.height, f.data.width))
            .collect::<Result<_>>()?;
        self.terms.push(Term::Perceptual { weight, masks, target });
        Ok(())
    }

    pub fn push_style(&mut self, vgg: &'a Vgg16Features, weight: f64, mask: &Mask, target: &ImageBuffer) -> Result<()> {
        let side = Self::target_side(target, mask)?;
        self.check_side(side)?;
        self.set_vgg(vgg)?;
        let features = vgg.extract_features(target)?;
        let deep = &features[VggLayer::Conv3_3.slot()];
        let mask = downsample_mask(mask, deep.data.height, deep.data.width)?;
        let target_gram = gram(deep, &mask)?;
        self.terms.push(Term::Style {
            weight,
            mask,
            target_gram,
        });
        Ok(())
    }

    pub fn evaluate(&self, image: &ImageBuffer) -> Result<ImageEvaluation> {
        if let Some(side) = self.side {
            if image.side() != Some(side) {
                return Err(Error::contract(format!(
                    "objective expects {side}x{side} images, got {}x{}",
                    image.height(),
                    image.width()
                )));
            }
        }
        let needs_vgg = self.terms.iter().any(|t| !matches!(t, Term::Mse { .. }));
        let traced = match (needs_vgg, self.vgg) {
            (true, Some(vgg)) => Some(vgg.forward_traced(image)?),
            _ => None,
        };
        let mut grad = vec![0.0; image.pixels().len()];
        let mut feature_grads: [Option<Tensor3>; 4] = Default::default();
        let mut terms = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let value = match term {
                Term::Mse { weight, mask, target } => {
                    let (v, g) = masked_mse_grad(image, target, mask)?;
                    grad.iter_mut().zip(g).for_each(|(a, b)| *a += weight * b);
                    weight * v
                }
                Term::Perceptual { weight, masks, target } => {
                    let features = &traced.as_ref().expect("features computed").0;
                    let mut total = 0.0;
                    for ((f, t), m) in features.iter().zip(target).zip(masks) {
                        let (v, g) = feature_distance(&f.data, &t.data, m);
                        total += v;
                        accumulate(&mut feature_grads[f.layer.slot()], g, *weight);
                    }
                    weight * total
                }
                Term::Style {
                    weight,
                    mask,
                    target_gram,
                } => {
                    let features = &traced.as_ref().expect("features computed").0;
                    let deep = &features[VggLayer::Conv3_3.slot()];
                    let (v, g) = gram_distance(deep, mask, target_gram)?;
                    accumulate(&mut feature_grads[VggLayer::Conv3_3.slot()], g, *weight);
                    weight * v
                }
            };
            terms.push(value);
        }
        if let (Some((_, trace)), Some(vgg)) = (&traced, self.vgg) {
            let g = vgg.backward(trace, &feature_grads);
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(ImageEvaluation {
            loss: terms.iter().sum(),
            terms,
            grad,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor3>, g: Tensor3, weight: f64) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += weight * b),
        None => {
            let mut g = g;
            g.data.iter_mut().for_each(|v| *v *= weight);
            *slot = Some(g);
        }
    }
}

/// `(1/N_j) Σ (m·(f−t))²` and its gradient with respect to `f`.
fn feature_distance(f: &Tensor3, t: &Tensor3, mask: &Mask) -> (f64, Tensor3) {
    let n = f.data.len() as f64;
    let p = f.plane_len();
    let mut grad = Tensor3::zeros(f.channels, f.height, f.width);
    let mut sum = 0.0;
    for c in 0..f.channels {
        let range = c * p..(c + 1) * p;
        for (((g, a), b), &m) in grad.data[range.clone()]
            .iter_mut()
            .zip(&f.data[range.clone()])
            .zip(&t.data[range])
            .zip(mask.data())
        {
            let d = a - b;
            sum += (m * d) * (m * d);
            *g = 2.0 * m * m * d / n;
        }
    }
    (sum / n, grad)
}

/// `‖gram(f, m) − target‖²_F / C²` and its gradient with respect to `f`.
fn gram_distance(fm: &FeatureMap, mask: &Mask, target: &[f64]) -> Result<(f64, Tensor3)> {
    let c = fm.data.channels;
    let scale = (c * c) as f64;
    let g = gram(fm, mask)?;
    let diff: Vec<f64> = g.iter().zip(target).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / scale;
    let mut grad = Tensor3::zeros(c, fm.data.height, fm.data.width);
    let total = mask.sum();
    if total > 0.0 {
        let p = fm.data.plane_len();
        let d: Vec<f64> = diff.iter().map(|v| 4.0 * v / (scale * total)).collect();
        gemm(c, c, p, &d, &fm.data.data, &mut grad.data, false);
        for ch in 0..c {
            grad.data[ch * p..(ch + 1) * p]
                .iter_mut()
                .zip(mask.data())
                .for_each(|(v, m)| *v *= m);
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_difference_on_one_pixel() {
        let a = ImageBuffer::filled(1, 1, 1.0);
        let b = ImageBuffer::filled(1, 1, 0.0);
        assert_eq!(masked_mse(&a, &b, &Mask::ones(1)).unwrap(), 1.0);
        assert_eq!(masked_mse(&a, &b, &Mask::zeros(1)).unwrap(), 0.0);
        assert_eq!(masked_mse(&a, &a, &Mask::ones(1)).unwrap(), 0.0);
    }

    #[test]
    fn mask_applies_inside_the_square() {
        let a = ImageBuffer::filled(1, 1, 1.0);
        let b = ImageBuffer::filled(1, 1, 0.0);
        let half = Mask::filled(1, 1, 0.5);
        assert_eq!(masked_mse(&a, &b, &half).unwrap(), 0.25);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::embedding().validate().is_ok());
    }

    #[test]
    fn zero_weight_terms_are_not_built() {
        let vgg = Vgg16Features::init_random(crate::perceptual::VggConfig::toy());
        let x = ImageBuffer::filled(8, 8, 0.3);
        let obj = ImageObjective::eq1(&vgg, &x, &x, &SpatialMaskSet::ones(8), &LossWeights::new(0.0, 1e-5, 0.0, 0.0)).unwrap();
        assert_eq!(obj.kinds(), vec![TermKind::Mse]);
        let obj = ImageObjective::eq1(&vgg, &x, &x, &SpatialMaskSet::ones(8), &LossWeights::new(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(
            obj.kinds(),
            vec![TermKind::Style, TermKind::Mse, TermKind::Mse, TermKind::Perceptual]
        );
    }
}
