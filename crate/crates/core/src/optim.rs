//! Gradient-based optimization of style codes and noise maps.

use crate::blocks::{mk_n, w_l, Networks, MK_N_WEIGHT};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::Mask;
use crate::objectives::{ImageObjective, LossWeights, SpatialMaskSet};
use crate::synthesis::{Generator, NoiseBank, StyleCode};

pub const DEFAULT_PROGRESS_STRIDE: usize = 25;

/// Which layers of `w` and which noise maps may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableMask {
    pub w_m: Vec<bool>,
    pub n_m: Vec<bool>,
}

impl VariableMask {
    pub fn new(w_m: Vec<bool>, n_m: Vec<bool>) -> Self {
        Self { w_m, n_m }
    }

    pub fn w_only(layers: usize) -> Self {
        Self::new(vec![true; layers], vec![false; layers])
    }

    pub fn n_only(layers: usize) -> Self {
        Self::new(vec![false; layers], vec![true; layers])
    }

    pub fn all(layers: usize) -> Self {
        Self::new(vec![true; layers], vec![true; layers])
    }

    /// Enables the listed 1-based style layers and no noise maps.
    pub fn w_layers(layers: usize, enabled: impl IntoIterator<Item = usize>) -> Self {
        let mut w_m = vec![false; layers];
        for l in enabled {
            if (1..=layers).contains(&l) {
                w_m[l - 1] = true;
            }
        }
        Self::new(w_m, vec![false; layers])
    }

    pub fn optimizes_w(&self) -> bool {
        self.w_m.iter().any(|&b| b)
    }

    pub fn optimizes_n(&self) -> bool {
        self.n_m.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Learning rate for the noise maps when it differs from the style rate.
    pub noise_learning_rate: Option<f64>,
    pub progress_stride: usize,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, iterations: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations,
            noise_learning_rate: None,
            progress_stride: DEFAULT_PROGRESS_STRIDE,
        }
    }

    pub fn gd(learning_rate: f64, iterations: usize) -> Self {
        Self {
            kind: OptimizerKind::Gd,
            ..Self::adam(learning_rate, iterations)
        }
    }

    pub fn with_noise_learning_rate(mut self, lr: f64) -> Self {
        self.noise_learning_rate = Some(lr);
        self
    }

    pub fn with_progress_stride(mut self, stride: usize) -> Self {
        self.progress_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v.is_finite() && v > 0.0;
        if !lr_ok(self.learning_rate) || !self.noise_learning_rate.is_none_or(lr_ok) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::contract("Adam betas must lie in [0, 1) and epsilon must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::contract("iterations must be at least 1"));
        }
        Ok(())
    }

    fn noise_lr(&self) -> f64 {
        self.noise_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Entries with `active[i] == false` keep
/// their parameter and moment values.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], active: Option<&[bool]>, lr: f64, cfg: &OptimizerConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        if active.is_some_and(|a| !a[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

pub fn gd_step(params: &mut [f64], grads: &[f64], active: Option<&[bool]>, lr: f64) {
    for i in 0..params.len() {
        if active.is_some_and(|a| !a[i]) {
            continue;
        }
        params[i] -= lr * grads[i];
    }
}

/// Value and gradients of a scalar objective of `(w, n)`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_n: Vec<Vec<f64>>,
}

pub trait Objective {
    fn evaluate(&self, w: &StyleCode, n: &NoiseBank) -> Result<Evaluation>;
}

/// An image objective evaluated at `G(w, n)`, with an optional pull toward a
/// reference code.
pub struct SynthesisObjective<'a> {
    pub generator: &'a Generator,
    pub image: ImageObjective<'a>,
    pub anchor: Option<Anchor>,
}

/// `λ·‖w − reference‖₂` (the norm, not its square).
#[derive(Debug, Clone)]
pub struct Anchor {
    pub weight: f64,
    pub reference: StyleCode,
}

impl Anchor {
    fn value_and_grad(&self, w: &StyleCode) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = w
            .values()
            .iter()
            .zip(self.reference.values())
            .map(|(a, b)| a - b)
            .collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, vec![0.0; diff.len()]);
        }
        let grad = diff.iter().map(|d| self.weight * d / norm).collect();
        (self.weight * norm, grad)
    }
}

impl<'a> SynthesisObjective<'a> {
    pub fn new(generator: &'a Generator, image: ImageObjective<'a>) -> Self {
        Self {
            generator,
            image,
            anchor: None,
        }
    }

    pub fn with_anchor(mut self, anchor: Anchor) -> Self {
        self.anchor = Some(anchor);
        self
    }
}

impl Objective for SynthesisObjective<'_> {
    fn evaluate(&self, w: &StyleCode, n: &NoiseBank) -> Result<Evaluation> {
        let (image, trace) = self.generator.forward_traced(w, n, None)?;
        let eval = self.image.evaluate(&image)?;
        let grads = self.generator.backward(&trace, &eval.grad);
        let mut out = Evaluation {
            loss: eval.loss,
            grad_w: grads.w,
            grad_n: grads.noise,
        };
        if let Some(anchor) = &self.anchor {
            let (v, g) = anchor.value_and_grad(w);
            out.loss += v;
            out.grad_w.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }
}

/// Routes the gradient of one objective to `w` and of another to `n`.
/// The reported loss is the sum of both.
pub struct SplitObjective<A, B> {
    pub for_w: A,
    pub for_n: B,
}

impl<A: Objective, B: Objective> Objective for SplitObjective<A, B> {
    fn evaluate(&self, w: &StyleCode, n: &NoiseBank) -> Result<Evaluation> {
        let a = self.for_w.evaluate(w, n)?;
        let b = self.for_n.evaluate(w, n)?;
        Ok(Evaluation {
            loss: a.loss + b.loss,
            grad_w: a.grad_w,
            grad_n: b.grad_n,
        })
    }
}

/// One progress report. `w` and `n` are the iterate the loss was evaluated at.
#[derive(Debug, Clone, Copy)]
pub struct Progress<'s> {
    pub iteration: usize,
    pub loss: f64,
    pub w: &'s StyleCode,
    pub n: &'s NoiseBank,
}

/// Runs `cfg.iterations` optimizer steps and returns the final iterate.
///
/// Progress is reported for iteration 1 and then every `progress_stride`
/// iterations, always including the last one.
pub fn run(
    objective: &dyn Objective,
    w_ini: &StyleCode,
    n_ini: &NoiseBank,
    vmask: &VariableMask,
    cfg: &OptimizerConfig,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<(StyleCode, NoiseBank)> {
    cfg.validate()?;
    if vmask.w_m.len() != w_ini.layers() || vmask.n_m.len() != n_ini.len() {
        return Err(Error::contract(format!(
            "variable mask sizes ({}, {}) do not match ({}, {})",
            vmask.w_m.len(),
            vmask.n_m.len(),
            w_ini.layers(),
            n_ini.len()
        )));
    }
    let mut w = w_ini.clone();
    let mut n = n_ini.clone();
    let dim = w.dim();
    let w_active: Vec<bool> = vmask.w_m.iter().flat_map(|&b| std::iter::repeat_n(b, dim)).collect();
    let mut w_state = AdamState::new(w.values().len());
    let mut n_states: Vec<AdamState> = n.maps().iter().map(|m| AdamState::new(m.data.len())).collect();
    let stride = cfg.progress_stride.max(1);

    for iteration in 1..=cfg.iterations {
        let eval = objective.evaluate(&w, &n)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                value: eval.loss,
            });
        }
        if iteration == 1 || iteration % stride == 0 || iteration == cfg.iterations {
            on_progress(Progress {
                iteration,
                loss: eval.loss,
                w: &w,
                n: &n,
            });
        }
        if vmask.optimizes_w() {
            match cfg.kind {
                OptimizerKind::Adam => adam_step(
                    &mut w_state,
                    w.values_mut(),
                    &eval.grad_w,
                    Some(&w_active),
                    cfg.learning_rate,
                    cfg,
                ),
                OptimizerKind::Gd => gd_step(w.values_mut(), &eval.grad_w, Some(&w_active), cfg.learning_rate),
            }
        }
        for (i, map) in n.maps_mut().iter_mut().enumerate() {
            if !vmask.n_m[i] {
                continue;
            }
            match cfg.kind {
                OptimizerKind::Adam => adam_step(&mut n_states[i], &mut map.data, &eval.grad_n[i], None, cfg.noise_lr(), cfg),
                OptimizerKind::Gd => gd_step(&mut map.data, &eval.grad_n[i], None, cfg.noise_lr()),
            }
        }
    }
    Ok((w, n))
}

/// PSNR on the `[0, 1]` scale, capped at 100 dB.
fn psnr01(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    crate::metrics::psnr(a, b, 1.0).expect("same-size images")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub psnr: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub w: StyleCode,
    pub n: NoiseBank,
    pub stages: Vec<StageRecord>,
}

impl Embedding {
    pub fn last_psnr(&self) -> Option<f64> {
        self.stages.last().map(|s| s.psnr)
    }
}

/// Stage plan for alternating embedding: `w` first, then `n`, then an
/// optional extra `w` stage used only for diagnostics.
#[derive(Debug, Clone)]
pub struct AlternatingSchedule {
    pub w_stage: OptimizerConfig,
    pub n_stage: Option<OptimizerConfig>,
    pub extra_w_stage: Option<OptimizerConfig>,
    pub w_ini: StyleCode,
    pub n_ini: NoiseBank,
}

pub fn embed_alternating(
    nets: Networks<'_>,
    x: &ImageBuffer,
    schedule: &AlternatingSchedule,
    on_progress: &mut dyn FnMut(&str, Progress),
) -> Result<Embedding> {
    let g = nets.generator;
    let side = g.resolution();
    let ones = Mask::ones(side);
    let layers = g.num_layers();
    let mut stages = Vec::new();
    let mut record = |name: &str, w: &StyleCode, n: &NoiseBank, loss: f64| -> Result<()> {
        stages.push(StageRecord {
            name: name.to_string(),
            psnr: psnr01(&g.forward(w, n)?, x),
            final_loss: loss,
        });
        Ok(())
    };

    let mut last = f64::NAN;
    let w = w_l(
        nets,
        &ones,
        &ones,
        &VariableMask::w_only(layers),
        &schedule.w_ini,
        &schedule.n_ini,
        x,
        &schedule.w_stage,
        &mut |p| {
            last = p.loss;
            on_progress("w", p)
        },
    )?;
    record("w", &w, &schedule.n_ini, last)?;
    let mut n = schedule.n_ini.clone();
    if let Some(cfg) = &schedule.n_stage {
        n = mk_n(nets, &ones, &w, &schedule.n_ini, x, x, MK_N_WEIGHT, cfg, &mut |p| {
            last = p.loss;
            on_progress("n", p)
        })?;
        record("n", &w, &n, last)?;
    }
    let mut w = w;
    if let Some(cfg) = &schedule.extra_w_stage {
        w = w_l(
            nets,
            &ones,
            &ones,
            &VariableMask::w_only(layers),
            &w,
            &n,
            x,
            cfg,
            &mut |p| {
                last = p.loss;
                on_progress("w2", p)
            },
        )?;
        record("w2", &w, &n, last)?;
    }
    Ok(Embedding { w, n, stages })
}

/// How the joint embedding assigns losses to variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointLoss {
    /// One objective drives both `w` and `n`.
    Shared(LossWeights),
    /// Perceptual plus MSE drives `w`; MSE alone drives `n`.
    Split,
}

#[allow(clippy::too_many_arguments)]
pub fn embed_joint(
    nets: Networks<'_>,
    x: &ImageBuffer,
    loss: JointLoss,
    w_ini: &StyleCode,
    n_ini: &NoiseBank,
    cfg: &OptimizerConfig,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<Embedding> {
    let (g, vgg) = (nets.generator, nets.vgg);
    let side = g.resolution();
    let masks = SpatialMaskSet::ones(side);
    let build = |weights: &LossWeights| -> Result<SynthesisObjective<'_>> {
        Ok(SynthesisObjective::new(g, ImageObjective::eq1(vgg, x, x, &masks, weights)?))
    };
    let layers = g.num_layers();
    let mut last = f64::NAN;
    let mut progress = |p: Progress| {
        last = p.loss;
        on_progress(p)
    };
    let (w, n) = match loss {
        JointLoss::Shared(weights) => run(&build(&weights)?, w_ini, n_ini, &VariableMask::all(layers), cfg, &mut progress)?,
        JointLoss::Split => {
            let split = SplitObjective {
                for_w: build(&LossWeights::embedding())?,
                for_n: build(&LossWeights::new(0.0, MK_N_WEIGHT, 0.0, 0.0))?,
            };
            run(&split, w_ini, n_ini, &VariableMask::all(layers), cfg, &mut progress)?
        }
    };
    let stages = vec![StageRecord {
        name: "joint".into(),
        psnr: psnr01(&g.forward(&w, &n)?, x),
        final_loss: last,
    }];
    Ok(Embedding { w, n, stages })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleReport {
    pub optimized_psnr: f64,
    pub resampled_psnr: f64,
}

/// PSNR against `x` with the optimized noise and with noise redrawn from a
/// standard normal. `resample_seed = None` keeps `n`, giving equal values.
pub fn resample_noise_diagnostic(
    g: &Generator,
    w: &StyleCode,
    n: &NoiseBank,
    x: &ImageBuffer,
    resample_seed: Option<u64>,
) -> Result<ResampleReport> {
    let optimized_psnr = psnr01(&g.forward(w, n)?, x);
    let resampled = match resample_seed {
        Some(seed) => NoiseBank::standard_normal(g.config(), seed),
        None => n.clone(),
    };
    Ok(ResampleReport {
        optimized_psnr,
        resampled_psnr: psnr01(&g.forward(w, &resampled)?, x),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_advances_the_counter() {
        let cfg = OptimizerConfig::adam(0.01, 1);
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        adam_step(&mut s, &mut p, &[0.0; 3], None, 0.01, &cfg);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_the_learning_rate() {
        let cfg = OptimizerConfig::adam(0.01, 1);
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        adam_step(&mut s, &mut p, &[1.0], None, 0.01, &cfg);
        assert!((p[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn inactive_entries_keep_moments() {
        let cfg = OptimizerConfig::adam(0.01, 1);
        let mut s = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        adam_step(&mut s, &mut p, &[1.0, 1.0], Some(&[true, false]), 0.01, &cfg);
        assert_eq!(p[1], 0.0);
        assert_eq!((s.m[1], s.v[1]), (0.0, 0.0));
    }

    #[test]
    fn gd_arithmetic() {
        let mut p = vec![1.0];
        gd_step(&mut p, &[0.5], None, 0.8);
        assert!((p[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::adam(0.01, 0).validate().is_err());
        assert!(OptimizerConfig::adam(-1.0, 5).validate().is_err());
        assert!(OptimizerConfig::gd(0.8, 5).validate().is_ok());
        let mut bad = OptimizerConfig::adam(0.01, 5);
        bad.beta1 = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn anchor_subgradient_is_zero_at_reference() {
        let w = StyleCode::zeros(2, 3);
        let a = Anchor {
            weight: 1.0,
            reference: w.clone(),
        };
        assert_eq!(a.value_and_grad(&w), (0.0, vec![0.0; 6]));
    }
}
