//! Image quality metrics, the inpainting benchmark harness and perceptual
//! path length.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::{i_att, Context, Networks};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::{gaussian_kernel, Mask};
use crate::perceptual::FeatureMap;
use crate::synthesis::{NoiseBank, StyleCode};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean squared error over all pixels and channels.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_size(b, "mse")?;
    let n = a.pixels().len().max(1) as f64;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(peak² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP))
}

/// Gaussian-windowed SSIM on BT.601 luma with dynamic range `peak`.
///
/// Only windows that fit entirely inside the image are used. Images smaller
/// than the window use a window as large as the image.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    a.ensure_same_size(b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h == 0 || w == 0 {
        return Err(Error::contract("ssim of an empty image"));
    }
    let size = SSIM_WINDOW.min(h).min(w);
    let radius = (size - 1) / 2;
    let size = 2 * radius + 1;
    let kernel = if radius == 0 {
        vec![1.0]
    } else {
        gaussian_kernel(SSIM_SIGMA, radius)
    };
    let la = a.luma();
    let lb = b.luma();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { la.iter().zip(&lb).map(|(&x, &y)| f(x, y)).collect() };
    let filt = |plane: &[f64]| valid_filter(plane, h, w, &kernel);
    let mu_a = filt(&la);
    let mu_b = filt(&lb);
    let e_aa = filt(&prod(&|x, _| x * x));
    let e_bb = filt(&prod(&|_, y| y * y));
    let e_ab = filt(&prod(&|x, y| x * y));
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let count = (h + 1 - size) * (w + 1 - size);
    let mut total = 0.0;
    for i in 0..count {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / count as f64)
}

fn valid_filter(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| kernel[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Converts a `[0, 1]` image to the 0–255 scale after 8-bit quantization.
fn to_255(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    out.pixels_mut()
        .iter_mut()
        .for_each(|v| *v = crate::image_buf::quantize(*v) as f64);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub method: String,
    pub resolution: usize,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub images: usize,
    pub masks: usize,
}

impl BenchmarkReport {
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>5}  {:>7}  {:>9}  {:>6}", "method", "res", "SSIM", "MSE", "PSNR").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<width$}  {:>5}  {:>7.4}  {:>9.2}  {:>6.2}",
                r.method, r.resolution, r.ssim, r.mse, r.psnr
            )
            .unwrap();
        }
        out
    }

    /// One `key=value` line per row, preceded by a metadata line.
    pub fn to_key_value(&self) -> String {
        let mut out = format!("images={} masks={} resize=bilinear scale=255\n", self.images, self.masks);
        for r in &self.rows {
            writeln!(
                out,
                "method={} resolution={} pairs={} ssim={:.6} mse={:.6} psnr={:.6}",
                r.method, r.resolution, r.pairs, r.ssim, r.mse, r.psnr
            )
            .unwrap();
        }
        out
    }
}

pub const BENCHMARK_RESOLUTIONS: [usize; 3] = [1024, 512, 256];

fn png_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Image {
        path: Some(dir.to_path_buf()),
        reason: e.to_string(),
    })? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn file_stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Scores method outputs against ground truths at each resolution.
///
/// Without a mask directory, each method directory holds files named like the
/// ground truths. With one, it holds a subdirectory per mask (named by the
/// mask file stem), each holding files named like the ground truths. Every
/// missing output is reported in a single error.
pub fn inpainting_benchmark(
    ground_truths: &Path,
    masks: Option<&Path>,
    methods: &[(String, PathBuf)],
    resolutions: &[usize],
) -> Result<BenchmarkReport> {
    if resolutions.is_empty() || resolutions.contains(&0) {
        return Err(Error::contract("benchmark needs at least one positive resolution"));
    }
    let gt_names = png_files(ground_truths)?;
    if gt_names.is_empty() {
        return Err(Error::contract(format!("no PNG ground truths in {}", ground_truths.display())));
    }
    let mask_stems: Vec<String> = match masks {
        Some(dir) => png_files(dir)?.iter().map(|n| file_stem(n).to_string()).collect(),
        None => Vec::new(),
    };
    let mut jobs: Vec<(usize, PathBuf, PathBuf)> = Vec::new();
    let mut missing = Vec::new();
    for (m, (_, dir)) in methods.iter().enumerate() {
        let subdirs: Vec<PathBuf> = if mask_stems.is_empty() {
            vec![dir.clone()]
        } else {
            mask_stems.iter().map(|s| dir.join(s)).collect()
        };
        for sub in &subdirs {
            for name in &gt_names {
                let out = sub.join(name);
                if out.is_file() {
                    jobs.push((m, ground_truths.join(name), out));
                } else {
                    missing.push(out.display().to_string());
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::contract(format!("missing method outputs: {}", missing.join(", "))));
    }

    let scored: Vec<(usize, Vec<[f64; 3]>)> = jobs
        .par_iter()
        .map(|(m, gt_path, out_path)| -> Result<(usize, Vec<[f64; 3]>)> {
            let gt = ImageBuffer::load(gt_path)?;
            let out = ImageBuffer::load(out_path)?;
            let mut per_res = Vec::with_capacity(resolutions.len());
            for &r in resolutions {
                let a = to_255(&gt.resize_bilinear(r, r));
                let b = to_255(&out.resize_bilinear(r, r));
                per_res.push([ssim(&a, &b, 255.0)?, mse(&a, &b)?, psnr(&a, &b, 255.0)?]);
            }
            Ok((*m, per_res))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (m, (method, _)) in methods.iter().enumerate() {
        for (ri, &r) in resolutions.iter().enumerate() {
            let vals: Vec<[f64; 3]> = scored.iter().filter(|(k, _)| *k == m).map(|(_, v)| v[ri]).collect();
            let n = vals.len() as f64;
            let mean = |i: usize| vals.iter().map(|v| v[i]).sum::<f64>() / n;
            rows.push(BenchmarkRow {
                method: method.clone(),
                resolution: r,
                ssim: mean(0),
                mse: mean(1),
                psnr: mean(2),
                pairs: vals.len(),
            });
        }
    }
    Ok(BenchmarkReport {
        rows,
        images: gt_names.len(),
        masks: mask_stems.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathMode {
    /// Interpolation parameter drawn uniformly from `[0, 1]`.
    Full,
    /// Interpolation parameter at one of the two endpoints.
    End,
}

pub const PPL_EPSILON: f64 = 1e-4;
/// Layer whose activations carry the masked attribute blend.
pub const ATTRIBUTE_LAYER: usize = 4;

/// Squared distance between channel-normalized feature stacks, summed over
/// layers and averaged over positions.
pub fn feature_distance(a: &[FeatureMap], b: &[FeatureMap]) -> f64 {
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        let (c, p) = (fa.data.channels, fa.data.plane_len());
        let mut layer = 0.0;
        for i in 0..p {
            let norm = |t: &crate::tensor::Tensor3| (0..c).map(|k| t.data[k * p + i].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(&fa.data), norm(&fb.data));
            layer += (0..c)
                .map(|k| (fa.data.data[k * p + i] / na - fb.data.data[k * p + i] / nb).powi(2))
                .sum::<f64>();
        }
        total += layer / p as f64;
    }
    total
}

/// Mean of `distance(frame(t), frame(t+ε)) / ε²` over `samples` random
/// code pairs. With a mask, frames are attribute transfers that blend the
/// interpolated code's layer-4 activations into the first code's image inside
/// the mask; without one, frames are plain syntheses of the interpolated code.
pub fn perceptual_path_length(
    nets: Networks<'_>,
    mask: Option<&Mask>,
    samples: usize,
    mode: PathMode,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::contract("path length needs at least one sample"));
    }
    let g = nets.generator;
    if let Some(m) = mask {
        m.ensure_size(g.resolution(), g.resolution(), "path length mask")?;
    }
    let distances: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let sample_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let w1 = g.sample_style(rng.random());
            let w2 = g.sample_style(rng.random());
            let n = NoiseBank::standard_normal(g.config(), rng.random());
            let t = match mode {
                PathMode::Full => rng.random::<f64>() * (1.0 - PPL_EPSILON),
                PathMode::End => {
                    if rng.random::<bool>() {
                        0.0
                    } else {
                        1.0 - PPL_EPSILON
                    }
                }
            };
            let frame = |t: f64| -> Result<ImageBuffer> {
                let wt = StyleCode::lerp(&w2, &w1, t);
                match mask {
                    Some(m) => i_att(g, m, m, Context { w: &w1, n: &n }, Context { w: &wt, n: &n }, &w1, &n, ATTRIBUTE_LAYER),
                    None => g.forward(&wt, &n),
                }
            };
            let fa = nets.vgg.extract_features(&frame(t)?)?;
            let fb = nets.vgg.extract_features(&frame(t + PPL_EPSILON)?)?;
            Ok(feature_distance(&fa, &fb) / (PPL_EPSILON * PPL_EPSILON))
        })
        .collect::<Result<_>>()?;
    Ok(distances.iter().sum::<f64>() / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_unit_error_at_peak_255() {
        let a = ImageBuffer::filled(4, 4, 10.0);
        let b = ImageBuffer::filled(4, 4, 11.0);
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_of_constant_images_has_closed_form() {
        let a = ImageBuffer::filled(16, 16, 0.2);
        let b = ImageBuffer::filled(16, 16, 0.6);
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let expected = (2.0 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_handles_images_smaller_than_the_window() {
        let a = ImageBuffer::from_fn(4, 4, |y, x, _| (y * 4 + x) as f64 / 16.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ImageBuffer::filled(4, 4, 0.0);
        let b = ImageBuffer::filled(4, 5, 0.0);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b, 1.0).is_err());
    }
}
