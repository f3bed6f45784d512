//! Spatial masks: construction, blurring, dilation, nearest-neighbour
//! downsampling for activation edits, and 8-bit PNG I/O.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A single-channel map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "mask of {} values cannot be {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn ones(side: usize) -> Self {
        Self::filled(side, side, 1.0)
    }

    pub fn zeros(side: usize) -> Self {
        Self::filled(side, side, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self { height, width, data }
    }

    /// Binary mask that is 1 on the left half of the columns.
    pub fn left_half(side: usize) -> Self {
        Self::from_fn(side, side, |_, x| if x < side / 2 { 1.0 } else { 0.0 })
    }

    /// Binary mask that is 1 inside the half-open rectangle.
    pub fn rect(side: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self::from_fn(side, side, |y, x| if (y0..y1).contains(&y) && (x0..x1).contains(&x) { 1.0 } else { 0.0 })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// `1 - M`.
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_all(&self, value: f64) -> bool {
        self.data.iter().all(|&v| v == value)
    }

    pub fn ensure_size(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.height == height && self.width == width {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{what}: mask is {}x{}, expected {height}x{width}",
                self.height, self.width
            )))
        }
    }

    /// Set of pixels whose value is at least `threshold`.
    pub fn support(&self, threshold: f64) -> Vec<bool> {
        self.data.iter().map(|&v| v >= threshold).collect()
    }

    /// Decodes an 8-bit single-channel PNG, scaling values by 1/255.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: None,
            reason: e.to_string(),
        })?;
        match img {
            image::DynamicImage::ImageLuma8(gray) => Ok(Self {
                height: gray.height() as usize,
                width: gray.width() as usize,
                data: gray.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
            }),
            other => Err(Error::Image {
                path: None,
                reason: format!("mask must be 8-bit single-channel, found {:?}", other.color()),
            }),
        }
    }

    /// Encodes as an 8-bit grayscale PNG (values ×255, rounded).
    pub fn encode_png(&self) -> Vec<u8> {
        let raw = self.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let gray = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("size matches");
        let mut out = Vec::new();
        gray.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out
    }
}

/// Where a mask came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Drawn,
    File(PathBuf),
    Derived,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurConfig {
    pub sigma: f64,
    pub radius: usize,
}

impl BlurConfig {
    /// σ = resolution/64 and a kernel radius of ⌈2σ⌉.
    pub fn for_resolution(resolution: usize) -> Self {
        let sigma = resolution as f64 / 64.0;
        Self {
            sigma,
            radius: ((2.0 * sigma).ceil() as usize).max(1),
        }
    }
}

/// Dilation radius for the enlarged blending mask: ⌈resolution/32⌉.
pub fn default_dilation_radius(resolution: usize) -> usize {
    resolution.div_ceil(32).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskAsset {
    pub mask: Mask,
    pub provenance: Provenance,
    pub blur: Option<BlurConfig>,
}

impl MaskAsset {
    pub fn drawn(mask: Mask) -> Self {
        Self {
            mask,
            provenance: Provenance::Drawn,
            blur: None,
        }
    }

    pub fn blurred(&self, cfg: BlurConfig) -> Result<Self> {
        Ok(Self {
            mask: blur(&self.mask, cfg.sigma, cfg.radius)?,
            provenance: Provenance::Derived,
            blur: Some(cfg),
        })
    }
}

/// Symmetric (edge-repeating) reflection of an index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Normalized separable Gaussian blur with reflective boundary handling.
pub fn blur(m: &Mask, sigma: f64, radius: usize) -> Result<Mask> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::contract(format!("blur sigma must be positive, got {sigma}")));
    }
    if radius < 1 {
        return Err(Error::contract("blur kernel radius must be at least 1"));
    }
    let kernel = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let (h, w) = (m.height, m.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * m.data[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
            data[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Mask { height: h, width: w, data })
}

/// Square-element binary dilation of `m >= 0.5`.
pub fn dilate(m: &Mask, radius: usize) -> Mask {
    let (h, w) = (m.height, m.width);
    let r = radius as isize;
    let on = m.support(0.5);
    // Row pass then column pass; a square element is separable.
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = (x as isize - r).max(0) as usize;
            let hi = ((x as isize + r) as usize).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| on[y * w + xx]);
        }
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = (y as isize - r).max(0) as usize;
            let hi = ((y as isize + r) as usize).min(h - 1);
            if (lo..=hi).any(|yy| rows[yy * w + x]) {
                data[y * w + x] = 1.0;
            }
        }
    }
    Mask { height: h, width: w, data }
}

/// The enlarged blending mask: dilate by `radius`, then blur.
pub fn dilate_then_blur(m: &Mask, radius: usize, sigma: f64, kernel_radius: usize) -> Result<Mask> {
    if radius < 1 {
        return Err(Error::contract("dilation radius must be at least 1"));
    }
    blur(&dilate(m, radius), sigma, kernel_radius)
}

/// Nearest-neighbour downsampling that samples each target cell's centre.
pub fn nn_downsample(m: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height > m.height || width > m.width || height == 0 || width == 0 {
        return Err(Error::contract(format!(
            "nearest-neighbour downsampling cannot go from {}x{} to {height}x{width}",
            m.height, m.width
        )));
    }
    let src = |i: usize, out: usize, inp: usize| (((i as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1);
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = src(y, height, m.height);
        for x in 0..width {
            data.push(m.get(sy, src(x, width, m.width)));
        }
    }
    Ok(Mask { height, width, data })
}

pub fn load_mask(path: &Path) -> Result<MaskAsset> {
    let bytes = std::fs::read(path)?;
    let mask = Mask::decode_png(&bytes).map_err(|e| match e {
        Error::Image { reason, .. } => Error::Image {
            path: Some(path.to_path_buf()),
            reason,
        },
        other => other,
    })?;
    Ok(MaskAsset {
        mask,
        provenance: Provenance::File(path.to_path_buf()),
        blur: None,
    })
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, mask.encode_png())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_keeps_ones() {
        let b = blur(&Mask::ones(9), 1.3, 3).unwrap();
        assert!(b.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn blur_of_impulse_matches_kernel_products() {
        let m = Mask::from_fn(9, 9, |y, x| if y == 4 && x == 4 { 1.0 } else { 0.0 });
        let b = blur(&m, 1.0, 2).unwrap();
        // Kernel evaluated directly: exp(-i²/2) normalized over -2..=2.
        let raw: Vec<f64> = (-2..=2).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).collect();
        let total: f64 = raw.iter().sum();
        let centre = (raw[2] / total).powi(2);
        assert!((b.get(4, 4) - centre).abs() < 1e-12);
        let off = raw[1] / total * raw[2] / total;
        assert!((b.get(4, 5) - off).abs() < 1e-12);
        assert!((b.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_commutes_with_complement() {
        let m = Mask::rect(12, 2, 3, 8, 7);
        let a = blur(&m.complement(), 1.5, 3).unwrap();
        let b = blur(&m, 1.5, 3).unwrap().complement();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_rejects_bad_parameters() {
        assert!(blur(&Mask::ones(4), 0.0, 1).is_err());
        assert!(blur(&Mask::ones(4), 1.0, 0).is_err());
    }

    #[test]
    fn huge_dilation_fills_frame() {
        let m = Mask::rect(16, 7, 7, 8, 8);
        let d = dilate_then_blur(&m, 20, 1.0, 2).unwrap();
        assert!(d.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_dilation_radius_is_rejected() {
        assert!(dilate_then_blur(&Mask::ones(8), 0, 1.0, 2).is_err());
    }

    #[test]
    fn dilated_support_contains_original() {
        let m = Mask::rect(32, 10, 12, 18, 20);
        let d = dilate_then_blur(&m, 2, 1.0, 2).unwrap();
        let s = d.support(0.5);
        for (i, &on) in m.support(0.5).iter().enumerate() {
            if on {
                assert!(s[i]);
            }
        }
        assert!(d.sum() > m.sum());
    }

    #[test]
    fn nn_downsample_samples_cell_centres() {
        let m = Mask::rect(4, 0, 0, 2, 2);
        let d = nn_downsample(&m, 2, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(nn_downsample(&m, 4, 4).unwrap(), m);
        assert!(nn_downsample(&m, 8, 8).is_err());
        let c = nn_downsample(&Mask::filled(8, 8, 0.3), 2, 2).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn png_scaling_law() {
        let gray = image::GrayImage::from_raw(1, 1, vec![128]).unwrap();
        let mut bytes = Vec::new();
        gray.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let m = Mask::decode_png(&bytes).unwrap();
        assert_eq!(m.get(0, 0), 128.0 / 255.0);
    }

    #[test]
    fn rgb_png_is_rejected_as_mask() {
        let rgb = image::RgbImage::from_raw(1, 1, vec![1, 2, 3]).unwrap();
        let mut bytes = Vec::new();
        rgb.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        assert!(Mask::decode_png(&bytes).is_err());
    }

    #[test]
    fn sixteen_bit_png_is_rejected_as_mask() {
        let g16: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_raw(1, 1, vec![300]).unwrap();
        let mut bytes = Vec::new();
        g16.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        assert!(Mask::decode_png(&bytes).is_err());
    }
}
