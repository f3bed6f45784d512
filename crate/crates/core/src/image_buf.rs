use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// An RGB image with real-valued pixels, nominally in `[0, 1]`.
///
/// Pixels are stored interleaved (`height × width × 3`). Generator output is
/// not clamped, so optimization can see gradients everywhere; values are
/// clamped only when quantized for export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::contract(format!(
                "image buffer of {} values cannot be {height}x{width}x3",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Side length of a square image.
    pub fn side(&self) -> Option<usize> {
        (self.height == self.width).then_some(self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn same_size(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_size(&self, other: &ImageBuffer, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn to_chw(&self) -> Tensor3 {
        let hw = self.height * self.width;
        let mut t = Tensor3::zeros(3, self.height, self.width);
        for p in 0..hw {
            for c in 0..3 {
                t.data[c * hw + p] = self.pixels[p * 3 + c];
            }
        }
        t
    }

    pub fn from_chw(t: &Tensor3) -> Result<Self> {
        if t.channels != 3 {
            return Err(Error::contract(format!("expected 3 channels, got {}", t.channels)));
        }
        let hw = t.plane_len();
        let mut pixels = vec![0.0; hw * 3];
        for p in 0..hw {
            for c in 0..3 {
                pixels[p * 3 + c] = t.data[c * hw + p];
            }
        }
        Ok(Self {
            height: t.height,
            width: t.width,
            pixels,
        })
    }

    /// Quantizes to 8-bit RGB, clamping to `[0, 1]` first.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.pixels.iter().map(|&v| quantize(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let pixels = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels,
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.to_rgb8()
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: None,
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: Some(path.to_path_buf()),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png())?;
        Ok(())
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys: Vec<_> = (0..height).map(|y| bilinear_taps(y, height, self.height)).collect();
        let xs: Vec<_> = (0..width).map(|x| bilinear_taps(x, width, self.width)).collect();
        let mut out = Self::filled(height, width, 0.0);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.set(oy, ox, c, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }

    /// Per-pixel luma using ITU-R BT.601 weights.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn bilinear_taps(out_index: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_index as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let img = ImageBuffer::from_fn(3, 2, |y, x, c| (y * 10 + x * 3 + c) as f64);
        assert_eq!(ImageBuffer::from_chw(&img.to_chw()).unwrap(), img);
    }

    #[test]
    fn png_round_trip_of_quantized_values() {
        let img = ImageBuffer::from_fn(4, 4, |y, x, c| ((y * 4 + x) * 3 + c) as f64 / 255.0);
        let back = ImageBuffer::decode_png(&img.encode_png()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = ImageBuffer::filled(8, 8, 0.25);
        let r = img.resize_bilinear(3, 5);
        assert!(r.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let img = ImageBuffer::from_fn(2, 2, |y, x, _| (y * 2 + x) as f64);
        let r = img.resize_bilinear(1, 1);
        assert!((r.get(0, 0, 0) - 1.5).abs() < 1e-12);
    }
}
