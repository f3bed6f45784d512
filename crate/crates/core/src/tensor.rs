//! Dense channel-major tensors and the handful of kernels the generator and
//! the feature extractor are built from. Every kernel that participates in a
//! differentiable path has a matching adjoint here.

use crate::error::{Error, Result};

/// A `channels × height × width` tensor stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "tensor data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = a · b (+ c when accumulate)`, row-major, `a` is `m×k`, `b` is `k×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the row-major extents described by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b`, where `a` is stored row-major as `k×m`.
pub(crate) fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: `a` is read through transposed strides over its own k×m extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · bᵀ`, where `b` is stored row-major as `n×k`.
pub(crate) fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: `b` is read through transposed strides over its own n×k extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3×3 convolution, stride 1, zero padding 1. Weights are `[out][in][3][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv3x3 {
    fn im2col(&self, input: &Tensor3) -> Vec<f64> {
        let (h, w) = (input.height, input.width);
        let hw = h * w;
        let mut col = vec![0.0; self.in_channels * 9 * hw];
        for ci in 0..self.in_channels {
            let plane = input.plane(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let hw = input.plane_len();
        let col = self.im2col(input);
        let mut out = Tensor3::zeros(self.out_channels, input.height, input.width);
        gemm(self.out_channels, self.in_channels * 9, hw, &self.weight, &col, &mut out.data, false);
        if let Some(bias) = &self.bias {
            for (c, b) in bias.iter().enumerate() {
                out.plane_mut(c).iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Gradient with respect to the input given the gradient of the output.
    pub fn backward_input(&self, grad_out: &Tensor3) -> Tensor3 {
        let (h, w) = (grad_out.height, grad_out.width);
        let hw = h * w;
        let k = self.in_channels * 9;
        let mut dcol = vec![0.0; k * hw];
        gemm_at(k, self.out_channels, hw, &self.weight, &grad_out.data, &mut dcol);
        let mut grad_in = Tensor3::zeros(self.in_channels, h, w);
        for ci in 0..self.in_channels {
            let plane = grad_in.plane_mut(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcol[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * w..][..w];
                        let src = &row[y * w..][..w];
                        match kx {
                            0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                            _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// 1×1 convolution (a per-pixel dense layer). Weights are `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1x1 {
    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        let hw = input.plane_len();
        let mut out = Tensor3::zeros(self.out_channels, input.height, input.width);
        gemm(self.out_channels, self.in_channels, hw, &self.weight, &input.data, &mut out.data, false);
        for (c, b) in self.bias.iter().enumerate() {
            out.plane_mut(c).iter_mut().for_each(|v| *v += b);
        }
        out
    }

    pub fn backward_input(&self, grad_out: &Tensor3) -> Tensor3 {
        let hw = grad_out.plane_len();
        let mut grad_in = Tensor3::zeros(self.in_channels, grad_out.height, grad_out.width);
        gemm_at(self.in_channels, self.out_channels, hw, &self.weight, &grad_out.data, &mut grad_in.data);
        grad_in
    }
}

// Half-pixel bilinear ×2 along one axis: output 2i takes 3/4 of i and 1/4 of
// i-1, output 2i+1 takes 3/4 of i and 1/4 of i+1, edges clamped.
fn upsample_axis_taps(i_out: usize, n_in: usize) -> (usize, usize) {
    let i = i_out / 2;
    let other = if i_out.is_multiple_of(2) {
        i.saturating_sub(1)
    } else {
        (i + 1).min(n_in - 1)
    };
    (i, other)
}

/// Bilinear ×2 upsampling with half-pixel centres and clamped edges.
pub fn upsample2x(input: &Tensor3) -> Tensor3 {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor3::zeros(input.channels, oh, ow);
    let mut rows = vec![0.0; oh * w];
    for c in 0..input.channels {
        let src = input.plane(c);
        for oy in 0..oh {
            let (a, b) = upsample_axis_taps(oy, h);
            for x in 0..w {
                rows[oy * w + x] = 0.75 * src[a * w + x] + 0.25 * src[b * w + x];
            }
        }
        let dst = out.plane_mut(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let (a, b) = upsample_axis_taps(ox, w);
                dst[oy * ow + ox] = 0.75 * rows[oy * w + a] + 0.25 * rows[oy * w + b];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_adjoint(grad_out: &Tensor3) -> Tensor3 {
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (h, w) = (oh / 2, ow / 2);
    let mut grad_in = Tensor3::zeros(grad_out.channels, h, w);
    let mut rows = vec![0.0; oh * w];
    for c in 0..grad_out.channels {
        let g = grad_out.plane(c);
        rows.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let (a, b) = upsample_axis_taps(ox, w);
                let v = g[oy * ow + ox];
                rows[oy * w + a] += 0.75 * v;
                rows[oy * w + b] += 0.25 * v;
            }
        }
        let dst = grad_in.plane_mut(c);
        for oy in 0..oh {
            let (a, b) = upsample_axis_taps(oy, h);
            for x in 0..w {
                let v = rows[oy * w + x];
                dst[a * w + x] += 0.75 * v;
                dst[b * w + x] += 0.25 * v;
            }
        }
    }
    grad_in
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
/// Returns the pooled tensor and the flat argmax index of every output cell.
pub fn maxpool2x2(input: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(input.channels, h, w);
    let mut argmax = vec![0usize; input.channels * h * w];
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (c * input.height + 2 * y + dy) * input.width + 2 * x + dx;
                    if input.data[idx] > best {
                        best = input.data[idx];
                        best_idx = idx;
                    }
                }
                let o = (c * h + y) * w + x;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2x2_adjoint(grad_out: &Tensor3, argmax: &[usize], input_shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = input_shape;
    let mut grad_in = Tensor3::zeros(c, h, w);
    for (g, &idx) in grad_out.data.iter().zip(argmax) {
        grad_in.data[idx] += g;
    }
    grad_in
}
