//! Dense row-major tensors and the convolution kernels behind the networks.
//!
//! Everything runs on the CPU in a deterministic order. Convolutions are
//! lowered to GEMM through an explicit im2col buffer, which is where nearly
//! all of the training time goes.

use crate::error::{DfaError, Result};
use std::fmt::Debug;

/// Floating-point element type for tensors. `f32` is the working precision;
/// `f64` instantiations back the finite-difference verification paths.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Default + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C := alpha * A(m x k) * B(k x n) + beta * C, row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
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
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
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
}

/// Dense row-major tensor of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(DfaError::shape("tensor construction", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over all elements, accumulated in f64.
    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        sum / self.data.len() as f64
    }

    /// Population variance over all elements (E[x^2] - E[x]^2), in f64.
    pub fn variance_f64(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let n = self.data.len() as f64;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for v in &self.data {
            let x = v.as_f64();
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n;
        (sum_sq / n - mean * mean).max(0.0)
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.as_f64()))
    }
}

/// Geometry of a 2D convolution over CHW feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn out_hw(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let h = (in_h + 2 * self.padding - self.kernel) / self.stride + 1;
        let w = (in_w + 2 * self.padding - self.kernel) / self.stride + 1;
        (h, w)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds `input` (C x H x W) into a (C*k*k) x (H_out*W_out) column matrix.
pub fn im2col<T: Real>(input: &Tensor<T>, spec: &ConvSpec, cols: &mut Vec<T>) {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    debug_assert_eq!(c, spec.in_channels);
    let (oh, ow) = spec.out_hw(h, w);
    let n_cols = oh * ow;
    cols.clear();
    cols.resize(spec.patch_len() * n_cols, T::zero());
    let data = input.data();
    let k = spec.kernel;
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k * k + ky * k + kx) * n_cols;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst_row + ox] = plane[src_row + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a C x H x W gradient map
/// (the adjoint of [`im2col`]).
pub fn col2im_accumulate<T: Real>(
    cols: &[T],
    spec: &ConvSpec,
    in_h: usize,
    in_w: usize,
    out: &mut Tensor<T>,
) {
    let (oh, ow) = spec.out_hw(in_h, in_w);
    let n_cols = oh * ow;
    let k = spec.kernel;
    let data = out.data_mut();
    for ch in 0..spec.in_channels {
        let plane = &mut data[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k * k + ky * k + kx) * n_cols;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let src_row = row + oy * ow;
                    let dst_row = iy as usize * in_w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        plane[dst_row + ix as usize] += cols[src_row + ox];
                    }
                }
            }
        }
    }
}

/// Convolution forward pass. `weight` is (out_ch, in_ch, k, k), `bias` is
/// (out_ch,). Returns the output map and the im2col buffer for reuse in the
/// backward pass.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> (Tensor<T>, Vec<T>) {
    let (h, w) = (input.shape[1], input.shape[2]);
    let (oh, ow) = spec.out_hw(h, w);
    let n_cols = oh * ow;
    let mut cols = Vec::new();
    im2col(input, spec, &mut cols);
    let mut out = Tensor::zeros(&[spec.out_channels, oh, ow]);
    T::gemm(
        spec.out_channels,
        spec.patch_len(),
        n_cols,
        T::one(),
        weight.data(),
        &cols,
        T::zero(),
        out.data_mut(),
    );
    let out_data = out.data_mut();
    for oc in 0..spec.out_channels {
        let b = bias.data()[oc];
        for v in &mut out_data[oc * n_cols..(oc + 1) * n_cols] {
            *v += b;
        }
    }
    (out, cols)
}

/// Gradients of a convolution given the saved im2col buffer.
/// Returns (grad_input, grad_weight, grad_bias).
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    cols: &[T],
    weight: &Tensor<T>,
    spec: &ConvSpec,
    in_h: usize,
    in_w: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (oh, ow) = spec.out_hw(in_h, in_w);
    let n_cols = oh * ow;
    let patch = spec.patch_len();

    // dW = dOut (oc x n) * cols^T (n x patch); transpose done via gemm on
    // cols with swapped strides is avoided by building cols^T explicitly once.
    let mut cols_t = vec![T::zero(); cols.len()];
    for r in 0..patch {
        for cidx in 0..n_cols {
            cols_t[cidx * patch + r] = cols[r * n_cols + cidx];
        }
    }
    let mut grad_weight = Tensor::zeros(&[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel]);
    T::gemm(
        spec.out_channels,
        n_cols,
        patch,
        T::one(),
        grad_out.data(),
        &cols_t,
        T::zero(),
        grad_weight.data_mut(),
    );

    let mut grad_bias = Tensor::zeros(&[spec.out_channels]);
    for oc in 0..spec.out_channels {
        let mut acc = T::zero();
        for v in &grad_out.data()[oc * n_cols..(oc + 1) * n_cols] {
            acc += *v;
        }
        grad_bias.data_mut()[oc] = acc;
    }

    // dCols = W^T (patch x oc) * dOut (oc x n)
    let mut weight_t = vec![T::zero(); weight.len()];
    for oc in 0..spec.out_channels {
        for p in 0..patch {
            weight_t[p * spec.out_channels + oc] = weight.data()[oc * patch + p];
        }
    }
    let mut grad_cols = vec![T::zero(); patch * n_cols];
    T::gemm(
        patch,
        spec.out_channels,
        n_cols,
        T::one(),
        &weight_t,
        grad_out.data(),
        T::zero(),
        &mut grad_cols,
    );
    let mut grad_input = Tensor::zeros(&[spec.in_channels, in_h, in_w]);
    col2im_accumulate(&grad_cols, spec, in_h, in_w, &mut grad_input);

    (grad_input, grad_weight, grad_bias)
}

/// Nearest-neighbor 2x upsample of a CHW map.
pub fn upsample2x<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut out = Tensor::zeros(&[c, h * 2, w * 2]);
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = src[ch * h * w + y * w + x];
                let base = ch * 4 * h * w + 2 * y * 2 * w + 2 * x;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = (grad_out.shape[0], grad_out.shape[1], grad_out.shape[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    let src = grad_out.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = ch * h2 * w2 + 2 * y * w2 + 2 * x;
                dst[ch * h * w + y * w + x] =
                    src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Direct nested-loop convolution used as the oracle for the GEMM path.
    fn conv2d_naive(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (oh, ow) = spec.out_hw(h, w);
        let mut out = Tensor::zeros(&[spec.out_channels, oh, ow]);
        for oc in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data()[ic * h * w + iy as usize * w + ix as usize];
                                let wv = weight.data()
                                    [((oc * c + ic) * spec.kernel + ky) * spec.kernel + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out.data_mut()[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, h, w) in &[(1usize, 7usize, 9usize), (2, 8, 10), (2, 16, 12)] {
            let spec = ConvSpec {
                in_channels: 3,
                out_channels: 5,
                kernel: 3,
                stride,
                padding: 1,
            };
            let input = random_tensor(&[3, h, w], &mut rng);
            let weight = random_tensor(&[5, 3, 3, 3], &mut rng);
            let bias = random_tensor(&[5], &mut rng);
            let (got, _) = conv2d_forward(&input, &weight, &bias, &spec);
            let want = conv2d_naive(&input, &weight, &bias, &spec);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let input = random_tensor(&[2, 6, 8], &mut rng);
        let weight = random_tensor(&[3, 2, 3, 3], &mut rng);
        let bias = random_tensor(&[3], &mut rng);

        // Scalar objective: weighted sum of outputs with fixed coefficients.
        let coeff = random_tensor(&[3, 3, 4], &mut rng);
        let loss = |inp: &Tensor<f64>, wgt: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let (out, _) = conv2d_forward(inp, wgt, b, &spec);
            out.data().iter().zip(coeff.data()).map(|(o, c)| o * c).sum()
        };

        let (_, cols) = conv2d_forward(&input, &weight, &bias, &spec);
        let (gi, gw, gb) = conv2d_backward(&coeff, &cols, &weight, &spec, 6, 8);

        let eps = 1e-6;
        let assert_close = |analytic: f64, numeric: f64| {
            assert!(
                (analytic - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                "{analytic} vs {numeric}"
            );
        };
        let central = |f: &dyn Fn(f64) -> f64| (f(eps) - f(-eps)) / (2.0 * eps);

        for idx in [0usize, 17, 40, 95] {
            let numeric = central(&|d| {
                let mut t = input.clone();
                t.data_mut()[idx] += d;
                loss(&t, &weight, &bias)
            });
            assert_close(gi.data()[idx], numeric);
        }
        for idx in [0usize, 10, 33, 53] {
            let numeric = central(&|d| {
                let mut t = weight.clone();
                t.data_mut()[idx] += d;
                loss(&input, &t, &bias)
            });
            assert_close(gw.data()[idx], numeric);
        }
        for idx in 0..3usize {
            let numeric = central(&|d| {
                let mut t = bias.clone();
                t.data_mut()[idx] += d;
                loss(&input, &weight, &t)
            });
            assert_close(gb.data()[idx], numeric);
        }
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[2, 3, 4], &mut rng);
        let up = upsample2x(&x);
        assert_eq!(up.shape(), &[2, 6, 8]);
        // Adjoint check: <up(x), y> == <x, up^T(y)>
        let y = random_tensor(&[2, 6, 8], &mut rng);
        let lhs: f64 = up.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let down = upsample2x_backward(&y);
        let rhs: f64 = x.data().iter().zip(down.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
