//! Dense row-major `f64` arrays and the handful of kernels the layer stack needs.
//!
//! Per-sample kernels (`conv2d`, `global_avg_pool`, `max_pool2d`) work on a
//! single `[C, H, W]` feature map; the layer engine loops them over the batch
//! dimension. Dense products go through [`gemm`], a thin wrapper over
//! `matrixmultiply::dgemm` that accepts arbitrary row/column strides so
//! transposed operands never need to be materialized.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be nonempty with positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an empty or zero-extent shape.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Elementwise `self += scale * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// `c = alpha * a · b + beta * c` for an `m×k` by `k×n` product with explicit strides.
///
/// Panics if any operand slice is too short for the requested extents and strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() >= last(k, n, rsb, csb), "gemm: rhs too short");
    assert!(c.len() >= last(m, n, rsc, csc), "gemm: output too short");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul of {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        1.0,
        &a.data,
        (k, 1),
        &b.data,
        (n, 1),
        0.0,
        &mut out.data,
        (n, 1),
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

/// Resolved extents and offsets for one cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `input` is `[C, H, W]`, `kernel` is `[F, C, kh, kw]`.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || kernel[1] != input[0] {
            return Err(Error::Dimension(format!(
                "conv2d input {input:?} with kernel {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be >= 1".into()));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (f, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        let (out_h, pad_top, out_w, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Dimension(format!(
                        "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                ((h - kh) / stride + 1, 0, (w - kw) / stride + 1, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ph / 2, ow, pw / 2)
            }
        };
        Ok(ConvGeometry {
            channels: c,
            in_h: h,
            in_w: w,
            filters: f,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.filters, self.out_h, self.out_w]
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.filters * self.out_h * self.out_w
    }

    /// Input row for output row `oy` and kernel row `ky`, or `None` inside the padding.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&iy| iy < self.in_h)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad_left)
            .filter(|&ix| ix < self.in_w)
    }

    /// Cross-correlation of one sample; `out` is overwritten.
    pub(crate) fn forward_into(&self, x: &[f64], k: &[f64], out: &mut [f64]) {
        let (hw, khw) = (self.in_h * self.in_w, self.kh * self.kw);
        for f in 0..self.filters {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut acc = 0.0;
                    for c in 0..self.channels {
                        let kbase = (f * self.channels + c) * khw;
                        for ky in 0..self.kh {
                            let Some(iy) = self.in_row(oy, ky) else {
                                continue;
                            };
                            for kx in 0..self.kw {
                                if let Some(ix) = self.in_col(ox, kx) {
                                    acc += k[kbase + ky * self.kw + kx]
                                        * x[c * hw + iy * self.in_w + ix];
                                }
                            }
                        }
                    }
                    out[(f * self.out_h + oy) * self.out_w + ox] = acc;
                }
            }
        }
    }

    /// Accumulates `∂/∂x` and `∂/∂k` of `Σ dy ⊙ conv(x, k)` into `dx` and `dk`.
    pub(crate) fn backward_accumulate(
        &self,
        x: &[f64],
        k: &[f64],
        dy: &[f64],
        mut dx: Option<&mut [f64]>,
        dk: &mut [f64],
    ) {
        let (hw, khw) = (self.in_h * self.in_w, self.kh * self.kw);
        for f in 0..self.filters {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let g = dy[(f * self.out_h + oy) * self.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..self.channels {
                        let kbase = (f * self.channels + c) * khw;
                        for ky in 0..self.kh {
                            let Some(iy) = self.in_row(oy, ky) else {
                                continue;
                            };
                            for kx in 0..self.kw {
                                if let Some(ix) = self.in_col(ox, kx) {
                                    let xi = c * hw + iy * self.in_w + ix;
                                    let ki = kbase + ky * self.kw + kx;
                                    dk[ki] += g * x[xi];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xi] += g * k[ki];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) of `x: [C,H,W]` with `k: [F,C,kh,kw]`.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let geo = ConvGeometry::new(&x.shape, &k.shape, stride, padding)?;
    let mut out = Tensor::zeros(&geo.output_shape());
    geo.forward_into(&x.data, &k.data, &mut out.data);
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Max-subtracted softmax in place.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 1 {
        return Err(Error::Dimension(format!(
            "softmax expects a vector, got {:?}",
            z.shape
        )));
    }
    let mut out = z.clone();
    softmax_in_place(&mut out.data);
    Ok(out)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "global_avg_pool expects [C,H,W], got {:?}",
            x.shape
        )));
    }
    let hw = x.shape[1] * x.shape[2];
    let data = x
        .data
        .chunks_exact(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![x.shape[0]], data)
}

/// Output extents of a valid max pool, or `None` if the window does not fit.
pub(crate) fn pool_extent(h: usize, w: usize, size: usize, stride: usize) -> Option<(usize, usize)> {
    if size == 0 || stride == 0 || size > h || size > w {
        return None;
    }
    Some(((h - size) / stride + 1, (w - size) / stride + 1))
}

/// Valid max pooling over `[C,H,W]`; also returns the flat input index chosen per output.
pub fn max_pool2d(x: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let bad = || {
        Error::Dimension(format!(
            "max_pool2d window {size} stride {stride} on {:?}",
            x.shape
        ))
    };
    if x.rank() != 3 {
        return Err(bad());
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = pool_extent(h, w, size, stride).ok_or_else(bad)?;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut arg = vec![0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                        // strict '>' keeps the first maximum on ties
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out.data[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn random(shape: &[usize], rng: &mut RngState) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data[i * k + p] * b.data[p * n + j];
                }
            }
        }
        out
    }

    /// Zero-pads explicitly, then slides the kernel.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Vec<f64> {
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (f, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
        let (oh, ow, pt, pl) = match padding {
            Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        let (ph, pw) = (h + 2 * pt + kh, w + 2 * pl + kw);
        let mut padded = vec![0.0; c * ph * pw];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    padded[(ci * ph + y + pt) * pw + xx + pl] = x.data[(ci * h + y) * w + xx];
                }
            }
        }
        let mut out = vec![0.0; f * oh * ow];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                out[(fi * oh + oy) * ow + ox] += k.data
                                    [((fi * c + ci) * kh + ky) * kw + kx]
                                    * padded[(ci * ph + oy * stride + ky) * pw + ox * stride + kx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i, &v).unwrap().data(), &[3.0, 4.0]);
        let row = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(matmul(&row, &v).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] by [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_and_conv_match_loop_oracles_on_random_shapes() {
        let mut rng = RngState::new(11);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        assert!(max_rel(matmul(&a, &b).unwrap().data(), &matmul_oracle(&a, &b)) < 1e-12);

        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let got = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(got.shape(), &[3, 3, 3]);
        assert!(max_rel(got.data(), &conv_oracle(&x, &k, 1, Padding::Valid)) < 1e-12);

        for trial in 0..200 {
            let m = 1 + rng.below(7);
            let kk = 1 + rng.below(7);
            let n = 1 + rng.below(7);
            let a = random(&[m, kk], &mut rng);
            let b = random(&[kk, n], &mut rng);
            assert!(max_rel(matmul(&a, &b).unwrap().data(), &matmul_oracle(&a, &b)) < 1e-12);

            let c = 1 + rng.below(3);
            let h = 2 + rng.below(6);
            let w = 2 + rng.below(6);
            let f = 1 + rng.below(3);
            let kh = 1 + rng.below(h.min(4));
            let kw = 1 + rng.below(w.min(4));
            let stride = 1 + rng.below(2);
            let padding = if trial % 2 == 0 { Padding::Valid } else { Padding::Same };
            let x = random(&[c, h, w], &mut rng);
            let k = random(&[f, c, kh, kw], &mut rng);
            let got = conv2d(&x, &k, stride, padding).unwrap();
            assert!(max_rel(got.data(), &conv_oracle(&x, &k, stride, padding)) < 1e-12);
        }
    }

    #[test]
    fn conv_trivial_cases() {
        let mut rng = RngState::new(3);
        let x = random(&[1, 4, 6], &mut rng);
        let one = Tensor::filled(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &one, 1, Padding::Valid).unwrap(), x);

        let ones = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&ones, &k, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);

        let x = Tensor::zeros(&[1, 8, 8]);
        let k = Tensor::zeros(&[3, 1, 3, 3]);
        assert_eq!(conv2d(&x, &k, 1, Padding::Same).unwrap().shape(), &[3, 8, 8]);
    }

    #[test]
    fn conv_kernel_larger_than_input_is_an_error() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::filled(&[2, 3], -0.5);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::filled(&[4], 1.5);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::zeros(&[4])).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let big = softmax(&Tensor::from_vec(vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] < 1e-300);

        // e^k / (e + e^2 + e^3), evaluated independently
        let got = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let s: f64 = e.iter().sum();
        for (g, ek) in got.data().iter().zip(e) {
            assert!((g - ek / s).abs() < 1e-12);
        }
        // frozen reference values
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let mut rng = RngState::new(5);
        for _ in 0..200 {
            let k = 1 + rng.below(12);
            let z = random(&[k], &mut rng);
            let shift = rng.uniform(-50.0, 50.0);
            let mut zs = z.clone();
            zs.data_mut().iter_mut().for_each(|v| *v += shift);
            let p = softmax(&z).unwrap();
            let q = softmax(&zs).unwrap();
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!(max_rel(p.data(), q.data()) < 1e-12);
        }
    }

    #[test]
    fn global_avg_pool_cases() {
        let c = Tensor::filled(&[2, 3, 3], 1.75);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[1.75, 1.75]);
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);

        let mut rng = RngState::new(8);
        let x = random(&[3, 4, 5], &mut rng);
        let got = global_avg_pool(&x).unwrap();
        for ch in 0..3 {
            let mut s = 0.0;
            for i in 0..20 {
                s += x.data()[ch * 20 + i];
            }
            assert!((got.data()[ch] - s / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::new(vec![1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 7.0]).unwrap();
        let (out, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0]);
        assert_eq!(arg, vec![1, 6]);
    }

    #[test]
    fn conv_backward_matches_adjoint_identity() {
        // <dy, conv(x,k)> is bilinear, so its gradients satisfy
        // <dx, x> = <dk, k> = <dy, conv(x,k)>.
        let mut rng = RngState::new(21);
        for padding in [Padding::Valid, Padding::Same] {
            let x = random(&[2, 6, 5], &mut rng);
            let k = random(&[3, 2, 3, 2], &mut rng);
            let geo = ConvGeometry::new(x.shape(), k.shape(), 2, padding).unwrap();
            let y = conv2d(&x, &k, 2, padding).unwrap();
            let dy = random(y.shape(), &mut rng);
            let mut dx = vec![0.0; x.len()];
            let mut dk = vec![0.0; k.len()];
            geo.backward_accumulate(x.data(), k.data(), dy.data(), Some(&mut dx), &mut dk);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let inner = dot(dy.data(), y.data());
            assert!((dot(&dx, x.data()) - inner).abs() < 1e-12 * inner.abs().max(1.0));
            assert!((dot(&dk, k.data()) - inner).abs() < 1e-12 * inner.abs().max(1.0));
        }
    }
}
