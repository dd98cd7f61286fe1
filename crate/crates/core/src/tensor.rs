//! Dense row-major tensors of `f64`.
//!
//! All reductions run in a fixed index order, so results are reproducible
//! bit for bit given the same inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", &self.shape, &[0, 0])),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("hadamard", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config(format!(
            "tensor shape {shape:?} must have at least one dimension, all >= 1"
        )));
    }
    Ok(())
}

/// `c[i][j] = sum_t a[i][t] * b[t][j]`, accumulated in order `t = 0..k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut c = vec![0.0; m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut c);
    Tensor::new(vec![m, n], c)
}

/// `c += a[m x k] * b[k x n]`. For every `(i, j)` the sum over `t`
/// is accumulated in increasing `t`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a^T * b` with `a: [k x m]`, `b: [k x n]`, `c: [m x n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a * b^T` with `a: [m x k]`, `b: [n x k]`, `c: [m x n]`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// Geometry of a 2-D convolution over one `C x H x W` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output `(H', W')`, or a configuration error when the kernel does not
    /// fit or the stride does not divide the padded extent.
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        let ph = self.height + 2 * self.pad;
        let pw = self.width + 2 * self.pad;
        if self.kernel_h == 0 || self.kernel_w == 0 || self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::Config(format!(
                "kernel {}x{} does not fit padded input {}x{}",
                self.kernel_h, self.kernel_w, ph, pw
            )));
        }
        let (sh, sw) = (ph - self.kernel_h, pw - self.kernel_w);
        if sh % self.stride != 0 || sw % self.stride != 0 {
            return Err(Error::Config(format!(
                "non-integer convolution output: ({ph}-{})/{} or ({pw}-{})/{}",
                self.kernel_h, self.stride, self.kernel_w, self.stride
            )));
        }
        Ok((sh / self.stride + 1, sw / self.stride + 1))
    }

    /// Rows of the unrolled kernel matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }
}

/// Unrolls one sample into `[H'W' x C*kh*kw]` patches. Column index is
/// `(c * kh + ky) * kw + kx`; padding reads as zero.
pub(crate) fn im2col(g: &ConvGeometry, oh: usize, ow: usize, x: &[f64], cols: &mut [f64]) {
    let pl = g.patch_len();
    debug_assert_eq!(cols.len(), oh * ow * pl);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            let mut idx = 0;
            for c in 0..g.channels {
                let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        row[idx] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
pub(crate) fn col2im(g: &ConvGeometry, oh: usize, ow: usize, cols: &[f64], dx: &mut [f64]) {
    let pl = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            let mut idx = 0;
            for c in 0..g.channels {
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                            dx[c * g.height * g.width + iy as usize * g.width + ix as usize] +=
                                row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Reorders `[F x C x kh x kw]` kernels into the `[C*kh*kw x F]` matrix
/// used everywhere else: one column per filter.
pub fn kernels_to_matrix(kernels: &Tensor) -> Result<Tensor> {
    let [f, c, kh, kw] = kernels.shape[..] else {
        return Err(Error::dim("kernels_to_matrix", &kernels.shape, &[0, 0, 0, 0]));
    };
    let rows = c * kh * kw;
    let mut out = vec![0.0; rows * f];
    for fi in 0..f {
        for r in 0..rows {
            out[r * f + fi] = kernels.data[fi * rows + r];
        }
    }
    Tensor::new(vec![rows, f], out)
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `input: [N x C x H x W]`, `kernels: [F x C x kh x kw]`, output
/// `[N x F x H' x W']` with `H' = (H + 2 pad - kh) / stride + 1`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape[..] else {
        return Err(Error::dim("conv2d", &input.shape, &kernels.shape));
    };
    let [f, kc, kh, kw] = kernels.shape[..] else {
        return Err(Error::dim("conv2d", &input.shape, &kernels.shape));
    };
    if kc != c {
        return Err(Error::dim("conv2d", &input.shape, &kernels.shape));
    }
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad,
    };
    let (oh, ow) = g.output_hw()?;
    let wmat = kernels_to_matrix(kernels)?;
    let mut out = vec![0.0; n * f * oh * ow];
    conv_forward(&g, oh, ow, n, f, &input.data, wmat.data(), &mut out);
    Tensor::new(vec![n, f, oh, ow], out)
}

/// Batched convolution against a `[C*kh*kw x F]` kernel matrix, writing
/// `[N x F x H' x W']` into `out` (overwritten).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    n: usize,
    f: usize,
    x: &[f64],
    wmat: &[f64],
    out: &mut [f64],
) {
    let pl = g.patch_len();
    let in_len = g.channels * g.height * g.width;
    let npos = oh * ow;
    let mut cols = vec![0.0; npos * pl];
    let mut prod = vec![0.0; npos * f];
    for s in 0..n {
        im2col(g, oh, ow, &x[s * in_len..(s + 1) * in_len], &mut cols);
        prod.iter_mut().for_each(|v| *v = 0.0);
        gemm_nn(npos, pl, f, &cols, wmat, &mut prod);
        let o = &mut out[s * f * npos..(s + 1) * f * npos];
        for p in 0..npos {
            for fi in 0..f {
                o[fi * npos + p] = prod[p * f + fi];
            }
        }
    }
}

/// Tensor of independent Bernoulli(`keep_prob`) draws in row-major order,
/// one `u64` per element.
pub fn bernoulli_mask(shape: &[usize], keep_prob: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Domain(format!(
            "keep probability {keep_prob} outside [0, 1]"
        )));
    }
    check_shape(shape)?;
    Ok(Tensor::from_fn(shape, |_| {
        if rng.bernoulli(keep_prob) {
            1.0
        } else {
            0.0
        }
    }))
}
