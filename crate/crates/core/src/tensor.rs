//! Dense row-major tensors and the handful of kernels a small CNN needs.
//!
//! Storage is always `f64`. Convolution is cross-correlation (no kernel flip)
//! and is lowered to a single GEMM per batch via im2col.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, shape_err, Result};

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    SeededNormal { mean: f64, std: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; odd extra padding goes right/bottom.
    Same,
    Valid,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let mut list = f.debug_list();
        list.entries(self.data.iter().take(SHOWN));
        if self.data.len() > SHOWN {
            list.entry(&"..");
        }
        list.finish()
    }
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent {pos} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = check_extents(shape)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; len],
            Fill::Constant(c) => vec![c; len],
            Fill::SeededNormal { mean, std, seed } => {
                let normal = Normal::new(mean, std)
                    .map_err(|_| contract_err!("invalid normal parameters ({mean}, {std})"))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Same shape as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Sum in storage order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "add_assign {:?} += {:?}",
                self.shape,
                other.shape
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| shape_err!("slice_outer on a scalar"))?;
        if start >= end || end > outer {
            return Err(shape_err!(
                "slice [{start}, {end}) out of range for extent {outer}"
            ));
        }
        let inner = self.data.len() / outer;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Gather rows along axis 0.
    pub fn select_outer(&self, indices: &[usize]) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| shape_err!("select_outer on a scalar"))?;
        if indices.is_empty() {
            return Err(shape_err!("select_outer with no indices"));
        }
        let inner = self.data.len() / outer;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= outer {
                return Err(shape_err!("row {i} out of range for extent {outer}"));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }
}

/// How `b` lines up against `a` in [`ew`].
enum Broadcast {
    Same,
    Scalar,
    /// `b` has shape `[C]` and `a` is `[N, C, ...]`.
    Channel {
        channels: usize,
        inner: usize,
    },
    /// Same rank, size-1 axes of `b` stretch.
    Stretch,
}

fn broadcast_rule(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    if b.iter().product::<usize>() == 1 && b.len() <= a.len() {
        return Some(Broadcast::Scalar);
    }
    if b.len() == 1 && a.len() >= 2 && a[1] == b[0] {
        return Some(Broadcast::Channel {
            channels: b[0],
            inner: a[2..].iter().product(),
        });
    }
    if a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| x == y || y == 1) {
        return Some(Broadcast::Stretch);
    }
    None
}

/// Elementwise `a (op) b`.
///
/// `b` may match `a` exactly, be a one-element tensor, be a `[C]` vector
/// laid along axis 1 of `a`, or share `a`'s rank with size-1 axes that stretch.
pub fn ew(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let apply = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let rule = broadcast_rule(&a.shape, &b.shape)
        .ok_or_else(|| shape_err!("cannot broadcast {:?} onto {:?}", b.shape, a.shape))?;
    let data = match rule {
        Broadcast::Same => a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| apply(x, y))
            .collect(),
        Broadcast::Scalar => a.data.iter().map(|&x| apply(x, b.data[0])).collect(),
        Broadcast::Channel { channels, inner } => a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| apply(x, b.data[(i / inner) % channels]))
            .collect(),
        Broadcast::Stretch => {
            let rank = a.shape.len();
            let mut b_strides = vec![0usize; rank];
            let mut acc = 1;
            for ax in (0..rank).rev() {
                b_strides[ax] = if b.shape[ax] == 1 { 0 } else { acc };
                acc *= b.shape[ax];
            }
            let mut index = vec![0usize; rank];
            let mut out = Vec::with_capacity(a.data.len());
            for &x in &a.data {
                let off: usize = index.iter().zip(&b_strides).map(|(i, s)| i * s).sum();
                out.push(apply(x, b.data[off]));
                for ax in (0..rank).rev() {
                    index[ax] += 1;
                    if index[ax] < a.shape[ax] {
                        break;
                    }
                    index[ax] = 0;
                }
            }
            out
        }
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Dense GEMM `c = a·b` on raw slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees that every index reachable through the
    // given shapes and strides lies inside `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        s => Err(shape_err!("{what} must be rank 2, got {s:?}")),
    }
}

/// `[m×k] · [k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape,
            b.shape
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (n as isize, 1),
        0.0,
        &mut out,
    );
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = matrix_dims(a, "matmul_tn lhs")?;
    let (k2, n) = matrix_dims(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul_tn extents differ: {:?}ᵀ · {:?}",
            a.shape,
            b.shape
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        &a.data,
        (1, m as isize),
        &b.data,
        (n as isize, 1),
        0.0,
        &mut out,
    );
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul_nt lhs")?;
    let (n, k2) = matrix_dims(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul_nt extents differ: {:?} · {:?}ᵀ",
            a.shape,
            b.shape
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (1, k as isize),
        0.0,
        &mut out,
    );
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Resolved sizes of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent and leading pad along one axis.
pub fn conv_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(shape_err!("stride must be positive"));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(shape_err!("kernel {kernel} exceeds input extent {input}"));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            if kernel > input + total {
                return Err(shape_err!(
                    "kernel {kernel} exceeds padded extent {}",
                    input + total
                ));
            }
            Ok((out, total / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (input, kernel) else {
            return Err(shape_err!(
                "conv2d expects [N,C,H,W] input and [F,C,kh,kw] kernel, got {input:?} and {kernel:?}"
            ));
        };
        if c != kc {
            return Err(shape_err!(
                "conv2d channel mismatch: input {c}, kernel {kc}"
            ));
        }
        let (out_h, pad_top) = conv_extent(h, kh, stride, padding)?;
        let (out_w, pad_left) = conv_extent(w, kw, stride, padding)?;
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output indices `[lo, hi)` whose input coordinate for kernel offset `k` is inside the image.
    fn valid_range(&self, k: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k).div_ceil(self.stride).min(out);
        // o·s + k − pad < extent  ⇔  o·s < extent + pad − k
        let limit = (extent + pad).saturating_sub(k);
        let hi = limit.div_ceil(self.stride).min(out);
        (lo, hi.max(lo))
    }
}

/// Patch matrix `[C·kh·kw, N·P]` where `P = out_h·out_w`.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let cols_n = g.batch * p;
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            let (y0, y1) = g.valid_range(ki, g.pad_top, g.height, g.out_h);
            for kj in 0..g.kernel_w {
                let (x0, x1) = g.valid_range(kj, g.pad_left, g.width, g.out_w);
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let img = &input[(n * g.in_channels + c) * plane..][..plane];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ki - g.pad_top;
                        let src = &img[iy * g.width..][..g.width];
                        let dst = &mut dst_row[n * p + oy * g.out_w..][..g.out_w];
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * g.stride + kj - g.pad_left;
                        if g.stride == 1 {
                            dst[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (d, s) in dst[x0..x1]
                                .iter_mut()
                                .zip(src[ix0..].iter().step_by(g.stride))
                            {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back onto an `[N,C,H,W]` buffer.
fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let p = g.positions();
    let cols_n = g.batch * p;
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            let (y0, y1) = g.valid_range(ki, g.pad_top, g.height, g.out_h);
            for kj in 0..g.kernel_w {
                let (x0, x1) = g.valid_range(kj, g.pad_left, g.width, g.out_w);
                if x0 >= x1 {
                    continue;
                }
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let img = &mut out[(n * g.in_channels + c) * plane..][..plane];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ki - g.pad_top;
                        let dst = &mut img[iy * g.width..][..g.width];
                        let src = &src_row[n * p + oy * g.out_w..][x0..x1];
                        let ix0 = x0 * g.stride + kj - g.pad_left;
                        for (d, s) in dst[ix0..].iter_mut().step_by(g.stride).zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `[F, N·P]` (GEMM layout) → `[N, F, P]` (NCHW).
fn fnp_to_nfp(src: &[f64], f: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; f * n * p];
    for fi in 0..f {
        for ni in 0..n {
            out[(ni * f + fi) * p..][..p].copy_from_slice(&src[fi * n * p + ni * p..][..p]);
        }
    }
    out
}

fn nfp_to_fnp(src: &[f64], f: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; f * n * p];
    for fi in 0..f {
        for ni in 0..n {
            out[fi * n * p + ni * p..][..p].copy_from_slice(&src[(ni * f + fi) * p..][..p]);
        }
    }
    out
}

/// 2-D cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    let cols = im2col(&input.data, &g);
    let np = g.batch * g.positions();
    let mut out = vec![0.0; g.filters * np];
    let k = g.patch_len();
    gemm(
        g.filters,
        k,
        np,
        &kernel.data,
        (k as isize, 1),
        &cols,
        (np as isize, 1),
        0.0,
        &mut out,
    );
    Ok(Tensor {
        shape: vec![g.batch, g.filters, g.out_h, g.out_w],
        data: fnp_to_nfp(&out, g.filters, g.batch, g.positions()),
    })
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input_shape, &kernel.shape, stride, padding)?;
    check_grad_out(grad_out, &g)?;
    let np = g.batch * g.positions();
    let k = g.patch_len();
    let dout = nfp_to_fnp(&grad_out.data, g.filters, g.batch, g.positions());
    let mut dcols = vec![0.0; k * np];
    gemm(
        k,
        g.filters,
        np,
        &kernel.data,
        (1, k as isize),
        &dout,
        (np as isize, 1),
        0.0,
        &mut dcols,
    );
    let mut dx = vec![0.0; input_shape.iter().product()];
    col2im(&dcols, &g, &mut dx);
    Ok(Tensor {
        shape: input_shape.to_vec(),
        data: dx,
    })
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, kernel_shape, stride, padding)?;
    check_grad_out(grad_out, &g)?;
    let np = g.batch * g.positions();
    let k = g.patch_len();
    let cols = im2col(&input.data, &g);
    let dout = nfp_to_fnp(&grad_out.data, g.filters, g.batch, g.positions());
    let mut dk = vec![0.0; g.filters * k];
    gemm(
        g.filters,
        np,
        k,
        &dout,
        (np as isize, 1),
        &cols,
        (1, np as isize),
        0.0,
        &mut dk,
    );
    Ok(Tensor {
        shape: kernel_shape.to_vec(),
        data: dk,
    })
}

fn check_grad_out(grad_out: &Tensor, g: &ConvGeometry) -> Result<()> {
    let expected = [g.batch, g.filters, g.out_h, g.out_w];
    if grad_out.shape != expected {
        return Err(shape_err!(
            "conv gradient shape {:?}, expected {expected:?}",
            grad_out.shape
        ));
    }
    Ok(())
}

/// Windowed max over `[N,C,H,W]` (no padding).
///
/// Returns the pooled tensor and, for every output element, the flat index
/// of the input element that won (first maximum on ties).
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[n, c, h, w] = input.shape.as_slice() else {
        return Err(shape_err!(
            "maxpool2d expects [N,C,H,W], got {:?}",
            input.shape
        ));
    };
    if window == 0 || stride == 0 {
        return Err(shape_err!("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(shape_err!("pool window {window} exceeds input {h}x{w}"));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input.data[idx] > input.data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input.data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![n, c, oh, ow],
            data: out,
        },
        argmax,
    ))
}

/// Route pooled gradients back to the winning input positions.
pub fn maxpool2d_grad(
    grad_out: &Tensor,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(shape_err!(
            "pool gradient has {} values for {} winners",
            grad_out.len(),
            argmax.len()
        ));
    }
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (&g, &i) in grad_out.data.iter().zip(argmax) {
        dx[i] += g;
    }
    Ok(Tensor {
        shape: input_shape.to_vec(),
        data: dx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data[i * k + p] * b.data[p * n + j];
                }
            }
        }
        Tensor::from_vec(&[m, n], out).unwrap()
    }

    fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Tensor {
        let [n, c, h, w] = x.shape[..] else {
            unreachable!()
        };
        let [f, _, kh, kw] = k.shape[..] else {
            unreachable!()
        };
        let (oh, pt) = conv_extent(h, kh, stride, padding).unwrap();
        let (ow, pl) = conv_extent(w, kw, stride, padding).unwrap();
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pt as isize;
                                    let ix = (ox * stride + j) as isize - pl as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv =
                                        x.data[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                    acc += xv * k.data[((fi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, f, oh, ow], out).unwrap()
    }

    #[test]
    fn create_fills() {
        let z = Tensor::create(&[2, 2], Fill::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::create(&[3], Fill::Constant(1.5)).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
        let fill = Fill::SeededNormal {
            mean: 0.0,
            std: 1.0,
            seed: 7,
        };
        let a = Tensor::create(&[4], fill).unwrap();
        let b = Tensor::create(&[4], fill).unwrap();
        assert_eq!(
            a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(
            Tensor::create(&[2, 0], Fill::Zeros),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn elementwise() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(ew(&a, &b, BinaryOp::Add).unwrap().data(), &[4.0, 6.0]);
        let c = Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        assert_eq!(ew(&c, &c, BinaryOp::Mul).unwrap().data(), &[4.0, 9.0]);
        assert_eq!(ew(&a, &a.zeros_like(), BinaryOp::Add).unwrap(), a);
        let bad = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        assert!(ew(&a, &bad, BinaryOp::Sub).is_err());
    }

    #[test]
    fn channel_broadcast_matches_tiled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let v = random(&[3], &mut rng);
        let mut tiled = vec![0.0; x.len()];
        for (i, t) in tiled.iter_mut().enumerate() {
            *t = v.data[(i / 4) % 3];
        }
        let tiled = Tensor::from_vec(&[2, 3, 2, 2], tiled).unwrap();
        assert_eq!(
            ew(&x, &v, BinaryOp::Mul).unwrap(),
            ew(&x, &tiled, BinaryOp::Mul).unwrap()
        );
        let stretch = v.clone().reshape(&[1, 3, 1, 1]).unwrap();
        assert_eq!(
            ew(&x, &stretch, BinaryOp::Add).unwrap(),
            ew(&x, &tiled, BinaryOp::Add).unwrap()
        );
    }

    #[test]
    fn matmul_small_cases() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let row = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
        assert!(matmul(&row, &row).is_err());
    }

    #[test]
    fn matmul_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (m, k, n) = (
                rng.random_range(1..7),
                rng.random_range(1..7),
                rng.random_range(1..7),
            );
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let want = naive_matmul(&a, &b);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&want) < 1e-12);
            let at = transpose(&a);
            assert!(matmul_tn(&at, &b).unwrap().max_abs_diff(&want) < 1e-12);
            let bt = transpose(&b);
            assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&want) < 1e-12);
        }
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out).unwrap()
    }

    #[test]
    fn conv_identity_and_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let k = Tensor::create(&[1, 2, 1, 1], Fill::Constant(1.0)).unwrap();
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        for p in 0..16 {
            assert!((y.data[p] - (x.data[p] + x.data[16 + p])).abs() < 1e-15);
        }
        let ones = Tensor::create(&[1, 1, 5, 5], Fill::Constant(1.0)).unwrap();
        let k3 = Tensor::create(&[1, 1, 3, 3], Fill::Constant(1.0)).unwrap();
        let y = conv2d(&ones, &k3, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
        let big = Tensor::create(&[1, 1, 6, 6], Fill::Zeros).unwrap();
        assert!(conv2d(&ones, &big, 1, Padding::Valid).is_err());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(&[1, 2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        assert!(
            conv2d(&x, &k, 1, Padding::Valid)
                .unwrap()
                .max_abs_diff(&naive_conv(&x, &k, 1, Padding::Valid))
                < 1e-10
        );
        for _ in 0..100 {
            let n = rng.random_range(1..3);
            let c = rng.random_range(1..4);
            let h = rng.random_range(3..8);
            let w = rng.random_range(3..8);
            let kh = rng.random_range(1..4);
            let kw = rng.random_range(1..4);
            let f = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let padding = if rng.random_bool(0.5) {
                Padding::Same
            } else {
                Padding::Valid
            };
            let x = random(&[n, c, h, w], &mut rng);
            let k = random(&[f, c, kh, kw], &mut rng);
            let got = conv2d(&x, &k, stride, padding).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &k, stride, padding)) < 1e-10);
        }
    }

    #[test]
    fn conv_gradients_are_adjoint() {
        // <conv(x, k), g> = <x, dx(g, k)> = <k, dk(x, g)>
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let stride = rng.random_range(1..4);
            let padding = if rng.random_bool(0.5) {
                Padding::Same
            } else {
                Padding::Valid
            };
            let x = random(
                &[2, 2, rng.random_range(4..9), rng.random_range(4..9)],
                &mut rng,
            );
            let k = random(
                &[3, 2, rng.random_range(1..4), rng.random_range(1..4)],
                &mut rng,
            );
            let y = conv2d(&x, &k, stride, padding).unwrap();
            let g = random(y.shape(), &mut rng);
            let dx = conv2d_grad_input(&g, &k, x.shape(), stride, padding).unwrap();
            let dk = conv2d_grad_kernel(&x, &g, k.shape(), stride, padding).unwrap();
            let lhs = dot(&y, &g);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-9);
            assert!((lhs - dot(&k, &dk)).abs() < 1e-9);
        }
    }

    #[test]
    fn same_padding_puts_extra_right() {
        // Even kernel, stride 1: one pad column, on the right.
        let (out, left) = conv_extent(5, 2, 1, Padding::Same).unwrap();
        assert_eq!((out, left), (5, 0));
        let (out, left) = conv_extent(5, 3, 1, Padding::Same).unwrap();
        assert_eq!((out, left), (5, 1));
    }

    #[test]
    fn pool_cases() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor::create(&[1, 1, 4, 4], Fill::Constant(2.5)).unwrap();
        assert!(maxpool2d(&c, 2, 2)
            .unwrap()
            .0
            .data()
            .iter()
            .all(|&v| v == 2.5));
        assert!(maxpool2d(&x, 3, 1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let x = random(&[1, 1, 4, 4], &mut rng);
            let (y, _) = maxpool2d(&x, 2, 2).unwrap();
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x.data[(oy * 2 + dy) * 4 + ox * 2 + dx]);
                        }
                    }
                    assert_eq!(y.data[oy * 2 + ox], best);
                }
            }
        }
    }

    #[test]
    fn deterministic_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = random(&[2, 3, 7, 7], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let a = conv2d(&x, &k, 1, Padding::Same).unwrap();
        let b = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
