//! Forward and backward numeric kernels.
//!
//! The public functions are plain forward passes on [`Tensor`]s. The
//! `*_backward` kernels are consumed by [`crate::autograd::Tape`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)` of
/// shape `k x n`. A transposed operand is stored in the other orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
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

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::config(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn expect_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::config(format!(
                "conv2d: input {input:?} and weight {weight:?} must both be rank 4"
            )));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return Err(Error::config(format!(
                "conv2d: weight expects {wc} input channels, input has C={c}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be at least 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{} (H={h}, W={w}, padding={pad})",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { n, c, h, w, o, kh, kw, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one image `[C,H,W]` into columns `[C*kh*kw, Ho*Wo]`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let plane = self.out_len();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if y < 0 || y >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + y as usize) * self.w..][..self.w];
                        // Output columns whose tap lands inside the row: lo..hi.
                        let lo = (self.pad.saturating_sub(j)).div_ceil(self.stride).min(self.wo);
                        let hi = if self.w + self.pad > j {
                            ((self.w + self.pad - j - 1) / self.stride + 1).clamp(lo, self.wo)
                        } else {
                            lo
                        };
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let x0 = lo * self.stride + j - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[x0..].iter().step_by(self.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold columns back, accumulating into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let plane = self.out_len();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over `[N,C,H,W]` with weights `[O,C,kh,kw]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::config(format!(
                "conv2d: bias shape {:?} does not match O={}",
                b.shape(),
                g.o
            )));
        }
    }
    let plane = g.out_len();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.o * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.patch_len() * plane] };
    for n in 0..g.n {
        let img = &input.data()[n * in_len..(n + 1) * in_len];
        let cols_ref: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        let dst = &mut out[n * g.o * plane..(n + 1) * g.o * plane];
        gemm(g.o, g.patch_len(), plane, weight.data(), false, cols_ref, false, dst, 0.0);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                let bo = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out))
}

/// Gradients of conv2d with respect to input, weight and (summed) bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)
        .expect("geometry validated in forward");
    let plane = g.out_len();
    let in_len = g.c * g.h * g.w;
    let mut d_input = vec![0.0; input.numel()];
    let mut d_weight = vec![0.0; weight.numel()];
    let mut d_bias = vec![0.0; g.o];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.patch_len() * plane] };
    let mut d_cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.patch_len() * plane] };
    for n in 0..g.n {
        let img = &input.data()[n * in_len..(n + 1) * in_len];
        let gout = &grad_out[n * g.o * plane..(n + 1) * g.o * plane];
        for (o, chunk) in gout.chunks_exact(plane).enumerate() {
            d_bias[o] += chunk.iter().sum::<f64>();
        }
        let d_img = &mut d_input[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.o, plane, g.patch_len(), gout, false, img, true, &mut d_weight, 1.0);
            gemm(g.patch_len(), g.o, plane, weight.data(), true, gout, false, d_img, 0.0);
        } else {
            g.im2col(img, &mut cols);
            gemm(g.o, plane, g.patch_len(), gout, false, &cols, true, &mut d_weight, 1.0);
            gemm(g.patch_len(), g.o, plane, weight.data(), true, gout, false, &mut d_cols, 0.0);
            g.col2im(&d_cols, d_img);
        }
    }
    (d_input, d_weight, d_bias)
}

// ---------------------------------------------------------------------------
// conv1x1 / linear / matmul

/// Per-position channel mixing: `[N,C_in,K]` with `[C_out,C_in]` gives `[N,C_out,K]`.
pub fn conv1x1(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(input, 3, "conv1x1 input")?;
    expect_rank(weight, 2, "conv1x1 weight")?;
    let (n, cin, k) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = weight.shape()[0];
    if weight.shape()[1] != cin {
        return Err(Error::config(format!(
            "conv1x1: weight {:?} second dim must equal C_in={cin}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::config(format!("conv1x1: bias {:?} must be [{cout}]", b.shape())));
        }
    }
    let mut out = vec![0.0; n * cout * k];
    for i in 0..n {
        let x = &input.data()[i * cin * k..(i + 1) * cin * k];
        let y = &mut out[i * cout * k..(i + 1) * cout * k];
        gemm(cout, cin, k, weight.data(), false, x, false, y, 0.0);
        if let Some(b) = bias {
            for (o, row) in y.chunks_exact_mut(k).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, k], out))
}

pub(crate) fn conv1x1_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, cin, k) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = weight.shape()[0];
    let mut d_input = vec![0.0; input.numel()];
    let mut d_weight = vec![0.0; weight.numel()];
    let mut d_bias = vec![0.0; cout];
    for i in 0..n {
        let x = &input.data()[i * cin * k..(i + 1) * cin * k];
        let gy = &grad_out[i * cout * k..(i + 1) * cout * k];
        for (o, row) in gy.chunks_exact(k).enumerate() {
            d_bias[o] += row.iter().sum::<f64>();
        }
        gemm(cout, k, cin, gy, false, x, true, &mut d_weight, 1.0);
        gemm(cin, cout, k, weight.data(), true, gy, false, &mut d_input[i * cin * k..(i + 1) * cin * k], 0.0);
    }
    (d_input, d_weight, d_bias)
}

/// Affine map over rows: `[M,D_in]` times `[D_out,D_in]` transposed, plus bias.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(input, 2, "linear input")?;
    expect_rank(weight, 2, "linear weight")?;
    let (m, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    if weight.shape()[1] != din {
        return Err(Error::config(format!(
            "linear: weight {:?} does not accept input width {din}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::config(format!("linear: bias {:?} must be [{dout}]", b.shape())));
        }
    }
    let mut out = vec![0.0; m * dout];
    gemm(m, din, dout, input.data(), false, weight.data(), true, &mut out, 0.0);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(dout) {
            row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
    }
    Ok(Tensor::from_parts(vec![m, dout], out))
}

pub(crate) fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    let mut d_input = vec![0.0; m * din];
    let mut d_weight = vec![0.0; dout * din];
    let mut d_bias = vec![0.0; dout];
    gemm(m, dout, din, grad_out, false, weight.data(), false, &mut d_input, 0.0);
    gemm(dout, m, din, grad_out, true, input.data(), false, &mut d_weight, 0.0);
    for row in grad_out.chunks_exact(dout) {
        d_bias.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
    (d_input, d_weight, d_bias)
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if b.shape()[0] != k {
        return Err(Error::config(format!(
            "matmul: inner dims differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    gemm(m, n, k, grad_out, false, b.data(), true, &mut da, 0.0);
    gemm(k, m, n, a.data(), true, grad_out, false, &mut db, 0.0);
    (da, db)
}

// ---------------------------------------------------------------------------
// elementwise

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// Subgradient at exactly zero is taken as 0.
pub(crate) fn relu_backward(x: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    x.data().iter().zip(grad_out).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub(crate) fn sigmoid_backward(y: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    y.data().iter().zip(grad_out).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape(a, b, "add")?;
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    ))
}

/// Per-channel `x * scale[c] + shift[c]` over `[N,C,...]`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::config(format!("channel_affine: input {:?} has no channel axis", x.shape())));
    }
    let c = x.shape()[1];
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::config(format!(
            "channel_affine: scale {:?}/shift {:?} must be [{c}]",
            scale.shape(),
            shift.shape()
        )));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = x.data().to_vec();
    for (idx, chunk) in out.chunks_exact_mut(inner).enumerate() {
        let ch = idx % c;
        let (s, t) = (scale.data()[ch], shift.data()[ch]);
        chunk.iter_mut().for_each(|v| *v = *v * s + t);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn channel_affine_backward(
    x: &Tensor,
    scale: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut dx = vec![0.0; x.numel()];
    let mut ds = vec![0.0; c];
    let mut dt = vec![0.0; c];
    for (idx, (xs, gs)) in x.data().chunks_exact(inner).zip(grad_out.chunks_exact(inner)).enumerate() {
        let ch = idx % c;
        let s = scale.data()[ch];
        let dst = &mut dx[idx * inner..(idx + 1) * inner];
        for ((d, &xv), &g) in dst.iter_mut().zip(xs).zip(gs) {
            *d = g * s;
            ds[ch] += g * xv;
            dt[ch] += g;
        }
    }
    (dx, ds, dt)
}

// ---------------------------------------------------------------------------
// pooling / resampling / layout

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 4, "global_avg_pool")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let out = x.data().chunks_exact(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn global_avg_pool_backward(shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let plane = shape[2] * shape[3];
    let mut dx = Vec::with_capacity(grad_out.len() * plane);
    for &g in grad_out {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    dx
}

/// Source taps for half-pixel bilinear resampling along one axis.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of `[N,C,H,W]` to `[N,C,out_h,out_w]`, half-pixel centres,
/// edge-clamped. Works for both up- and downsampling.
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    expect_rank(x, 4, "bilinear_upsample")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("bilinear_upsample: output size must be positive"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub(crate) fn bilinear_upsample_backward(in_shape: &[usize], out_h: usize, out_w: usize, grad_out: &[f64]) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (dplane, gplane) in dx.chunks_exact_mut(h * w).zip(grad_out.chunks_exact(out_h * out_w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                dplane[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dplane[y0 * w + x1] += g * (1.0 - ly) * lx;
                dplane[y1 * w + x0] += g * ly * (1.0 - lx);
                dplane[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    dx
}

/// Concatenate `[N, a_i, rest..]` tensors along axis 1.
pub fn concat_axis1(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::config("concat: no inputs"))?;
    if first.rank() < 2 {
        return Err(Error::config("concat: inputs need at least rank 2"));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    for p in parts {
        if p.rank() != first.rank() || p.shape()[0] != n || &p.shape()[2..] != rest {
            return Err(Error::config(format!(
                "concat: shape {:?} incompatible with {:?} along axis 1",
                p.shape(),
                first.shape()
            )));
        }
    }
    let inner: usize = rest.iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total * inner);
    for i in 0..n {
        for p in parts {
            let len = p.shape()[1] * inner;
            out.extend_from_slice(&p.data()[i * len..(i + 1) * len]);
        }
    }
    let mut shape = vec![n, total];
    shape.extend_from_slice(rest);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn concat_axis1_backward(shapes: &[Vec<usize>], grad_out: &[f64]) -> Vec<Vec<f64>> {
    let n = shapes[0][0];
    let inner: usize = shapes[0][2..].iter().product();
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let mut offset = 0;
    for _ in 0..n {
        for (s, g) in shapes.iter().zip(grads.iter_mut()) {
            let len = s[1] * inner;
            g.extend_from_slice(&grad_out[offset..offset + len]);
            offset += len;
        }
    }
    grads
}

/// `alpha * a + (1 - alpha) * b` with a per-channel gate `alpha: [N,C]`
/// broadcast over the trailing axes of `a` and `b: [N,C,...]`.
pub fn gated_mix(alpha: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape(a, b, "gated_mix")?;
    expect_rank(alpha, 2, "gated_mix gate")?;
    if a.rank() < 2 || alpha.shape() != &a.shape()[..2] {
        return Err(Error::config(format!(
            "gated_mix: gate {:?} must match leading dims of {:?}",
            alpha.shape(),
            a.shape()
        )));
    }
    let inner: usize = a.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(a.numel());
    for (idx, &g) in alpha.data().iter().enumerate() {
        let sa = &a.data()[idx * inner..(idx + 1) * inner];
        let sb = &b.data()[idx * inner..(idx + 1) * inner];
        out.extend(sa.iter().zip(sb).map(|(x, y)| g * x + (1.0 - g) * y));
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub(crate) fn gated_mix_backward(
    alpha: &Tensor,
    a: &Tensor,
    b: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inner: usize = a.shape()[2..].iter().product();
    let mut d_alpha = vec![0.0; alpha.numel()];
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    for (idx, &g) in alpha.data().iter().enumerate() {
        let r = idx * inner..(idx + 1) * inner;
        let mut acc = 0.0;
        for p in r {
            let go = grad_out[p];
            acc += go * (a.data()[p] - b.data()[p]);
            da[p] = g * go;
            db[p] = (1.0 - g) * go;
        }
        d_alpha[idx] = acc;
    }
    (d_alpha, da, db)
}

/// Pick per-sample spatial positions out of `[N,C,H,W]`, giving `[N,K,C]`.
pub fn gather_positions(x: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
    expect_rank(x, 4, "gather_positions")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    if indices.len() != n {
        return Err(Error::config(format!("gather_positions: {} index lists for batch {n}", indices.len())));
    }
    let k = indices[0].len();
    if indices.iter().any(|l| l.len() != k) {
        return Err(Error::config("gather_positions: ragged index lists"));
    }
    let mut out = Vec::with_capacity(n * k * c);
    for (i, list) in indices.iter().enumerate() {
        for &p in list {
            if p >= plane {
                return Err(Error::config(format!("gather_positions: index {p} outside {plane} positions")));
            }
            out.extend((0..c).map(|ch| x.data()[(i * c + ch) * plane + p]));
        }
    }
    Ok(Tensor::from_parts(vec![n, k, c], out))
}

pub(crate) fn gather_positions_backward(in_shape: &[usize], indices: &[Vec<usize>], grad_out: &[f64]) -> Vec<f64> {
    let c = in_shape[1];
    let plane = in_shape[2] * in_shape[3];
    let k = indices[0].len();
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (i, list) in indices.iter().enumerate() {
        for (j, &p) in list.iter().enumerate() {
            for ch in 0..c {
                dx[(i * c + ch) * plane + p] += grad_out[(i * k + j) * c + ch];
            }
        }
    }
    dx
}

/// Batched left multiplication by constant per-sample matrices:
/// `[N,K,K] x [N,K,C] -> [N,K,C]`.
pub fn batched_left_matmul(l: &Tensor, x: &Tensor) -> Result<Tensor> {
    expect_rank(l, 3, "propagation matrix")?;
    expect_rank(x, 3, "node features")?;
    let (n, k, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if l.shape() != [n, k, k] {
        return Err(Error::config(format!(
            "propagation matrix {:?} does not match node features {:?}",
            l.shape(),
            x.shape()
        )));
    }
    let mut out = vec![0.0; n * k * c];
    for i in 0..n {
        gemm(
            k,
            k,
            c,
            &l.data()[i * k * k..(i + 1) * k * k],
            false,
            &x.data()[i * k * c..(i + 1) * k * c],
            false,
            &mut out[i * k * c..(i + 1) * k * c],
            0.0,
        );
    }
    Ok(Tensor::from_parts(vec![n, k, c], out))
}

pub(crate) fn batched_left_matmul_backward(l: &Tensor, x_shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (n, k, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let mut dx = vec![0.0; n * k * c];
    for i in 0..n {
        gemm(
            k,
            k,
            c,
            &l.data()[i * k * k..(i + 1) * k * k],
            true,
            &grad_out[i * k * c..(i + 1) * k * c],
            false,
            &mut dx[i * k * c..(i + 1) * k * c],
            0.0,
        );
    }
    dx
}

// ---------------------------------------------------------------------------
// classification

/// Row-wise softmax of `[N,L]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 2, "softmax")?;
    let l = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(l) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    expect_rank(logits, 2, "softmax_cross_entropy logits")?;
    let (n, l) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::config(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::data(format!("label {bad} out of range for {l} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let l = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks_exact(l)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// `(softmax - onehot) / N`, scaled by the upstream gradient.
pub(crate) fn softmax_cross_entropy_backward(logits: &Tensor, labels: &[usize], upstream: f64) -> Vec<f64> {
    let n = labels.len() as f64;
    let l = logits.shape()[1];
    let probs = softmax(logits).expect("validated in forward");
    let mut d = probs.into_data();
    for (row, &y) in d.chunks_exact_mut(l).zip(labels) {
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= upstream / n);
    }
    d
}
