//! Forward and backward kernels on raw tensors. The tape in
//! [`crate::autograd`] composes these; nothing here records history.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `C = alpha * op(A) * op(B) + beta * C` over explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents; `c` is
    // written as a dense row-major m×n block.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects NCHW input and OIKK kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] || kernel[2] != kernel[3] {
            return Err(Error::Shape(format!(
                "conv2d input {input:?} incompatible with kernel {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let k = kernel[2];
        let (ph, pw) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if ph < k || pw < k {
            return Err(Error::Shape(format!(
                "conv2d kernel {kernel:?} larger than padded input {input:?} (padding {padding})"
            )));
        }
        Ok(Self {
            batch: input[0],
            in_ch: input[1],
            out_ch: kernel[0],
            in_h: input[2],
            in_w: input[3],
            kernel: k,
            stride,
            padding,
            out_h: (ph - k) / stride + 1,
            out_w: (pw - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }
}

/// Output columns `ow` whose input column `ow·s + kj − p` lies inside
/// `0..in_w`, as a half-open range.
fn valid_cols(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let (s, off) = (g.stride as isize, kj as isize - g.padding as isize);
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = ((g.in_w as isize - off + s - 1) / s).clamp(0, g.out_w as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * cols..][..cols];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.out_h {
                    let ih = (oh * s) as isize + ki as isize - p;
                    let dst = &mut row[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let start = (lo * s + kj) as isize - p;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[start as usize..start as usize + hi - lo]);
                    } else {
                        for (d, v) in dst[lo..hi].iter_mut().zip(src[start as usize..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * cols..][..cols];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.out_h {
                    let ih = (oh * s) as isize + ki as isize - p;
                    if ih < 0 || ih >= g.in_h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    let src = &row[oh * g.out_w + lo..oh * g.out_w + hi];
                    let start = ((lo * s + kj) as isize - p) as usize;
                    for (d, v) in dst[start..].iter_mut().step_by(s).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, NCHW input with OIKK kernel, no bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![0.0; g.batch * g.out_plane()];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * g.in_plane()..(n + 1) * g.in_plane()], &mut col);
        gemm(
            g.out_ch,
            rows,
            cols,
            kernel.data(),
            (rows as isize, 1),
            &col,
            (cols as isize, 1),
            &mut out[n * g.out_plane()..(n + 1) * g.out_plane()],
            0.0,
        );
    }
    Tensor::new(vec![g.batch, g.out_ch, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dx = need_input.then(|| vec![0.0; input.numel()]);
    let mut dw = need_kernel.then(|| vec![0.0; kernel.numel()]);
    for n in 0..g.batch {
        let go = &grad_out.data()[n * g.out_plane()..(n + 1) * g.out_plane()];
        if let Some(dw) = dw.as_mut() {
            im2col(&g, &input.data()[n * g.in_plane()..(n + 1) * g.in_plane()], &mut col);
            // dW (O×R) += dOut (O×P) · colᵀ (P×R)
            gemm(g.out_ch, cols, rows, go, (cols as isize, 1), &col, (1, cols as isize), dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (R×P) = Wᵀ (R×O) · dOut (O×P)
            gemm(
                rows,
                g.out_ch,
                cols,
                kernel.data(),
                (1, rows as isize),
                go,
                (cols as isize, 1),
                &mut dcol,
                0.0,
            );
            col2im_add(&g, &dcol, &mut dx[n * g.in_plane()..(n + 1) * g.in_plane()]);
        }
    }
    Ok((
        dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        dw.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?,
    ))
}

/// Adds a per-channel bias to an NCHW tensor.
pub fn channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 || bias.numel() != s[1] {
        return Err(Error::Shape(format!(
            "channel bias {:?} does not match input {s:?}",
            bias.shape()
        )));
    }
    let plane = s[2] * s[3];
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[i % s[1]];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

pub fn channel_bias_grad(grad_out: &Tensor, channels: usize) -> Tensor {
    let s = grad_out.shape();
    let plane = s[2] * s[3];
    let mut db = vec![0.0; channels];
    for (i, chunk) in grad_out.data().chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
    Tensor::from_vec(db)
}

/// `x · wᵀ + b` for `x: B×I`, `w: O×I`, `b: O`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.numel() != ws[0] {
        return Err(Error::Shape(format!(
            "linear input {xs:?} incompatible with weight {ws:?} and bias {:?}",
            b.shape()
        )));
    }
    let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
    let mut out = Vec::with_capacity(batch * outp);
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    gemm(batch, inp, outp, x.data(), (inp as isize, 1), w.data(), (1, inp as isize), &mut out, 1.0);
    Tensor::new(vec![batch, outp], out)
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, inp, outp) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut dx = vec![0.0; batch * inp];
    gemm(batch, outp, inp, grad_out.data(), (outp as isize, 1), w.data(), (inp as isize, 1), &mut dx, 0.0);
    let mut dw = vec![0.0; outp * inp];
    gemm(outp, batch, inp, grad_out.data(), (1, outp as isize), x.data(), (inp as isize, 1), &mut dw, 0.0);
    let mut db = vec![0.0; outp];
    for row in grad_out.data().chunks(outp) {
        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(db),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
/// Also returns the flat input index chosen for every output element.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::Shape(format!("max_pool2 needs NCHW with H, W >= 2, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = s[0] * s[1];
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    let data = x.data();
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    // strict > keeps the first maximum on ties
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![s[0], s[1], oh, ow], out)?, arg))
}

/// Nearest-neighbour ×2 upsampling of an NCHW tensor.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("upsample2 needs NCHW, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(x.numel() * 4);
    for plane in x.data().chunks(h * w) {
        for i in 0..2 * h {
            let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)
}

pub fn upsample2_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (p, plane) in grad_out.data().chunks(4 * h * w).enumerate() {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(i / 2) * w + j / 2] += plane[i * 2 * w + j];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).unwrap()
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Per-row `-log softmax(logits)[target]`, computed stably via log-sum-exp.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Shape(format!(
            "cross_entropy logits {s:?} with {} targets",
            targets.len()
        )));
    }
    let k = s[1];
    logits
        .data()
        .chunks(k)
        .zip(targets)
        .map(|(row, &t)| {
            if t >= k {
                return Err(Error::ClassOutOfRange { index: t, classes: k });
            }
            let (m, tail) = log_sum_exp_parts(row);
            Ok((m - row[t]) + tail)
        })
        .collect()
}

/// `ln Σ exp(row)` split as `(max, ln(1 + Σ_{others} exp(v - max)))`, so
/// confident rows keep full precision.
fn log_sum_exp_parts(row: &[f64]) -> (f64, f64) {
    let (imax, &m) = row
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m, rest.ln_1p())
}
