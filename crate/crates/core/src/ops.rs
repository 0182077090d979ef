//! Neural-network operators on NCHW tensors.
//!
//! Convolution is lowered to matrix multiplication through an explicit
//! im2col buffer laid out per sample as `[C*kh*kw, H'*W']`. The lowered
//! buffer is exposed so that callers evaluating several products against
//! the same input (primal and tangent weights) can reuse it.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices.
///
/// `A` is `m x k` after the optional transpose, `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made by the kernel.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

/// Shapes involved in one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = input[..] else {
            return dim_err(format!("conv input must be NCHW, got {input:?}"));
        };
        let [k, wc, kh, kw] = weight[..] else {
            return dim_err(format!("conv weight must be [K,C,kh,kw], got {weight:?}"));
        };
        if wc != c {
            return dim_err(format!(
                "conv input has {c} channels but weight expects {wc}"
            ));
        }
        if stride == 0 {
            return Err(Error::Input("conv stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return dim_err(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.k, self.oh, self.ow]
    }
}

/// Lowers `input` to per-sample patch matrices `[N, C*kh*kw, H'*W']`.
pub fn im2col(input: &Tensor, g: &ConvGeometry) -> Vec<f32> {
    let (pl, sp) = (g.patch_len(), g.out_spatial());
    let mut cols = vec![0.0f32; g.n * pl * sp];
    let x = input.data();
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let dst = &mut cols[(n * pl + row) * sp..][..sp];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch matrices back to an NCHW buffer (adjoint of [`im2col`]).
fn col2im(cols: &[f32], g: &ConvGeometry, out: &mut [f32]) {
    let (pl, sp) = (g.patch_len(), g.out_spatial());
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &mut out[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let src = &cols[(n * pl + row) * sp..][..sp];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: Option<&Tensor>, len: usize, what: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [len] {
            return dim_err(format!(
                "{what} bias has shape {:?}, expected [{len}]",
                b.shape()
            ));
        }
    }
    Ok(())
}

/// Convolution from a lowered input: `scale * (weight * x) + bias`.
pub fn conv_from_cols(
    cols: &[f32],
    weight: &Tensor,
    bias: Option<&Tensor>,
    scale: f32,
    g: &ConvGeometry,
) -> Result<Tensor> {
    if weight.shape() != [g.k, g.c, g.kh, g.kw] {
        return dim_err(format!(
            "conv weight {:?} does not match geometry {:?}",
            weight.shape(),
            [g.k, g.c, g.kh, g.kw]
        ));
    }
    check_bias(bias, g.k, "conv")?;
    let (pl, sp) = (g.patch_len(), g.out_spatial());
    let mut out = vec![0.0f32; g.n * g.k * sp];
    for n in 0..g.n {
        let y = &mut out[n * g.k * sp..][..g.k * sp];
        gemm(
            g.k,
            pl,
            sp,
            scale,
            weight.data(),
            false,
            &cols[n * pl * sp..][..pl * sp],
            false,
            0.0,
            y,
        );
        if let Some(b) = bias {
            for (k, &bk) in b.data().iter().enumerate() {
                for v in &mut y[k * sp..(k + 1) * sp] {
                    *v += bk;
                }
            }
        }
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv2d_scaled(input, weight, bias, stride, pad, 1.0)
}

/// Convolution whose weight contribution is multiplied by `scale`
/// (the NTK factor `1/sqrt(fan_in)`); the bias is not scaled.
pub fn conv2d_scaled(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    scale: f32,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let cols = im2col(input, &g);
    conv_from_cols(&cols, weight, bias, scale, &g)
}

/// `scale * sum_n dY_n cols_n^T`, shaped like the weight.
pub fn conv2d_weight_grad(cols: &[f32], grad_out: &Tensor, g: &ConvGeometry, scale: f32) -> Tensor {
    let (pl, sp) = (g.patch_len(), g.out_spatial());
    let mut dw = vec![0.0f32; g.k * pl];
    for n in 0..g.n {
        gemm(
            g.k,
            sp,
            pl,
            scale,
            &grad_out.data()[n * g.k * sp..][..g.k * sp],
            false,
            &cols[n * pl * sp..][..pl * sp],
            true,
            1.0,
            &mut dw,
        );
    }
    Tensor::from_fn(&[g.k, g.c, g.kh, g.kw], |i| dw[i])
}

/// Per-channel sum of an NCHW gradient.
pub fn conv2d_bias_grad(grad_out: &Tensor) -> Result<Tensor> {
    let (_, k, h, w) = grad_out.dims4()?;
    let mut db = vec![0.0f64; k];
    for (i, chunk) in grad_out.data().chunks(h * w).enumerate() {
        db[i % k] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    Ok(Tensor::from_fn(&[k], |i| db[i] as f32))
}

/// Gradient with respect to the convolution input.
pub fn conv2d_input_grad(grad_out: &Tensor, weight: &Tensor, g: &ConvGeometry, scale: f32) -> Tensor {
    let (pl, sp) = (g.patch_len(), g.out_spatial());
    let mut dcols = vec![0.0f32; pl * sp];
    let mut dx = vec![0.0f32; g.n * g.c * g.h * g.w];
    let single = ConvGeometry { n: 1, ..*g };
    for n in 0..g.n {
        gemm(
            pl,
            g.k,
            sp,
            scale,
            weight.data(),
            true,
            &grad_out.data()[n * g.k * sp..][..g.k * sp],
            false,
            0.0,
            &mut dcols,
        );
        col2im(&dcols, &single, &mut dx[n * g.c * g.h * g.w..][..g.c * g.h * g.w]);
    }
    Tensor::from_fn(&[g.n, g.c, g.h, g.w], |i| dx[i])
}

pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    dense_scaled(input, weight, bias, 1.0)
}

/// `scale * input . weight + bias` for `input: [N,d]`, `weight: [d,c]`.
pub fn dense_scaled(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    scale: f32,
) -> Result<Tensor> {
    let (n, d) = input.dims2()?;
    let (wd, c) = weight.dims2()?;
    if wd != d {
        return dim_err(format!(
            "dense input has {d} features but weight is {:?}",
            weight.shape()
        ));
    }
    check_bias(bias, c, "dense")?;
    let mut out = vec![0.0f32; n * c];
    gemm(n, d, c, scale, input.data(), false, weight.data(), false, 0.0, &mut out);
    if let Some(b) = bias {
        for row in out.chunks_mut(c) {
            for (v, &bj) in row.iter_mut().zip(b.data()) {
                *v += bj;
            }
        }
    }
    Tensor::new(vec![n, c], out)
}

/// `scale * input^T . grad_out`.
pub fn dense_weight_grad(input: &Tensor, grad_out: &Tensor, scale: f32) -> Result<Tensor> {
    let (n, d) = input.dims2()?;
    let (gn, c) = grad_out.dims2()?;
    if gn != n {
        return dim_err("dense gradient batch mismatch");
    }
    let mut dw = vec![0.0f32; d * c];
    gemm(d, n, c, scale, input.data(), true, grad_out.data(), false, 0.0, &mut dw);
    Tensor::new(vec![d, c], dw)
}

/// `scale * grad_out . weight^T`.
pub fn dense_input_grad(grad_out: &Tensor, weight: &Tensor, scale: f32) -> Result<Tensor> {
    let (n, c) = grad_out.dims2()?;
    let (d, wc) = weight.dims2()?;
    if wc != c {
        return dim_err("dense gradient width mismatch");
    }
    let mut dx = vec![0.0f32; n * d];
    gemm(n, c, d, scale, grad_out.data(), false, weight.data(), true, 0.0, &mut dx);
    Tensor::new(vec![n, d], dx)
}

/// Column sums of a `[N, c]` gradient.
pub fn dense_bias_grad(grad_out: &Tensor) -> Result<Tensor> {
    let (_, c) = grad_out.dims2()?;
    let mut db = vec![0.0f64; c];
    for row in grad_out.data().chunks(c) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    Ok(Tensor::from_fn(&[c], |i| db[i] as f32))
}

/// Elementwise `max(0, v)` together with the pass mask `v >= 0`.
pub fn relu(input: &Tensor) -> (Tensor, Vec<bool>) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v >= 0.0).collect();
    let out = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    (
        Tensor::new(input.shape().to_vec(), out).expect("same shape"),
        mask,
    )
}

/// Zeroes entries whose mask bit is unset.
pub fn apply_mask(t: &Tensor, mask: &[bool]) -> Tensor {
    debug_assert_eq!(t.numel(), mask.len());
    let data = t
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let [n, c, h, w] = input[..] else {
            return dim_err(format!("pool input must be NCHW, got {input:?}"));
        };
        if window == 0 || stride == 0 {
            return Err(Error::Input("pool window and stride must be >= 1".into()));
        }
        if window > h || window > w {
            return dim_err(format!("pool window {window} exceeds spatial size {h}x{w}"));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            window,
            stride,
            oh: (h - window) / stride + 1,
            ow: (w - window) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.oh, self.ow]
    }
}

/// Pooling result; `argmax` holds flat input indices for max pooling.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Option<Vec<usize>>,
    pub geometry: PoolGeometry,
}

pub fn pool(input: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Pooled> {
    let g = PoolGeometry::new(input.shape(), window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut argmax = match kind {
        PoolKind::Max => Some(Vec::with_capacity(out.capacity())),
        PoolKind::Avg => None,
    };
    let inv = 1.0 / (window * window) as f32;
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, x0) = (oy * stride, ox * stride);
                match kind {
                    PoolKind::Avg => {
                        let mut s = 0.0f32;
                        for i in 0..window {
                            for j in 0..window {
                                s += x[base + (y0 + i) * g.w + x0 + j];
                            }
                        }
                        out.push(s * inv);
                    }
                    PoolKind::Max => {
                        let mut best = base + y0 * g.w + x0;
                        for i in 0..window {
                            for j in 0..window {
                                let idx = base + (y0 + i) * g.w + x0 + j;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.as_mut().unwrap().push(best);
                    }
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(g.output_shape().to_vec(), out)?,
        argmax,
        geometry: g,
    })
}

/// Applies a recorded pooling (same windows, same argmax routing) to another
/// tensor of the input's shape. This is the pooling map linearized at the
/// primal point.
pub fn pool_like(t: &Tensor, pooled: &Pooled) -> Result<Tensor> {
    let g = &pooled.geometry;
    if t.shape() != [g.n, g.c, g.h, g.w] {
        return dim_err(format!("pool_like shape {:?} mismatch", t.shape()));
    }
    match &pooled.argmax {
        Some(idx) => Ok(Tensor::new(
            g.output_shape().to_vec(),
            idx.iter().map(|&i| t.data()[i]).collect(),
        )?),
        None => Ok(pool(t, PoolKind::Avg, g.window, g.stride)?.output),
    }
}

/// Adjoint of the pooling map recorded in `pooled`.
pub fn pool_backward(grad_out: &Tensor, pooled: &Pooled) -> Result<Tensor> {
    let g = &pooled.geometry;
    if grad_out.shape() != g.output_shape() {
        return dim_err("pool gradient shape mismatch");
    }
    let mut dx = vec![0.0f32; g.n * g.c * g.h * g.w];
    let gy = grad_out.data();
    match &pooled.argmax {
        Some(idx) => {
            for (&i, &v) in idx.iter().zip(gy) {
                dx[i] += v;
            }
        }
        None => {
            let inv = 1.0 / (g.window * g.window) as f32;
            for plane in 0..g.n * g.c {
                let base = plane * g.h * g.w;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let v = gy[(plane * g.oh + oy) * g.ow + ox] * inv;
                        for i in 0..g.window {
                            for j in 0..g.window {
                                dx[base + (oy * g.stride + i) * g.w + ox * g.stride + j] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.c, g.h, g.w], dx)
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return dim_err(format!("{} labels for {n} logit rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = vec![0.0f32; n * c];
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for (i, (row, &label)) in logits.data().chunks(c).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() - (row[label] as f64 - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad[i * c + j] = ((e / z - onehot) * inv_n) as f32;
        }
    }
    Ok(((total * inv_n) as f32, Tensor::new(vec![n, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Seven-loop cross-correlation in f64.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (k, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.map_or(0.0, |b| b.data()[ki] as f64);
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((ki * c + ci) * kh + i) * kw + j];
                                    s += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((ni * k + ki) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_kernel() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = Tensor::randn(&[2, 3, 5, 5], &mut rng(1));
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::full(&[4], -0.75);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == -0.75));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng(2);
        let x = Tensor::randn(&[2, 3, 8, 8], &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut r);
        let b = Tensor::randn(&[4], &mut r);
        let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        let reference = naive_conv(&x, &w, Some(&b), 2, 1);
        for (a, e) in y.data().iter().zip(&reference) {
            assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_input_grad_is_adjoint() {
        let mut r = rng(3);
        let x = Tensor::randn(&[2, 3, 7, 6], &mut r);
        let w = Tensor::randn(&[5, 3, 3, 2], &mut r);
        let g = ConvGeometry::new(x.shape(), w.shape(), 2, 1).unwrap();
        let y = conv2d_scaled(&x, &w, None, 2, 1, 0.3).unwrap();
        let u = Tensor::randn(y.shape(), &mut r);
        let dx = conv2d_input_grad(&u, &w, &g, 0.3);
        let lhs = y.dot(&u).unwrap();
        let rhs = x.dot(&dx).unwrap();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
        let dw = conv2d_weight_grad(&im2col(&x, &g), &u, &g, 0.3);
        let rhs_w = w.dot(&dw).unwrap();
        assert!((lhs - rhs_w).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn dense_cases() {
        let mut r = rng(4);
        let x = Tensor::randn(&[3, 5], &mut r);
        let eye = Tensor::from_fn(&[5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        let y = dense(&x, &eye, Some(&Tensor::zeros(&[5]))).unwrap();
        assert_eq!(y, x);

        let beta = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let y = dense(&x, &Tensor::zeros(&[5, 2]), Some(&beta)).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, beta.data());
        }

        let w = Tensor::randn(&[5, 2], &mut r);
        let y = dense(&x, &w, None).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f64;
                for k in 0..5 {
                    s += x.data()[i * 5 + k] as f64 * w.data()[k * 2 + j] as f64;
                }
                assert!((y.data()[i * 2 + j] as f64 - s).abs() < 1e-6);
            }
        }
        assert!(dense(&x, &Tensor::zeros(&[4, 2]), None).is_err());
    }

    #[test]
    fn relu_sign_cases_and_mask() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, mask) = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(mask, vec![false, true, true]);
        let (y, _) = relu(&Tensor::full(&[4], -3.0));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_abs_identity() {
        let x = Tensor::randn(&[50], &mut rng(5));
        let (a, _) = relu(&x);
        let (b, _) = relu(&x.scale(-1.0));
        let s = a.add(&b).unwrap();
        for (v, xv) in s.data().iter().zip(x.data()) {
            assert_eq!(*v, xv.abs());
        }
    }

    #[test]
    fn pool_cases() {
        let c = Tensor::full(&[1, 2, 4, 4], 3.5);
        let p = pool(&c, PoolKind::Avg, 2, 2).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 3.5));

        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pool(&x, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax.as_deref(), Some(&[3][..]));

        let tie = Tensor::full(&[1, 1, 2, 2], 1.0);
        let p = pool(&tie, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(p.argmax.unwrap(), vec![0]);

        assert!(matches!(
            pool(&x, PoolKind::Avg, 3, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn avg_pool_matches_naive() {
        let x = Tensor::randn(&[2, 3, 7, 7], &mut rng(6));
        let p = pool(&x, PoolKind::Avg, 3, 2).unwrap();
        assert_eq!(p.output.shape(), &[2, 3, 3, 3]);
        for n in 0..2 {
            for c in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = 0.0f64;
                        for i in 0..3 {
                            for j in 0..3 {
                                s += x.data()[((n * 3 + c) * 7 + oy * 2 + i) * 7 + ox * 2 + j] as f64;
                            }
                        }
                        let got = p.output.data()[((n * 3 + c) * 3 + oy) * 3 + ox] as f64;
                        assert!((got - s / 9.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_and_limit() {
        let l = Tensor::zeros(&[2, 5]);
        let (loss, _) = softmax_cross_entropy(&l, &[0, 3]).unwrap();
        assert!((loss - 5f32.ln()).abs() < 1e-6);

        let l = Tensor::new(vec![1, 3], vec![0.0, 1e4, 0.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&l, &[1]).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(g.all_finite());

        assert!(matches!(
            softmax_cross_entropy(&l, &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn softmax_grad_matches_central_differences() {
        let mut r = rng(7);
        let logits = Tensor::randn(&[4, 6], &mut r);
        let labels = [0usize, 5, 2, 2];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let loss64 = |l: &[f64]| -> f64 {
            let mut total = 0.0;
            for (row, &y) in l.chunks(6).zip(&labels) {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                total += z.ln() + m - row[y];
            }
            total / 4.0
        };
        let base: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let eps = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss64(&p) - loss64(&m)) / (2.0 * eps);
            assert!((fd - g.data()[i] as f64).abs() < 1e-4);
        }
    }
}
