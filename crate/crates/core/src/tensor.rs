//! Dense row-major `f64` tensors and the numerical kernels the rest of the
//! crate is built from: matmul, softmax, group norm, convolution, pooling,
//! multi-head attention, positional encodings, and bilinear resampling.
//!
//! Kernels are written as plain loops over contiguous data with a fixed
//! reduction order, so results are bit-identical run to run.

use crate::error::{Error, Result};

/// Dense multi-dimensional array, row-major, double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from a shape and matching data buffer. Rejects length mismatch
    /// and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.data.len() {
            t.data[i] = f(&idx);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        t
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    #[inline]
    pub fn at_mut(&mut self, index: &[usize]) -> &mut f64 {
        let o = self.offset(index);
        &mut self.data[o]
    }

    #[inline]
    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut o = 0;
        for (d, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[d], "index {:?} out of {:?}", index, self.shape);
            o = o * self.shape[d] + i;
        }
        o
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {} at flat index {} of shape {:?}",
                    v, i, self.shape
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "add_assign on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dim("dot on mismatched shapes".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean squared error against another tensor of the same shape.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "mse on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let s: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s / self.data.len() as f64)
    }
}

/// `a [m x k] * b [k x n] -> [m x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Dim("matmul expects rank-2 tensors".into()));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dim(format!(
            "matmul inner dims {} vs {}",
            k, k2
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::Dim(format!(
            "softmax axis {} out of rank {}",
            axis,
            x.shape.len()
        )));
    }
    let axis_len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(x.data[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (x.data[base + a * inner] - max).exp();
                out.data[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out.data[base + a * inner] /= sum;
            }
        }
    }
    Ok(out)
}

/// Group normalization over `[C, H, W]`: per-group mean 0 / var 1, then the
/// per-channel affine `gamma, beta`.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::Dim("group_norm expects [C, H, W]".into()));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "channels {} not divisible by groups {}",
            c, groups
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dim("gamma/beta must have shape [C]".into()));
    }
    let per = c / groups;
    let hw = h * w;
    let mut out = x.clone();
    for g in 0..groups {
        let lo = g * per * hw;
        let hi = (g + 1) * per * hw;
        let n = (hi - lo) as f64;
        let mut mean = 0.0;
        for v in &x.data[lo..hi] {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for v in &x.data[lo..hi] {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv = 1.0 / (var + eps).sqrt();
        for ch in g * per..(g + 1) * per {
            let ga = gamma.data[ch];
            let be = beta.data[ch];
            for p in 0..hw {
                let i = ch * hw + p;
                out.data[i] = (x.data[i] - mean) * inv * ga + be;
            }
        }
    }
    Ok(out)
}

/// 2-D cross-correlation with zero padding.
///
/// `x [Cin, H, W]`, `kernel [Cout, Cin, kh, kw]` -> `[Cout, H', W']`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if x.shape.len() != 3 || kernel.shape.len() != 4 {
        return Err(Error::Dim("conv2d expects x[C,H,W], kernel[O,I,kh,kw]".into()));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, cin_k, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if cin != cin_k {
        return Err(Error::Dim(format!(
            "conv2d input channels {} vs kernel {}",
            cin, cin_k
        )));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if kh > hp || kw > wp {
        return Err(Error::Dim(format!(
            "kernel {}x{} larger than padded input {}x{}",
            kh, kw, hp, wp
        )));
    }
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for oc in 0..cout {
        for ic in 0..cin {
            let kbase = (oc * cin + ic) * kh * kw;
            let xbase = ic * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x.data[xbase + iy as usize * w + ix as usize]
                                * kernel.data[kbase + ky * kw + kx];
                        }
                    }
                    out.data[(oc * ho + oy) * wo + ox] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Arithmetic mean over the given axes; the axes are removed from the shape.
pub fn avg_pool(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    if axes.is_empty() {
        return Err(Error::Config("avg_pool needs at least one axis".into()));
    }
    let rank = x.shape.len();
    let mut reduce = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::Dim(format!("avg_pool axis {} out of rank {}", a, rank)));
        }
        if x.shape[a] == 0 {
            return Err(Error::Config(format!("avg_pool over empty axis {}", a)));
        }
        reduce[a] = true;
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduce[d]).map(|d| x.shape[d]).collect();
    let count: usize = (0..rank).filter(|&d| reduce[d]).map(|d| x.shape[d]).product();
    let out_n: usize = out_shape.iter().product();
    let mut out = Tensor {
        shape: out_shape,
        data: vec![0.0; out_n.max(1)],
    };
    // Walk the full tensor once, accumulating into the reduced index.
    let mut idx = vec![0usize; rank];
    for i in 0..x.data.len() {
        let mut o = 0;
        for d in 0..rank {
            if !reduce[d] {
                o = o * x.shape[d] + idx[d];
            }
        }
        out.data[o] += x.data[i];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < x.shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let inv = 1.0 / count as f64;
    for v in &mut out.data {
        *v *= inv;
    }
    if out.shape.is_empty() {
        // Scalar result: represent as shape [1].
        out.shape = vec![1];
    }
    Ok(out)
}

/// Non-overlapping 2x2 mean pooling over `[C, H, W]` with floor semantics
/// (a trailing odd row/column is dropped).
pub fn avg_pool_2x2(x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::Dim("avg_pool_2x2 expects [C, H, W]".into()));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Dim("avg_pool_2x2 needs H, W >= 2".into()));
    }
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for y in 0..ho {
            for x_ in 0..wo {
                let base = ch * h * w + 2 * y * w + 2 * x_;
                out.data[(ch * ho + y) * wo + x_] =
                    0.25 * (x.data[base] + x.data[base + 1] + x.data[base + w] + x.data[base + w + 1]);
            }
        }
    }
    Ok(out)
}

/// Scaled dot-product attention with `heads` parallel heads and no masking.
///
/// `q [n, d]`, `k [m, d]`, `v [m, d]` -> `[n, d]`; per head
/// `softmax(q kT / sqrt(d/heads)) v`, heads concatenated.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    if q.shape.len() != 2 || k.shape.len() != 2 || v.shape.len() != 2 {
        return Err(Error::Dim("attention expects rank-2 q, k, v".into()));
    }
    let (n, d) = (q.shape[0], q.shape[1]);
    let m = k.shape[0];
    if k.shape[1] != d || v.shape[1] != d || v.shape[0] != m {
        return Err(Error::Dim(format!(
            "attention shapes q{:?} k{:?} v{:?}",
            q.shape, k.shape, v.shape
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "feature dim {} not divisible by heads {}",
            d, heads
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d]);
    let mut scores = vec![0.0f64; m];
    for hd in 0..heads {
        let off = hd * dh;
        for i in 0..n {
            let qrow = &q.data[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &k.data[j * d + off..j * d + off + dh];
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += qrow[t] * krow[t];
                }
                *s = acc * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let orow = &mut out.data[i * d + off..i * d + off + dh];
            for (j, s) in scores.iter().enumerate() {
                let wgt = s / sum;
                let vrow = &v.data[j * d + off..j * d + off + dh];
                for t in 0..dh {
                    orow[t] += wgt * vrow[t];
                }
            }
        }
    }
    Ok(out)
}

/// 2-D sinusoidal positional encoding `[d, h, w]`.
///
/// The first half of the channels encodes the row index, the second half the
/// column index; within each half, even channels carry sin and odd channels
/// cos at standard transformer frequencies.
pub fn sinusoidal_pos_enc(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 || d == 0 {
        return Err(Error::Config(format!("positional encoding dim {} must be even", d)));
    }
    let half = d / 2;
    let mut out = Tensor::zeros(&[d, h, w]);
    for c in 0..d {
        let (pos_is_row, cc) = if c < half { (true, c) } else { (false, c - half) };
        let pair = cc / 2;
        let denom = half.max(2) as f64;
        let freq = (10_000f64).powf(-(2.0 * pair as f64) / denom);
        for y in 0..h {
            for x in 0..w {
                let pos = if pos_is_row { y as f64 } else { x as f64 };
                let angle = pos * freq;
                out.data[(c * h + y) * w + x] = if cc % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    Ok(out)
}

/// 1-D sinusoidal embedding of a scalar position into `[d]`.
pub fn sinusoidal_embed(pos: f64, d: usize) -> Result<Tensor> {
    if d % 2 != 0 || d == 0 {
        return Err(Error::Config(format!("embedding dim {} must be even", d)));
    }
    let mut out = Tensor::zeros(&[d]);
    for c in 0..d {
        let pair = c / 2;
        let freq = (10_000f64).powf(-(2.0 * pair as f64) / d as f64);
        let angle = pos * freq;
        out.data[c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    Ok(out)
}

/// Bilinear resize of `[C, H, W]` with the align-corners-false convention.
pub fn bilinear_resize(x: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::Dim("bilinear_resize expects [C, H, W]".into()));
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::Config("bilinear_resize target dims must be >= 1".into()));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if h == new_h && w == new_w {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[c, new_h, new_w]);
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for oy in 0..new_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..new_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = x.data[base + y0 * w + x0];
                let v01 = x.data[base + y0 * w + x1];
                let v10 = x.data[base + y1 * w + x0];
                let v11 = x.data[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out.data[(ch * new_h + oy) * new_w + ox] = top + (bot - top) * wy;
            }
        }
    }
    Ok(out)
}

/// Sample `x [C, H, W]` at `(y + dy, x + dx)` per location with bilinear
/// weights; coordinates are clamped to the image border.
///
/// `offsets [2, H, W]` carries `(dy, dx)` in pixels.
pub fn bilinear_sample(x: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::Dim("bilinear_sample expects [C, H, W]".into()));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if offsets.shape() != [2, h, w] {
        return Err(Error::Dim(format!(
            "offsets must be [2, {}, {}], got {:?}",
            h,
            w,
            offsets.shape()
        )));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let hw = h * w;
    for y in 0..h {
        for xp in 0..w {
            let p = y * w + xp;
            let dy = offsets.data[p];
            let dx = offsets.data[hw + p];
            if dy == 0.0 && dx == 0.0 {
                // Zero offset is the identity, bit for bit.
                for ch in 0..c {
                    out.data[ch * hw + p] = x.data[ch * hw + p];
                }
                continue;
            }
            let sy = (y as f64 + dy).clamp(0.0, (h - 1) as f64);
            let sx = (xp as f64 + dx).clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let base = ch * hw;
                let v00 = x.data[base + y0 * w + x0];
                let v01 = x.data[base + y0 * w + x1];
                let v10 = x.data[base + y1 * w + x0];
                let v11 = x.data[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.data[base + p] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

/// SiLU activation, x * sigmoid(x). Smooth, so finite-difference gradient
/// checks stay clean.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v / (1.0 + (-v).exp()))
}

#[inline]
pub fn silu_scalar(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Stack equal-shape tensors as rows of a matrix `[n, len]`.
pub fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Dim("stack_rows on empty list".into()));
    }
    let len = rows[0].len();
    for r in rows {
        if r.len() != len {
            return Err(Error::Dim("stack_rows on unequal lengths".into()));
        }
    }
    let mut data = Vec::with_capacity(rows.len() * len);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Ok(Tensor {
        shape: vec![rows.len(), len],
        data,
    })
}

/// View `[C, H, W]` as spatial tokens `[H*W, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::Dim("to_tokens expects [C, H, W]".into()));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let hw = h * w;
    let mut data = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            data[p * c + ch] = x.data[ch * hw + p];
        }
    }
    Ok(Tensor {
        shape: vec![hw, c],
        data,
    })
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if tokens.shape.len() != 2 || tokens.shape[0] != h * w {
        return Err(Error::Dim(format!(
            "from_tokens expects [{}x{}, C], got {:?}",
            h, w, tokens.shape
        )));
    }
    let c = tokens.shape[1];
    let hw = h * w;
    let mut data = vec![0.0; hw * c];
    for p in 0..hw {
        for ch in 0..c {
            data[ch * hw + p] = tokens.data[p * c + ch];
        }
    }
    Ok(Tensor {
        shape: vec![c, h, w],
        data,
    })
}

/// Concatenate along axis 0 (all other dims must match).
pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dim("concat0 on empty list".into()));
    }
    let tail = &parts[0].shape[1..];
    let mut n0 = 0;
    for p in parts {
        if &p.shape[1..] != tail {
            return Err(Error::Dim("concat0 on mismatched trailing dims".into()));
        }
        n0 += p.shape[0];
    }
    let mut shape = vec![n0];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = matmul(&Tensor::eye(3), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_constant_row_uniform() {
        let x = Tensor::full(&[1, 4], 3.7);
        let s = softmax(&x, 1).unwrap();
        for v in s.data() {
            assert_close(*v, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_close(s.data()[0], 0.25, 1e-14);
        assert_close(s.data()[1], 0.75, 1e-14);
    }

    #[test]
    fn softmax_extreme_values_stable() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0e4, 2.0e4]).unwrap();
        let s = softmax(&x, 0).unwrap();
        s.check_finite().unwrap();
        assert_close(s.data()[2], 1.0, 1e-12);
        let sum: f64 = s.data().iter().sum();
        assert_close(sum, 1.0, 1e-12);
    }

    #[test]
    fn group_norm_constant_is_zero() {
        let x = Tensor::full(&[4, 2, 2], 5.0);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let out = group_norm(&x, 2, &g, &b, 1e-5).unwrap();
        for v in out.data() {
            assert_close(*v, 0.0, 1e-12);
        }
    }

    #[test]
    fn group_norm_gamma_zero_gives_beta() {
        let mut rng = crate::rng::Rng::new(1);
        let x = Tensor::from_fn(&[4, 3, 3], |_| rng.normal());
        let g = Tensor::zeros(&[4]);
        let b = Tensor::full(&[4], 2.5);
        let out = group_norm(&x, 4, &g, &b, 1e-5).unwrap();
        for v in out.data() {
            assert_close(*v, 2.5, 1e-12);
        }
    }

    #[test]
    fn group_norm_statistics() {
        let mut rng = crate::rng::Rng::new(2);
        let x = Tensor::from_fn(&[8, 5, 5], |_| 3.0 + 2.0 * rng.normal());
        let g = Tensor::full(&[8], 1.0);
        let b = Tensor::zeros(&[8]);
        let out = group_norm(&x, 4, &g, &b, 1e-12).unwrap();
        let per = 2 * 25;
        for grp in 0..4 {
            let slice = &out.data()[grp * per..(grp + 1) * per];
            let mean: f64 = slice.iter().sum::<f64>() / per as f64;
            let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            assert_close(mean, 0.0, 1e-10);
            assert_close(var, 1.0, 1e-8);
        }
    }

    #[test]
    fn group_norm_indivisible_rejected() {
        let x = Tensor::zeros(&[3, 2, 2]);
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(
            group_norm(&x, 2, &g, &b, 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = crate::rng::Rng::new(3);
        let x = Tensor::from_fn(&[2, 4, 4], |_| rng.normal());
        let mut k = Tensor::zeros(&[2, 2, 1, 1]);
        *k.at_mut(&[0, 0, 0, 0]) = 1.0;
        *k.at_mut(&[1, 1, 0, 0]) = 1.0;
        let out = conv2d(&x, &k, 1, 0).unwrap();
        assert!(out.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn conv2d_ones_kernel_interior() {
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &k, 1, 1).unwrap();
        assert_close(out.at(&[0, 2, 2]), 9.0, 1e-12);
        // Corner sees only 4 in-bounds taps.
        assert_close(out.at(&[0, 0, 0]), 4.0, 1e-12);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dim(_))));
    }

    #[test]
    fn avg_pool_constant_and_pair() {
        let x = Tensor::full(&[2, 3, 3], 4.2);
        let out = avg_pool(&x, &[1, 2]).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert_close(out.data()[0], 4.2, 1e-12);
        let p = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let out = avg_pool(&p, &[0]).unwrap();
        assert_close(out.data()[0], 2.0, 1e-15);
    }

    #[test]
    fn avg_pool_mass_identity() {
        let mut rng = crate::rng::Rng::new(4);
        let x = Tensor::from_fn(&[3, 4, 5], |_| rng.normal());
        let pooled = avg_pool(&x, &[1, 2]).unwrap();
        let mass_a = pooled.sum() * 20.0;
        let mass_b = x.sum();
        assert_close(mass_a, mass_b, 1e-12);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let k = Tensor::new(vec![1, 4], vec![0.2, 0.1, -0.4, 0.9]).unwrap();
        let v = Tensor::new(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = multi_head_attention(&q, &k, &v, 2).unwrap();
        for row in 0..2 {
            for c in 0..4 {
                assert_close(out.at(&[row, c]), v.at(&[0, c]), 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_mean_value() {
        let q = Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let k = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let v = Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = multi_head_attention(&q, &k, &v, 1).unwrap();
        assert_close(out.at(&[0, 0]), 3.0, 1e-12);
        assert_close(out.at(&[0, 1]), 5.0, 1e-12);
    }

    #[test]
    fn attention_indivisible_heads_rejected() {
        let q = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            multi_head_attention(&q, &q, &q, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pos_enc_origin_and_bounds() {
        let p = sinusoidal_pos_enc(4, 4, 8).unwrap();
        // Row-half at position 0: sin channel 0, cos channel 1.
        assert_close(p.at(&[0, 0, 0]), 0.0, 1e-15);
        assert_close(p.at(&[1, 0, 0]), 1.0, 1e-15);
        for v in p.data() {
            assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn pos_enc_distinct_positions() {
        let d = 4;
        let p = sinusoidal_pos_enc(8, 8, d).unwrap();
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                let key: Vec<u64> = (0..d).map(|c| p.at(&[c, y, x]).to_bits()).collect();
                assert!(!seen.contains(&key), "positions collide at ({y},{x})");
                seen.push(key);
            }
        }
    }

    #[test]
    fn pos_enc_odd_dim_rejected() {
        assert!(matches!(sinusoidal_pos_enc(2, 2, 5), Err(Error::Config(_))));
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = crate::rng::Rng::new(5);
        let x = Tensor::from_fn(&[2, 3, 5], |_| rng.normal());
        let same = bilinear_resize(&x, 3, 5).unwrap();
        assert!(same.max_abs_diff(&x) == 0.0);
        let c = Tensor::full(&[1, 4, 4], 2.5);
        let up = bilinear_resize(&c, 9, 7).unwrap();
        for v in up.data() {
            assert_close(*v, 2.5, 1e-12);
        }
    }

    #[test]
    fn resize_linear_ramp_stays_linear() {
        // f(y, x) = x; upsample columns; interior samples must stay on the ramp.
        let w = 8;
        let x = Tensor::from_fn(&[1, 4, w], |i| i[2] as f64);
        let new_w = 16;
        let up = bilinear_resize(&x, 4, new_w).unwrap();
        let sx = w as f64 / new_w as f64;
        for ox in 0..new_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            if fx < 0.0 || fx > (w - 1) as f64 {
                continue; // clamped edge, not on the ramp
            }
            assert_close(up.at(&[0, 1, ox]), fx, 1e-10);
        }
    }

    #[test]
    fn sample_zero_offset_identity() {
        let mut rng = crate::rng::Rng::new(6);
        let x = Tensor::from_fn(&[3, 5, 5], |_| rng.normal());
        let off = Tensor::zeros(&[2, 5, 5]);
        let out = bilinear_sample(&x, &off).unwrap();
        assert!(out.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn sample_integer_shift() {
        let x = Tensor::from_fn(&[1, 4, 6], |i| (i[1] * 10 + i[2]) as f64);
        let mut off = Tensor::zeros(&[2, 4, 6]);
        for y in 0..4 {
            for xp in 0..6 {
                *off.at_mut(&[1, y, xp]) = 1.0; // dx = 1
            }
        }
        let out = bilinear_sample(&x, &off).unwrap();
        for y in 0..4 {
            for xp in 0..5 {
                assert_close(out.at(&[0, y, xp]), x.at(&[0, y, xp + 1]), 1e-12);
            }
        }
    }

    #[test]
    fn sample_affine_exact() {
        // f(y, x) = 2y + 3x is reproduced exactly at fractional interior offsets.
        let x = Tensor::from_fn(&[1, 8, 8], |i| 2.0 * i[1] as f64 + 3.0 * i[2] as f64);
        let mut off = Tensor::zeros(&[2, 8, 8]);
        for y in 2..6 {
            for xp in 2..6 {
                *off.at_mut(&[0, y, xp]) = 0.37;
                *off.at_mut(&[1, y, xp]) = -0.81;
            }
        }
        let out = bilinear_sample(&x, &off).unwrap();
        for y in 2..6 {
            for xp in 2..6 {
                let expect = 2.0 * (y as f64 + 0.37) + 3.0 * (xp as f64 - 0.81);
                assert_close(out.at(&[0, y, xp]), expect, 1e-12);
            }
        }
    }

    #[test]
    fn tokens_round_trip() {
        let mut rng = crate::rng::Rng::new(7);
        let x = Tensor::from_fn(&[3, 4, 5], |_| rng.normal());
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[20, 3]);
        let back = from_tokens(&t, 4, 5).unwrap();
        assert!(back.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }
}
