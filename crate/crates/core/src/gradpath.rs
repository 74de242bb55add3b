//! Analytic gradients for the offset-supervision path.
//!
//! This is the only trained path with hand-derived gradients: the offset
//! head's two convolutions, optionally chained through the bilinear sampler,
//! into a masked MSE. Everything else in the model is forward-only and
//! trained with stochastic directional estimates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{bilinear_sample, conv2d, silu_scalar, Tensor};

/// Per-cell supervision mask: true where either flow channel is nonzero.
pub fn offset_mask(delta: &Tensor) -> Result<Vec<bool>> {
    if delta.shape().len() != 3 || delta.shape()[0] != 2 {
        return Err(Error::Dim("offset mask expects [2, h, w]".into()));
    }
    let hw = delta.shape()[1] * delta.shape()[2];
    Ok((0..hw)
        .map(|p| delta.data()[p] != 0.0 || delta.data()[hw + p] != 0.0)
        .collect())
}

/// Mean squared error over masked cells (all channels); 0 when the mask is
/// empty.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "masked_mse on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = a.shape()[0];
    let hw: usize = a.shape()[1..].iter().product();
    if mask.len() != hw {
        return Err(Error::Dim("mask length mismatch".into()));
    }
    let n_mask = mask.iter().filter(|m| **m).count();
    if n_mask == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for ch in 0..c {
        for (p, m) in mask.iter().enumerate() {
            if *m {
                let d = a.data()[ch * hw + p] - b.data()[ch * hw + p];
                acc += d * d;
            }
        }
    }
    Ok(acc / (n_mask * c) as f64)
}

fn d_masked_mse(a: &Tensor, b: &Tensor, mask: &[bool]) -> Tensor {
    let c = a.shape()[0];
    let hw: usize = a.shape()[1..].iter().product();
    let n_mask = mask.iter().filter(|m| **m).count();
    let mut g = Tensor::zeros(a.shape());
    if n_mask == 0 {
        return g;
    }
    let scale = 2.0 / (n_mask * c) as f64;
    for ch in 0..c {
        for (p, m) in mask.iter().enumerate() {
            if *m {
                g.data_mut()[ch * hw + p] =
                    scale * (a.data()[ch * hw + p] - b.data()[ch * hw + p]);
            }
        }
    }
    g
}

/// Gradients of a convolution.
pub struct ConvGrads {
    pub d_weight: Tensor,
    pub d_bias: Tensor,
    pub d_input: Tensor,
}

/// Backward pass of [`crate::tensor::conv2d`] plus bias.
pub fn conv2d_backward_full(
    x: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
    stride: usize,
    padding: usize,
) -> ConvGrads {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _cink, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (d_out.shape()[1], d_out.shape()[2]);
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[cout]);
    let mut d_input = Tensor::zeros(x.shape());
    for oc in 0..cout {
        let mut bias_acc = 0.0;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = d_out.data()[(oc * ho + oy) * wo + ox];
                if g == 0.0 {
                    continue;
                }
                bias_acc += g;
                for ic in 0..cin {
                    let kbase = (oc * cin + ic) * kh * kw;
                    let xbase = ic * h * w;
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
                            let xi = xbase + iy as usize * w + ix as usize;
                            d_weight.data_mut()[kbase + ky * kw + kx] += g * x.data()[xi];
                            d_input.data_mut()[xi] += g * weight.data()[kbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
        d_bias.data_mut()[oc] = bias_acc;
    }
    ConvGrads {
        d_weight,
        d_bias,
        d_input,
    }
}

fn conv2d_backward(x: &Tensor, weight: &Tensor, d_out: &Tensor, padding: usize) -> ConvGrads {
    conv2d_backward_full(x, weight, d_out, 1, padding)
}

fn silu_backward(pre: &Tensor, d_out: &Tensor) -> Tensor {
    let mut g = d_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(pre.data()) {
        let s = 1.0 / (1.0 + (-x).exp());
        *gv *= s * (1.0 + x * (1.0 - s));
    }
    g
}

/// d(bilinear_sample)/d(offsets): accumulate output gradients into the two
/// offset channels. The derivative is zero where the sample coordinate is
/// clamped at the border.
fn bilinear_sample_backward_offsets(x: &Tensor, offsets: &Tensor, d_out: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut d_off = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for xp in 0..w {
            let p = y * w + xp;
            let dy = offsets.data()[p];
            let dx = offsets.data()[hw + p];
            let ry = y as f64 + dy;
            let rx = xp as f64 + dx;
            let y_active = ry > 0.0 && ry < (h - 1) as f64;
            let x_active = rx > 0.0 && rx < (w - 1) as f64;
            let sy = ry.clamp(0.0, (h - 1) as f64);
            let sx = rx.clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let mut gy = 0.0;
            let mut gx = 0.0;
            for ch in 0..c {
                let base = ch * hw;
                let v00 = x.data()[base + y0 * w + x0];
                let v01 = x.data()[base + y0 * w + x1];
                let v10 = x.data()[base + y1 * w + x0];
                let v11 = x.data()[base + y1 * w + x1];
                let g = d_out.data()[base + p];
                if g == 0.0 {
                    continue;
                }
                gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            }
            if y_active {
                d_off.data_mut()[p] = gy;
            }
            if x_active {
                d_off.data_mut()[hw + p] = gx;
            }
        }
    }
    d_off
}

/// Delta rule for a stride-1 conv used as an output layer: gradients of the
/// loss with respect to the conv's weight and bias, from the layer input and
/// the loss gradient at the conv output.
pub fn conv_output_grads(
    input: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
    padding: usize,
) -> (Tensor, Tensor) {
    let g = conv2d_backward(input, weight, d_out, padding);
    (g.d_weight, g.d_bias)
}

/// Cached forward through the offset head: conv0 -> silu -> conv1.
struct HeadCache {
    pre: Tensor,
    act: Tensor,
    offsets: Tensor,
}

fn head_forward(store: &ParamStore, prefix: &str, q_cat: &Tensor) -> Result<HeadCache> {
    let w0 = store.get(&format!("{prefix}.conv0.weight"))?;
    let b0 = store.get(&format!("{prefix}.conv0.bias"))?;
    let w1 = store.get(&format!("{prefix}.conv1.weight"))?;
    let b1 = store.get(&format!("{prefix}.conv1.bias"))?;
    let mut pre = conv2d(q_cat, w0, 1, 1)?;
    add_bias(&mut pre, b0);
    let act = pre.map(silu_scalar);
    let mut offsets = conv2d(&act, w1, 1, 1)?;
    add_bias(&mut offsets, b1);
    Ok(HeadCache { pre, act, offsets })
}

fn add_bias(t: &mut Tensor, bias: &Tensor) {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    for ch in 0..c {
        let b = bias.data()[ch];
        for p in 0..h * w {
            t.data_mut()[ch * h * w + p] += b;
        }
    }
}

/// Gradients with respect to the four offset-head parameters, keyed by full
/// parameter name.
pub type HeadGrads = BTreeMap<String, Tensor>;

fn head_backward(
    store: &ParamStore,
    prefix: &str,
    q_cat: &Tensor,
    cache: &HeadCache,
    d_offsets: &Tensor,
    grads: &mut HeadGrads,
) -> Result<()> {
    let w0 = store.get(&format!("{prefix}.conv0.weight"))?;
    let w1 = store.get(&format!("{prefix}.conv1.weight"))?;
    let g1 = conv2d_backward(&cache.act, w1, d_offsets, 1);
    let d_act = silu_backward(&cache.pre, &g1.d_input);
    let g0 = conv2d_backward(q_cat, w0, &d_act, 1);
    accumulate(grads, &format!("{prefix}.conv1.weight"), g1.d_weight)?;
    accumulate(grads, &format!("{prefix}.conv1.bias"), g1.d_bias)?;
    accumulate(grads, &format!("{prefix}.conv0.weight"), g0.d_weight)?;
    accumulate(grads, &format!("{prefix}.conv0.bias"), g0.d_bias)?;
    Ok(())
}

fn accumulate(grads: &mut HeadGrads, name: &str, g: Tensor) -> Result<()> {
    match grads.get_mut(name) {
        Some(t) => t.add_assign(&g),
        None => {
            grads.insert(name.to_string(), g);
            Ok(())
        }
    }
}

fn scale_grads(grads: &mut HeadGrads, s: f64) {
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= s;
        }
    }
}

/// Offset supervision at one block: mean over frames of the masked MSE
/// between predicted offsets and the keypoint flow, with analytic gradients
/// for the head parameters.
pub fn offset_loss_and_grad(
    store: &ParamStore,
    prefix: &str,
    q_cats: &[Tensor],
    deltas: &[Tensor],
    want_grad: bool,
) -> Result<(f64, Option<HeadGrads>)> {
    if q_cats.len() != deltas.len() {
        return Err(Error::Dim("frame count mismatch".into()));
    }
    let n = q_cats.len() as f64;
    let mut loss = 0.0;
    let mut grads: HeadGrads = BTreeMap::new();
    for (q_cat, delta) in q_cats.iter().zip(deltas.iter()) {
        let cache = head_forward(store, prefix, q_cat)?;
        let mask = offset_mask(delta)?;
        loss += masked_mse(&cache.offsets, delta, &mask)?;
        if want_grad {
            let d_off = d_masked_mse(&cache.offsets, delta, &mask);
            head_backward(store, prefix, q_cat, &cache, &d_off, &mut grads)?;
        }
    }
    loss /= n;
    if want_grad {
        scale_grads(&mut grads, 1.0 / n);
        Ok((loss, Some(grads)))
    } else {
        Ok((loss, None))
    }
}

/// Composite path: offsets from the head resample the base features, and the
/// masked MSE compares the resampled features to a target. Gradients flow
/// through the bilinear sampler into the head parameters.
pub fn resample_loss_and_grad(
    store: &ParamStore,
    prefix: &str,
    q_cats: &[Tensor],
    bases: &[Tensor],
    targets: &[Tensor],
    masks: &[Vec<bool>],
    want_grad: bool,
) -> Result<(f64, Option<HeadGrads>)> {
    if q_cats.len() != bases.len() || bases.len() != targets.len() || masks.len() != bases.len() {
        return Err(Error::Dim("frame count mismatch".into()));
    }
    let n = q_cats.len() as f64;
    let mut loss = 0.0;
    let mut grads: HeadGrads = BTreeMap::new();
    for i in 0..q_cats.len() {
        let cache = head_forward(store, prefix, &q_cats[i])?;
        let sampled = bilinear_sample(&bases[i], &cache.offsets)?;
        loss += masked_mse(&sampled, &targets[i], &masks[i])?;
        if want_grad {
            let d_sampled = d_masked_mse(&sampled, &targets[i], &masks[i]);
            let d_off = bilinear_sample_backward_offsets(&bases[i], &cache.offsets, &d_sampled);
            head_backward(store, prefix, &q_cats[i], &cache, &d_off, &mut grads)?;
        }
    }
    loss /= n;
    if want_grad {
        scale_grads(&mut grads, 1.0 / n);
        Ok((loss, Some(grads)))
    } else {
        Ok((loss, None))
    }
}

/// Flatten a gradient map into the order of `names` (missing entries zero).
pub fn flatten_grads(store: &ParamStore, names: &[String], grads: &HeadGrads) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(store.total_len(names)?);
    for name in names {
        match grads.get(name) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, store.get(name)?.len())),
        }
    }
    Ok(out)
}
