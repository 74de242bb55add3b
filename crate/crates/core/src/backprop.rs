//! Hand-derived reverse-mode gradients for the stage-1 training path:
//! denoising loss -> U-Net (without FTA) -> prototypes -> pose-aware
//! selector -> pose encoder. The reference encoder and the offset path are
//! excluded; the former trains by directional probes, the latter has its own
//! dedicated gradients.
//!
//! Every op caches exactly what its backward needs; the cached forward is
//! verified against the plain forward, and the gradients against central
//! finite differences, in this module's tests and the integration suite.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fpi::DenoiserPlan;
use crate::gradpath::conv2d_backward_full;
use crate::layers::{norm_groups, ConvBlockSpec, GN_EPS};
use crate::modelcfg::{ModelConfig, DOWN_BLOCKS, MID_BLOCKS, NUM_LEVELS, UP_BLOCKS};
use crate::params::ParamStore;
use crate::ppa::PrototypeStack;
use crate::refenc::RefPyramid;
use crate::tensor::{
    avg_pool_2x2, bilinear_resize, concat0, conv2d, from_tokens, matmul, sinusoidal_embed,
    sinusoidal_pos_enc, softmax, to_tokens, Tensor,
};

/// Accumulating gradient map keyed by parameter name.
#[derive(Debug, Default)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, g: Tensor) {
        match self.map.get_mut(name) {
            Some(t) => {
                t.add_assign(&g).expect("gradient shapes agree");
            }
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn merge_scaled(&mut self, other: &Grads, s: f64) {
        for (k, v) in other.map.iter() {
            self.add(k, v.scale(s));
        }
    }
}

// ---------------------------------------------------------------------------
// Primitive ops with caches
// ---------------------------------------------------------------------------

struct LinCache {
    x: Tensor,
}

fn lin_fwd(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<(Tensor, LinCache)> {
    let y = crate::layers::linear_forward(store, prefix, x)?;
    Ok((y, LinCache { x: x.clone() }))
}

fn lin_bwd(
    store: &ParamStore,
    prefix: &str,
    cache: &LinCache,
    d_y: &Tensor,
    grads: &mut Grads,
) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let (n, d_in) = (cache.x.shape()[0], cache.x.shape()[1]);
    let d_out = w.shape()[1];
    // dW = xT dy, db = column sums of dy, dx = dy WT.
    let mut d_w = Tensor::zeros(&[d_in, d_out]);
    for i in 0..n {
        for a in 0..d_in {
            let xv = cache.x.data()[i * d_in + a];
            if xv == 0.0 {
                continue;
            }
            for b in 0..d_out {
                d_w.data_mut()[a * d_out + b] += xv * d_y.data()[i * d_out + b];
            }
        }
    }
    let mut d_b = Tensor::zeros(&[d_out]);
    for i in 0..n {
        for b in 0..d_out {
            d_b.data_mut()[b] += d_y.data()[i * d_out + b];
        }
    }
    let mut d_x = Tensor::zeros(cache.x.shape());
    for i in 0..n {
        for a in 0..d_in {
            let mut acc = 0.0;
            for b in 0..d_out {
                acc += d_y.data()[i * d_out + b] * w.data()[a * d_out + b];
            }
            d_x.data_mut()[i * d_in + a] = acc;
        }
    }
    grads.add(&format!("{prefix}.weight"), d_w);
    grads.add(&format!("{prefix}.bias"), d_b);
    Ok(d_x)
}

struct MhaCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmax weights per head, each `[n, m]`.
    attn: Vec<Tensor>,
    heads: usize,
}

fn mha_fwd(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, MhaCache)> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    if d % heads != 0 {
        return Err(Error::Config("heads must divide dim".into()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d]);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut s = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += q.data()[i * d + off + t] * k.data()[j * d + off + t];
                }
                s.data_mut()[i * m + j] = acc * scale;
            }
        }
        let a = softmax(&s, 1)?;
        for i in 0..n {
            for j in 0..m {
                let w = a.data()[i * m + j];
                for t in 0..dh {
                    out.data_mut()[i * d + off + t] += w * v.data()[j * d + off + t];
                }
            }
        }
        attn.push(a);
    }
    Ok((
        out,
        MhaCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            attn,
            heads,
        },
    ))
}

fn mha_bwd(cache: &MhaCache, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (cache.q.shape()[0], cache.q.shape()[1]);
    let m = cache.k.shape()[0];
    let heads = cache.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_q = Tensor::zeros(&[n, d]);
    let mut d_k = Tensor::zeros(&[m, d]);
    let mut d_v = Tensor::zeros(&[m, d]);
    for h in 0..heads {
        let off = h * dh;
        let a = &cache.attn[h];
        // dV = AT dO; dA = dO VT.
        let mut d_a = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let w = a.data()[i * m + j];
                let mut da = 0.0;
                for t in 0..dh {
                    let g = d_out.data()[i * d + off + t];
                    d_v.data_mut()[j * d + off + t] += w * g;
                    da += g * cache.v.data()[j * d + off + t];
                }
                d_a.data_mut()[i * m + j] = da;
            }
        }
        // dS = A . (dA - rowsum(dA . A)).
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..m {
                dot += d_a.data()[i * m + j] * a.data()[i * m + j];
            }
            for j in 0..m {
                let ds = a.data()[i * m + j] * (d_a.data()[i * m + j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    d_q.data_mut()[i * d + off + t] += ds * cache.k.data()[j * d + off + t];
                    d_k.data_mut()[j * d + off + t] += ds * cache.q.data()[i * d + off + t];
                }
            }
        }
    }
    (d_q, d_k, d_v)
}

struct GnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    groups: usize,
}

fn gn_fwd(store: &ParamStore, prefix: &str, x: &Tensor, groups: usize) -> Result<(Tensor, GnCache)> {
    let gamma = store.get(&format!("{prefix}.gamma"))?;
    let beta = store.get(&format!("{prefix}.beta"))?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let per = c / groups;
    let hw = h * w;
    let mut x_hat = x.clone();
    let mut inv_std = Vec::with_capacity(groups);
    let mut out = x.clone();
    for g in 0..groups {
        let lo = g * per * hw;
        let hi = (g + 1) * per * hw;
        let n = (hi - lo) as f64;
        let mut mean = 0.0;
        for v in &x.data()[lo..hi] {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for v in &x.data()[lo..hi] {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let is = 1.0 / (var + GN_EPS).sqrt();
        inv_std.push(is);
        for ch in g * per..(g + 1) * per {
            for p in 0..hw {
                let i = ch * hw + p;
                let xh = (x.data()[i] - mean) * is;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = xh * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    Ok((
        out,
        GnCache {
            x_hat,
            inv_std,
            groups,
        },
    ))
}

fn gn_bwd(
    store: &ParamStore,
    prefix: &str,
    cache: &GnCache,
    d_y: &Tensor,
    grads: &mut Grads,
) -> Result<Tensor> {
    let gamma = store.get(&format!("{prefix}.gamma"))?;
    let (c, h, w) = (d_y.shape()[0], d_y.shape()[1], d_y.shape()[2]);
    let groups = cache.groups;
    let per = c / groups;
    let hw = h * w;
    let mut d_gamma = Tensor::zeros(&[c]);
    let mut d_beta = Tensor::zeros(&[c]);
    let mut d_x = Tensor::zeros(d_y.shape());
    for g in 0..groups {
        let n = (per * hw) as f64;
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for ch in g * per..(g + 1) * per {
            let ga = gamma.data()[ch];
            for p in 0..hw {
                let i = ch * hw + p;
                let dy = d_y.data()[i];
                let xh = cache.x_hat.data()[i];
                d_gamma.data_mut()[ch] += dy * xh;
                d_beta.data_mut()[ch] += dy;
                let dxh = dy * ga;
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh;
            }
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        let is = cache.inv_std[g];
        for ch in g * per..(g + 1) * per {
            let ga = gamma.data()[ch];
            for p in 0..hw {
                let i = ch * hw + p;
                let dxh = d_y.data()[i] * ga;
                d_x.data_mut()[i] =
                    is * (dxh - mean_dxh - cache.x_hat.data()[i] * mean_dxh_xh);
            }
        }
    }
    grads.add(&format!("{prefix}.gamma"), d_gamma);
    grads.add(&format!("{prefix}.beta"), d_beta);
    Ok(d_x)
}

struct ConvCache {
    x: Tensor,
    stride: usize,
    padding: usize,
}

fn convp_fwd(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvCache)> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let mut y = conv2d(x, w, stride, padding)?;
    let (c, h, wd) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    for ch in 0..c {
        let bias = b.data()[ch];
        for p in 0..h * wd {
            y.data_mut()[ch * h * wd + p] += bias;
        }
    }
    Ok((
        y,
        ConvCache {
            x: x.clone(),
            stride,
            padding,
        },
    ))
}

fn convp_bwd(
    store: &ParamStore,
    prefix: &str,
    cache: &ConvCache,
    d_y: &Tensor,
    grads: &mut Grads,
) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let g = conv2d_backward_full(&cache.x, w, d_y, cache.stride, cache.padding);
    grads.add(&format!("{prefix}.weight"), g.d_weight);
    grads.add(&format!("{prefix}.bias"), g.d_bias);
    Ok(g.d_input)
}

fn silu_apply(x: &Tensor) -> Tensor {
    x.map(crate::tensor::silu_scalar)
}

fn silu_bwd(pre: &Tensor, d_y: &Tensor) -> Tensor {
    let mut g = d_y.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(pre.data()) {
        let s = 1.0 / (1.0 + (-x).exp());
        *gv *= s * (1.0 + x * (1.0 - s));
    }
    g
}

fn bilinear_resize_bwd(d_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, oh, ow) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let mut d_in = Tensor::zeros(&[c, in_h, in_w]);
    if oh == in_h && ow == in_w {
        return d_out.clone();
    }
    let sy = in_h as f64 / oh as f64;
    let sx = in_w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let g = d_out.data()[(ch * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                let base = ch * in_h * in_w;
                d_in.data_mut()[base + y0 * in_w + x0] += g * (1.0 - wy) * (1.0 - wx);
                d_in.data_mut()[base + y0 * in_w + x1] += g * (1.0 - wy) * wx;
                d_in.data_mut()[base + y1 * in_w + x0] += g * wy * (1.0 - wx);
                d_in.data_mut()[base + y1 * in_w + x1] += g * wy * wx;
            }
        }
    }
    d_in
}

fn avg_pool_2x2_bwd(d_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, oh, ow) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let mut d_in = Tensor::zeros(&[c, in_h, in_w]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * d_out.data()[(ch * oh + y) * ow + x];
                let base = ch * in_h * in_w;
                d_in.data_mut()[base + 2 * y * in_w + 2 * x] += g;
                d_in.data_mut()[base + 2 * y * in_w + 2 * x + 1] += g;
                d_in.data_mut()[base + (2 * y + 1) * in_w + 2 * x] += g;
                d_in.data_mut()[base + (2 * y + 1) * in_w + 2 * x + 1] += g;
            }
        }
    }
    d_in
}

// ---------------------------------------------------------------------------
// Composite layers
// ---------------------------------------------------------------------------

struct AttnCache {
    q: LinCache,
    k: LinCache,
    v: LinCache,
    out: LinCache,
    mha: MhaCache,
}

/// Residual attention over tokens: `x + out(MHA(q(x), k(kv), v(kv)))`.
fn attn_fwd(
    store: &ParamStore,
    prefix: &str,
    x_tokens: &Tensor,
    kv_tokens: &Tensor,
    heads: usize,
) -> Result<(Tensor, AttnCache)> {
    attn_fwd_pos(store, prefix, x_tokens, kv_tokens, heads, None, None)
}

/// Positional encodings (constants) go into the q/k inputs only, so the
/// backward just forwards gradients to the raw tokens.
fn attn_fwd_pos(
    store: &ParamStore,
    prefix: &str,
    x_tokens: &Tensor,
    kv_tokens: &Tensor,
    heads: usize,
    pos_q: Option<&Tensor>,
    pos_kv: Option<&Tensor>,
) -> Result<(Tensor, AttnCache)> {
    let q_in = match pos_q {
        Some(p) => x_tokens.add(p)?,
        None => x_tokens.clone(),
    };
    let k_in = match pos_kv {
        Some(p) => kv_tokens.add(p)?,
        None => kv_tokens.clone(),
    };
    let (q, qc) = lin_fwd(store, &format!("{prefix}.q"), &q_in)?;
    let (k, kc) = lin_fwd(store, &format!("{prefix}.k"), &k_in)?;
    let (v, vc) = lin_fwd(store, &format!("{prefix}.v"), kv_tokens)?;
    let (att, mha) = mha_fwd(&q, &k, &v, heads)?;
    let (out, oc) = lin_fwd(store, &format!("{prefix}.out"), &att)?;
    Ok((
        x_tokens.add(&out)?,
        AttnCache {
            q: qc,
            k: kc,
            v: vc,
            out: oc,
            mha,
        },
    ))
}

/// Returns (d_x_tokens, d_kv_tokens).
fn attn_bwd(
    store: &ParamStore,
    prefix: &str,
    cache: &AttnCache,
    d_y: &Tensor,
    grads: &mut Grads,
) -> Result<(Tensor, Tensor)> {
    let d_att = lin_bwd(store, &format!("{prefix}.out"), &cache.out, d_y, grads)?;
    let (d_q, d_k, d_v) = mha_bwd(&cache.mha, &d_att);
    let mut d_x = lin_bwd(store, &format!("{prefix}.q"), &cache.q, &d_q, grads)?;
    let d_kv_k = lin_bwd(store, &format!("{prefix}.k"), &cache.k, &d_k, grads)?;
    let d_kv_v = lin_bwd(store, &format!("{prefix}.v"), &cache.v, &d_v, grads)?;
    d_x.add_assign(d_y)?; // residual
    Ok((d_x, d_kv_k.add(&d_kv_v)?))
}

struct ConvBlockCache {
    gn0: GnCache,
    act0_pre: Tensor,
    conv0: ConvCache,
    gn1: GnCache,
    act1_pre: Tensor,
    conv1: ConvCache,
    skip: Option<ConvCache>,
    spec: ConvBlockSpec,
}

fn conv_block_fwd(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    spec: ConvBlockSpec,
    t_shift: Option<&Tensor>,
) -> Result<(Tensor, ConvBlockCache)> {
    let g0 = norm_groups(spec.c_in, spec.groups);
    let (n0, gn0) = gn_fwd(store, &format!("{prefix}.gn0"), x, g0)?;
    let a0 = silu_apply(&n0);
    let (mut h, conv0) = convp_fwd(store, &format!("{prefix}.conv0"), &a0, 1, 1)?;
    if let Some(shift) = t_shift {
        let (c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        for ch in 0..c {
            let s = shift.data()[ch];
            for p in 0..hh * ww {
                h.data_mut()[ch * hh * ww + p] += s;
            }
        }
    }
    let g1 = norm_groups(spec.c_out, spec.groups);
    let (n1, gn1) = gn_fwd(store, &format!("{prefix}.gn1"), &h, g1)?;
    let a1 = silu_apply(&n1);
    let (h2, conv1) = convp_fwd(store, &format!("{prefix}.conv1"), &a1, 1, 1)?;
    let (y, skip) = if spec.c_in != spec.c_out {
        let (s, sc) = convp_fwd(store, &format!("{prefix}.skip"), x, 1, 0)?;
        (h2.add(&s)?, Some(sc))
    } else {
        (h2.add(x)?, None)
    };
    Ok((
        y,
        ConvBlockCache {
            gn0,
            act0_pre: n0,
            conv0,
            gn1,
            act1_pre: n1,
            conv1,
            skip,
            spec,
        },
    ))
}

/// Returns (d_x, d_t_shift).
fn conv_block_bwd(
    store: &ParamStore,
    prefix: &str,
    cache: &ConvBlockCache,
    d_y: &Tensor,
    grads: &mut Grads,
) -> Result<(Tensor, Tensor)> {
    let d_a1 = convp_bwd(store, &format!("{prefix}.conv1"), &cache.conv1, d_y, grads)?;
    let d_n1 = silu_bwd(&cache.act1_pre, &d_a1);
    let d_h = gn_bwd(store, &format!("{prefix}.gn1"), &cache.gn1, &d_n1, grads)?;
    // Timestep shift was broadcast over space.
    let (c, hh, ww) = (d_h.shape()[0], d_h.shape()[1], d_h.shape()[2]);
    let mut d_shift = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut acc = 0.0;
        for p in 0..hh * ww {
            acc += d_h.data()[ch * hh * ww + p];
        }
        d_shift.data_mut()[ch] = acc;
    }
    let d_a0 = convp_bwd(store, &format!("{prefix}.conv0"), &cache.conv0, &d_h, grads)?;
    let d_n0 = silu_bwd(&cache.act0_pre, &d_a0);
    let mut d_x = gn_bwd(store, &format!("{prefix}.gn0"), &cache.gn0, &d_n0, grads)?;
    match &cache.skip {
        Some(sc) => {
            let d_skip = convp_bwd(store, &format!("{prefix}.skip"), sc, d_y, grads)?;
            d_x.add_assign(&d_skip)?;
        }
        None => {
            d_x.add_assign(d_y)?;
        }
    }
    let _ = &cache.spec;
    Ok((d_x, d_shift))
}

struct TemporalCellCache {
    tokens: Tensor,
    q: LinCache,
    k: LinCache,
    v: LinCache,
    out: LinCache,
    mha: MhaCache,
}

/// Single-frame temporal attention (stage-1 case): one token per cell.
struct TemporalCache {
    cells: Vec<TemporalCellCache>,
    h: usize,
    w: usize,
}

fn temporal_fwd_single(
    store: &ParamStore,
    prefix: &str,
    frame: &Tensor,
    heads: usize,
) -> Result<(Tensor, TemporalCache)> {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let hw = h * w;
    let pos = sinusoidal_embed(0.0, c)?;
    let mut out = frame.clone();
    let mut cells = Vec::with_capacity(hw);
    for p in 0..hw {
        let mut tokens = Tensor::zeros(&[1, c]);
        let mut tokens_pos = Tensor::zeros(&[1, c]);
        for ch in 0..c {
            let v = frame.data()[ch * hw + p];
            tokens.data_mut()[ch] = v;
            tokens_pos.data_mut()[ch] = v + pos.data()[ch];
        }
        let (q, qc) = lin_fwd(store, &format!("{prefix}.q"), &tokens_pos)?;
        let (k, kc) = lin_fwd(store, &format!("{prefix}.k"), &tokens_pos)?;
        let (v, vc) = lin_fwd(store, &format!("{prefix}.v"), &tokens)?;
        let (att, mha) = mha_fwd(&q, &k, &v, heads)?;
        let (proj, oc) = lin_fwd(store, &format!("{prefix}.out"), &att)?;
        for ch in 0..c {
            out.data_mut()[ch * hw + p] += proj.data()[ch];
        }
        cells.push(TemporalCellCache {
            tokens,
            q: qc,
            k: kc,
            v: vc,
            out: oc,
            mha,
        });
    }
    Ok((out, TemporalCache { cells, h, w }))
}

fn temporal_bwd_single(
    store: &ParamStore,
    prefix: &str,
    cache: &TemporalCache,
    d_y: &Tensor,
    grads: &mut Grads,
) -> Result<Tensor> {
    let (c, h, w) = (d_y.shape()[0], d_y.shape()[1], d_y.shape()[2]);
    debug_assert_eq!((h, w), (cache.h, cache.w));
    let hw = h * w;
    let mut d_frame = d_y.clone(); // residual path
    for (p, cell) in cache.cells.iter().enumerate() {
        let mut d_proj = Tensor::zeros(&[1, c]);
        for ch in 0..c {
            d_proj.data_mut()[ch] = d_y.data()[ch * hw + p];
        }
        let d_att = lin_bwd(store, &format!("{prefix}.out"), &cell.out, &d_proj, grads)?;
        let (d_q, d_k, d_v) = mha_bwd(&cell.mha, &d_att);
        let d_tp_q = lin_bwd(store, &format!("{prefix}.q"), &cell.q, &d_q, grads)?;
        let d_tp_k = lin_bwd(store, &format!("{prefix}.k"), &cell.k, &d_k, grads)?;
        let d_tok_v = lin_bwd(store, &format!("{prefix}.v"), &cell.v, &d_v, grads)?;
        // tokens_pos = tokens + const encoding.
        for ch in 0..c {
            d_frame.data_mut()[ch * hw + p] +=
                d_tp_q.data()[ch] + d_tp_k.data()[ch] + d_tok_v.data()[ch];
        }
        let _ = &cell.tokens;
    }
    Ok(d_frame)
}

// ---------------------------------------------------------------------------
// Denoiser (single frame, no FTA)
// ---------------------------------------------------------------------------

struct BlockCache {
    conv: ConvBlockCache,
    proto: AttnCache,
    proto_tokens_n: usize,
    sem: AttnCache,
    temporal: TemporalCache,
    t_proj: LinCache,
    level: usize,
    /// (h, w) the block ran at.
    size: (usize, usize),
    /// For up blocks: the resolution before the pre-concat resize.
    resized_from: Option<(usize, usize)>,
    /// For up blocks: channel count of the non-skip half of the concat.
    concat_prev_channels: usize,
}

struct HeadCacheB {
    gn: GnCache,
    act_pre: Tensor,
    conv: ConvCache,
}

struct DenoiserCache {
    blocks: Vec<BlockCache>,
    head: HeadCacheB,
    t_lin0: LinCache,
    t_lin1: LinCache,
    t_act_pre: Tensor,
    plan: DenoiserPlan,
}

/// Cached single-frame forward, mirroring the plain forward without FTA.
fn denoiser_fwd_cached(
    store: &ParamStore,
    cfg: &ModelConfig,
    frame: &Tensor,
    protos: &PrototypeStack,
    timestep: usize,
) -> Result<(Tensor, DenoiserCache)> {
    let plan = DenoiserPlan::for_latent(cfg, frame.shape()[1], frame.shape()[2]);
    let d_t = cfg.t_embed_dim;
    let e = sinusoidal_embed(timestep as f64, d_t)?.reshape(&[1, d_t])?;
    let (t0, t_lin0) = lin_fwd(store, "fpi.t_embed.lin0", &e)?;
    let t_act = silu_apply(&t0);
    let (t_emb_row, t_lin1) = lin_fwd(store, "fpi.t_embed.lin1", &t_act)?;

    let n_blocks = DOWN_BLOCKS + MID_BLOCKS + UP_BLOCKS;
    let mut state = frame.clone();
    let mut skips: Vec<Tensor> = Vec::new();
    let mut blocks = Vec::with_capacity(n_blocks);
    for block in 0..n_blocks {
        let level = plan.block_level(block);
        let (c_in, c_out) = plan.block_channels(block);
        let prefix = format!("fpi.block{block}");
        let mut resized_from = None;
        let mut concat_prev_channels = 0;
        if block >= DOWN_BLOCKS + MID_BLOCKS {
            let skip_idx = n_blocks - 1 - block;
            let skip = &skips[skip_idx];
            let (sh, sw) = (skip.shape()[1], skip.shape()[2]);
            let cur = if state.shape()[1] != sh || state.shape()[2] != sw {
                resized_from = Some((state.shape()[1], state.shape()[2]));
                bilinear_resize(&state, sh, sw)?
            } else {
                state.clone()
            };
            concat_prev_channels = cur.shape()[0];
            state = concat_channels2(&cur, skip)?;
        }
        let (t_shift, t_proj) = lin_fwd(store, &format!("{prefix}.t_proj"), &t_emb_row)?;
        let t_shift = t_shift.reshape(&[c_out])?;
        let spec = ConvBlockSpec {
            c_in,
            c_out,
            groups: cfg.groups,
        };
        let (z, conv) = conv_block_fwd(store, &format!("{prefix}.conv"), &state, spec, Some(&t_shift))?;
        let (h, w) = (z.shape()[1], z.shape()[2]);
        let lat_tokens = to_tokens(&z)?;
        let proto_tokens = to_tokens(&protos.fine[level])?;
        let kv = concat0(&[&lat_tokens, &proto_tokens])?;
        let pos = crate::layers::pos_enc_tokens(z.shape()[0], h, w)?;
        let pos_kv = concat0(&[&pos, &pos])?;
        let (zs_tokens, proto) = attn_fwd_pos(
            store,
            &format!("{prefix}.proto_attn"),
            &lat_tokens,
            &kv,
            cfg.heads,
            Some(&pos),
            Some(&pos_kv),
        )?;
        let g_row = Tensor::new(vec![1, protos.global.len()], protos.global.data().to_vec())?;
        let (zc_tokens, sem) = attn_fwd(store, &format!("{prefix}.sem_attn"), &zs_tokens, &g_row, cfg.heads)?;
        let zc = from_tokens(&zc_tokens, h, w)?;
        let (zt, temporal) = temporal_fwd_single(store, &format!("{prefix}.temporal"), &zc, cfg.heads)?;
        state = zt;
        blocks.push(BlockCache {
            conv,
            proto,
            proto_tokens_n: h * w,
            sem,
            temporal,
            t_proj,
            level,
            size: (h, w),
            resized_from,
            concat_prev_channels,
        });
        if block < DOWN_BLOCKS {
            skips.push(state.clone());
            if block < DOWN_BLOCKS - 1 && plan.downsample[block] {
                state = avg_pool_2x2(&state)?;
            }
        }
    }
    let groups = norm_groups(plan.level_channels[0], cfg.groups);
    let (hn, gn) = gn_fwd(store, "fpi.head.gn", &state, groups)?;
    let a = silu_apply(&hn);
    let (v, conv) = convp_fwd(store, "fpi.head.conv", &a, 1, 1)?;
    Ok((
        v,
        DenoiserCache {
            blocks,
            head: HeadCacheB {
                gn,
                act_pre: hn,
                conv,
            },
            t_lin0,
            t_lin1,
            t_act_pre: t0,
            plan,
        },
    ))
}

fn concat_channels2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, cb) = (a.shape()[0], b.shape()[0]);
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if b.shape()[1] != h || b.shape()[2] != w {
        return Err(Error::Dim("concat with mismatched spatial dims".into()));
    }
    let mut out = Tensor::zeros(&[ca + cb, h, w]);
    out.data_mut()[..ca * h * w].copy_from_slice(a.data());
    out.data_mut()[ca * h * w..].copy_from_slice(b.data());
    Ok(out)
}

/// Input-side gradients of the single-frame denoiser.
struct DenoiserInputGrads {
    d_input: Tensor,
    d_fine: Vec<Tensor>,
    d_global: Tensor,
}

fn denoiser_bwd(
    store: &ParamStore,
    cfg: &ModelConfig,
    cache: &DenoiserCache,
    protos: &PrototypeStack,
    d_v: &Tensor,
    grads: &mut Grads,
) -> Result<DenoiserInputGrads> {
    let plan = &cache.plan;
    let n_blocks = DOWN_BLOCKS + MID_BLOCKS + UP_BLOCKS;
    let mut d_fine: Vec<Tensor> = (0..NUM_LEVELS)
        .map(|l| Tensor::zeros(protos.fine[l].shape()))
        .collect();
    let mut d_global = Tensor::zeros(&[protos.global.len()]);
    let mut d_t_emb = Tensor::zeros(&[1, cfg.t_embed_dim]);

    // Head.
    let d_a = convp_bwd(store, "fpi.head.conv", &cache.head.conv, d_v, grads)?;
    let d_hn = silu_bwd(&cache.head.act_pre, &d_a);
    let mut d_state = gn_bwd(store, "fpi.head.gn", &cache.head.gn, &d_hn, grads)?;

    let mut d_skips: Vec<Option<Tensor>> = vec![None; DOWN_BLOCKS];
    for block in (0..n_blocks).rev() {
        let bc = &cache.blocks[block];
        let prefix = format!("fpi.block{block}");
        if block < DOWN_BLOCKS {
            // Forward: ops -> record skip -> maybe downsample.
            if block < DOWN_BLOCKS - 1 && plan.downsample[block] {
                d_state = avg_pool_2x2_bwd(&d_state, bc.size.0, bc.size.1);
            }
            if let Some(ds) = d_skips[block].take() {
                d_state.add_assign(&ds)?;
            }
        }
        // Reverse of: conv -> proto_attn -> sem_attn -> temporal.
        d_state = temporal_bwd_single(store, &format!("{prefix}.temporal"), &bc.temporal, &d_state, grads)?;
        let (h, w) = bc.size;
        let d_zc_tokens = to_tokens(&d_state)?;
        let (d_zs_tokens, d_g_row) =
            attn_bwd(store, &format!("{prefix}.sem_attn"), &bc.sem, &d_zc_tokens, grads)?;
        for (i, v) in d_g_row.data().iter().enumerate() {
            d_global.data_mut()[i] += v;
        }
        let (d_lat_tokens, d_kv) =
            attn_bwd(store, &format!("{prefix}.proto_attn"), &bc.proto, &d_zs_tokens, grads)?;
        // kv was [latent tokens; proto tokens].
        let nt = bc.proto_tokens_n;
        let c_tok = d_kv.shape()[1];
        let mut d_lat_total = d_lat_tokens;
        for i in 0..nt {
            for ch in 0..c_tok {
                *d_lat_total.at_mut(&[i, ch]) += d_kv.at(&[i, ch]);
            }
        }
        let d_proto_tokens = Tensor::from_fn(&[nt, c_tok], |idx| d_kv.at(&[nt + idx[0], idx[1]]));
        d_fine[bc.level].add_assign(&from_tokens(&d_proto_tokens, h, w)?)?;
        let d_z = from_tokens(&d_lat_total, h, w)?;
        let (d_block_in, d_shift) =
            conv_block_bwd(store, &format!("{prefix}.conv"), &bc.conv, &d_z, grads)?;
        let shift_len = d_shift.len();
        let d_shift_row = d_shift.reshape(&[1, shift_len])?;
        let d_t = lin_bwd(store, &format!("{prefix}.t_proj"), &bc.t_proj, &d_shift_row, grads)?;
        d_t_emb.add_assign(&d_t)?;

        if block >= DOWN_BLOCKS + MID_BLOCKS {
            // Forward: resize prev -> concat skip. Split, then un-resize.
            let skip_idx = n_blocks - 1 - block;
            let c_prev = bc.concat_prev_channels;
            let (bh, bw) = (d_block_in.shape()[1], d_block_in.shape()[2]);
            let c_total = d_block_in.shape()[0];
            let d_prev = Tensor::from_fn(&[c_prev, bh, bw], |i| d_block_in.at(&[i[0], i[1], i[2]]));
            let d_skip = Tensor::from_fn(&[c_total - c_prev, bh, bw], |i| {
                d_block_in.at(&[c_prev + i[0], i[1], i[2]])
            });
            match d_skips[skip_idx].as_mut() {
                Some(t) => t.add_assign(&d_skip)?,
                None => d_skips[skip_idx] = Some(d_skip),
            }
            d_state = match bc.resized_from {
                Some((ph, pw)) => bilinear_resize_bwd(&d_prev, ph, pw),
                None => d_prev,
            };
        } else {
            d_state = d_block_in;
        }
    }

    // Timestep embedding MLP.
    let d_t_act = lin_bwd(store, "fpi.t_embed.lin1", &cache.t_lin1, &d_t_emb, grads)?;
    let d_t0 = silu_bwd(&cache.t_act_pre, &d_t_act);
    let _ = lin_bwd(store, "fpi.t_embed.lin0", &cache.t_lin0, &d_t0, grads)?;

    Ok(DenoiserInputGrads {
        d_input: d_state,
        d_fine,
        d_global,
    })
}


// ---------------------------------------------------------------------------
// Reference encoder
// ---------------------------------------------------------------------------

struct RefBlockCache {
    conv: ConvBlockCache,
    self_attn: AttnCache,
    cross: AttnCache,
    size: (usize, usize),
    downsampled: bool,
}

struct RefEncCache {
    blocks: Vec<RefBlockCache>,
}

fn refenc_fwd_cached(
    store: &ParamStore,
    cfg: &ModelConfig,
    z_r: &Tensor,
    x_r: &Tensor,
) -> Result<(RefPyramid, RefEncCache)> {
    let chans = cfg.level_channels();
    let plan = cfg.downsample_plan();
    let mut pyramid = Vec::with_capacity(NUM_LEVELS);
    let mut blocks = Vec::with_capacity(NUM_LEVELS);
    let mut h = z_r.clone();
    let mut c_in = cfg.latent_channels();
    for (j, &c_out) in chans.iter().enumerate() {
        let prefix = format!("refenc.block{j}");
        let spec = ConvBlockSpec {
            c_in,
            c_out,
            groups: cfg.groups,
        };
        let (z, conv) = conv_block_fwd(store, &format!("{prefix}.conv"), &h, spec, None)?;
        let (bh, bw) = (z.shape()[1], z.shape()[2]);
        let tokens = to_tokens(&z)?;
        let pos = crate::layers::pos_enc_tokens(z.shape()[0], bh, bw)?;
        let (zs_tokens, self_attn) = attn_fwd_pos(
            store,
            &format!("{prefix}.self_attn"),
            &tokens,
            &tokens,
            cfg.heads,
            Some(&pos),
            Some(&pos),
        )?;
        let g_row = Tensor::new(vec![1, x_r.len()], x_r.data().to_vec())?;
        let (zc_tokens, cross) =
            attn_fwd(store, &format!("{prefix}.cross_attn"), &zs_tokens, &g_row, cfg.heads)?;
        let out = from_tokens(&zc_tokens, bh, bw)?;
        pyramid.push(out.clone());
        let downsampled = j + 1 < NUM_LEVELS && plan[j];
        if j + 1 < NUM_LEVELS {
            h = if downsampled { avg_pool_2x2(&out)? } else { out };
        }
        blocks.push(RefBlockCache {
            conv,
            self_attn,
            cross,
            size: (bh, bw),
            downsampled,
        });
        c_in = c_out;
    }
    Ok((pyramid, RefEncCache { blocks }))
}

/// Backward from gradients on every pyramid level; reference latents and
/// global features are constants.
fn refenc_bwd(
    store: &ParamStore,
    cache: &RefEncCache,
    d_levels: &[Tensor],
    grads: &mut Grads,
) -> Result<()> {
    let mut d_next_in: Option<Tensor> = None;
    for j in (0..NUM_LEVELS).rev() {
        let bc = &cache.blocks[j];
        let prefix = format!("refenc.block{j}");
        let (bh, bw) = bc.size;
        let mut d_out = d_levels[j].clone();
        if let Some(d_in) = d_next_in.take() {
            let d_chain = if bc.downsampled {
                avg_pool_2x2_bwd(&d_in, bh, bw)
            } else {
                d_in
            };
            d_out.add_assign(&d_chain)?;
        }
        let d_zc_tokens = to_tokens(&d_out)?;
        let (d_zs_tokens, _d_g) =
            attn_bwd(store, &format!("{prefix}.cross_attn"), &bc.cross, &d_zc_tokens, grads)?;
        let (d_tok, d_kv) =
            attn_bwd(store, &format!("{prefix}.self_attn"), &bc.self_attn, &d_zs_tokens, grads)?;
        let d_z = from_tokens(&d_tok.add(&d_kv)?, bh, bw)?;
        let (d_in, _d_shift) =
            conv_block_bwd(store, &format!("{prefix}.conv"), &bc.conv, &d_z, grads)?;
        d_next_in = Some(d_in);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Selector + aggregation
// ---------------------------------------------------------------------------

struct SelectorCache {
    gn_q: GnCache,
    lin_q: LinCache,
    per_ref: Vec<(GnCache, LinCache)>,
    q: Tensor,
    keys: Tensor,
    attn: Tensor,
    /// Raw pooled mass per reference cell before renormalization.
    raw: Vec<f64>,
    map: Tensor,
    scores: Vec<f64>,
    dims: (usize, usize, usize), // n_refs, h, w
}

fn selector_fwd_cached(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_p: &Tensor,
    x_rp: &[Tensor],
) -> Result<(crate::ppa::AggregationMap, SelectorCache)> {
    let (c, h, w) = (x_p.shape()[0], x_p.shape()[1], x_p.shape()[2]);
    let n_refs = x_rp.len();
    let hw = h * w;
    let pos = sinusoidal_pos_enc(h, w, c)?;
    let groups = norm_groups(c, cfg.groups);

    let with_pos_q = x_p.add(&pos)?;
    let (nq, gn_q) = gn_fwd(store, "ppa.selector.q_norm", &with_pos_q, groups)?;
    let (q, lin_q) = lin_fwd(store, "ppa.selector.q_proj", &to_tokens(&nq)?)?;

    let mut per_ref = Vec::with_capacity(n_refs);
    let mut key_rows = Vec::with_capacity(n_refs);
    for r in x_rp {
        let with_pos = r.add(&pos)?;
        let (nk, gn_k) = gn_fwd(store, "ppa.selector.k_norm", &with_pos, groups)?;
        let (k, lin_k) = lin_fwd(store, "ppa.selector.k_proj", &to_tokens(&nk)?)?;
        key_rows.push(k.clone());
        per_ref.push((gn_k, lin_k));
    }
    let keys = concat0(&key_rows.iter().collect::<Vec<_>>())?;
    let scale = 1.0 / (cfg.selector_dim as f64).sqrt();
    let mut logits = matmul(&q, &transpose2(&keys))?;
    for v in logits.data_mut() {
        *v *= scale;
    }
    let attn = softmax(&logits, 1)?;

    let mut raw = vec![0.0f64; n_refs * hw];
    for qi in 0..hw {
        for kj in 0..n_refs * hw {
            raw[kj] += attn.data()[qi * n_refs * hw + kj];
        }
    }
    let inv_q = 1.0 / hw as f64;
    for v in &mut raw {
        *v *= inv_q;
    }
    let mut map = Tensor::zeros(&[n_refs, h, w]);
    for p in 0..hw {
        let mut total = 0.0;
        for k in 0..n_refs {
            total += raw[k * hw + p];
        }
        for k in 0..n_refs {
            map.data_mut()[k * hw + p] = raw[k * hw + p] / total;
        }
    }
    let mut scores: Vec<f64> = (0..n_refs)
        .map(|k| map.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() * inv_q)
        .collect();
    let total: f64 = scores.iter().sum();
    for v in &mut scores {
        *v /= total;
    }
    let agg = crate::ppa::AggregationMap {
        map: map.clone(),
        scores: scores.clone(),
    };
    Ok((
        agg,
        SelectorCache {
            gn_q,
            lin_q,
            per_ref,
            q,
            keys,
            attn,
            raw,
            map,
            scores,
            dims: (n_refs, h, w),
        },
    ))
}

fn transpose2(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(&[c, r], |i| m.at(&[i[1], i[0]]))
}

/// Backward of the selector from gradients on the normalized map and the
/// pooled scores. Returns (d_x_p, d_x_rp per reference).
fn selector_bwd(
    store: &ParamStore,
    cfg: &ModelConfig,
    cache: &SelectorCache,
    d_map: &Tensor,
    d_scores: &[f64],
    grads: &mut Grads,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (n_refs, h, w) = cache.dims;
    let hw = h * w;
    let inv_q = 1.0 / hw as f64;

    // scores = t / sum(t), t_k = mean_p map[k, p].
    let t_total: f64 = {
        let t: Vec<f64> = (0..n_refs)
            .map(|k| cache.map.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() * inv_q)
            .collect();
        t.iter().sum()
    };
    let dot: f64 = d_scores
        .iter()
        .zip(cache.scores.iter())
        .map(|(d, s)| d * s)
        .sum();
    let mut d_map_total = d_map.clone();
    for k in 0..n_refs {
        let d_t = (d_scores[k] - dot) / t_total;
        for p in 0..hw {
            d_map_total.data_mut()[k * hw + p] += d_t * inv_q;
        }
    }

    // map[k,p] = raw[k,p] / R_p.
    let mut d_raw = vec![0.0f64; n_refs * hw];
    for p in 0..hw {
        let r_p: f64 = (0..n_refs).map(|k| cache.raw[k * hw + p]).sum();
        let mut dot = 0.0;
        for k in 0..n_refs {
            dot += d_map_total.data()[k * hw + p] * cache.map.data()[k * hw + p];
        }
        for k in 0..n_refs {
            d_raw[k * hw + p] = (d_map_total.data()[k * hw + p] - dot) / r_p;
        }
    }

    // raw[kj] = mean over queries of attn[:, kj].
    let mut d_attn = Tensor::zeros(&[hw, n_refs * hw]);
    for qi in 0..hw {
        for kj in 0..n_refs * hw {
            d_attn.data_mut()[qi * n_refs * hw + kj] = d_raw[kj] * inv_q;
        }
    }

    // Softmax rows.
    let m = n_refs * hw;
    let mut d_logits = Tensor::zeros(&[hw, m]);
    for i in 0..hw {
        let mut dot = 0.0;
        for j in 0..m {
            dot += d_attn.data()[i * m + j] * cache.attn.data()[i * m + j];
        }
        for j in 0..m {
            d_logits.data_mut()[i * m + j] =
                cache.attn.data()[i * m + j] * (d_attn.data()[i * m + j] - dot);
        }
    }
    let scale = 1.0 / (cfg.selector_dim as f64).sqrt();
    for v in d_logits.data_mut() {
        *v *= scale;
    }

    // logits = q keysT.
    let d_q = matmul(&d_logits, &cache.keys)?;
    let d_keys = matmul(&transpose2(&d_logits), &cache.q)?;

    // Query path.
    let d_nq_tokens = lin_bwd(store, "ppa.selector.q_proj", &cache.lin_q, &d_q, grads)?;
    let d_nq = from_tokens(&d_nq_tokens, h, w)?;
    let d_xp = gn_bwd(store, "ppa.selector.q_norm", &cache.gn_q, &d_nq, grads)?;

    // Key paths (shared parameters accumulate across references).
    let mut d_xrp = Vec::with_capacity(n_refs);
    for (r, (gn_k, lin_k)) in cache.per_ref.iter().enumerate() {
        let d_k_r = Tensor::from_fn(&[hw, cache.q.shape()[1]], |i| {
            d_keys.at(&[r * hw + i[0], i[1]])
        });
        let d_nk_tokens = lin_bwd(store, "ppa.selector.k_proj", lin_k, &d_k_r, grads)?;
        let d_nk = from_tokens(&d_nk_tokens, h, w)?;
        d_xrp.push(gn_bwd(store, "ppa.selector.k_norm", gn_k, &d_nk, grads)?);
    }
    Ok((d_xp, d_xrp))
}

/// Backward of fine aggregation: gradient on the normalized map plus the
/// gradient on each reference's features at this level.
fn aggregate_fine_bwd(
    map: &crate::ppa::AggregationMap,
    pyramids: &[RefPyramid],
    level: usize,
    d_proto: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let n_refs = pyramids.len();
    let (mh, mw) = (map.map.shape()[1], map.map.shape()[2]);
    if n_refs == 1 {
        // proto == feature exactly
        return Ok((Tensor::zeros(&[1, mh, mw]), vec![d_proto.clone()]));
    }
    let shape = pyramids[0][level].shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let weights = crate::ppa::resize_map(map, h, w)?;
    let mut d_weights = Tensor::zeros(&[n_refs, h, w]);
    let mut d_pyr = Vec::with_capacity(n_refs);
    for (k, pyr) in pyramids.iter().enumerate() {
        let mut d_feat = Tensor::zeros(shape);
        for p in 0..hw {
            let mut acc = 0.0;
            let wkp = weights.data()[k * hw + p];
            for ch in 0..c {
                let dp = d_proto.data()[ch * hw + p];
                acc += dp * pyr[level].data()[ch * hw + p];
                d_feat.data_mut()[ch * hw + p] = dp * wkp;
            }
            d_weights.data_mut()[k * hw + p] = acc;
        }
        d_pyr.push(d_feat);
    }
    Ok((bilinear_resize_bwd(&d_weights, mh, mw), d_pyr))
}

// ---------------------------------------------------------------------------
// Pose encoder
// ---------------------------------------------------------------------------

struct PoseEncCache {
    convs: Vec<ConvCache>,
    act_pres: Vec<Tensor>,
}

fn pose_enc_fwd(store: &ParamStore, pose_map: &Tensor) -> Result<(Tensor, PoseEncCache)> {
    let mut convs = Vec::with_capacity(4);
    let mut act_pres = Vec::with_capacity(3);
    let (h0, c0) = convp_fwd(store, "pose_enc.conv0", pose_map, 2, 1)?;
    convs.push(c0);
    act_pres.push(h0.clone());
    let (h1, c1) = convp_fwd(store, "pose_enc.conv1", &silu_apply(&h0), 2, 1)?;
    convs.push(c1);
    act_pres.push(h1.clone());
    let (h2, c2) = convp_fwd(store, "pose_enc.conv2", &silu_apply(&h1), 2, 1)?;
    convs.push(c2);
    act_pres.push(h2.clone());
    let (out, c3) = convp_fwd(store, "pose_enc.conv3", &silu_apply(&h2), 1, 1)?;
    convs.push(c3);
    Ok((out, PoseEncCache { convs, act_pres }))
}

fn pose_enc_bwd(
    store: &ParamStore,
    cache: &PoseEncCache,
    d_out: &Tensor,
    grads: &mut Grads,
) -> Result<()> {
    let d_a2 = convp_bwd(store, "pose_enc.conv3", &cache.convs[3], d_out, grads)?;
    let d_h2 = silu_bwd(&cache.act_pres[2], &d_a2);
    let d_a1 = convp_bwd(store, "pose_enc.conv2", &cache.convs[2], &d_h2, grads)?;
    let d_h1 = silu_bwd(&cache.act_pres[1], &d_a1);
    let d_a0 = convp_bwd(store, "pose_enc.conv1", &cache.convs[1], &d_h1, grads)?;
    let d_h0 = silu_bwd(&cache.act_pres[0], &d_a0);
    let _ = convp_bwd(store, "pose_enc.conv0", &cache.convs[0], &d_h0, grads)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Full stage-1 sample: loss and gradients
// ---------------------------------------------------------------------------

/// Inputs of one stage-1 training sample, prepared by the caller.
pub struct Stage1Input<'a> {
    /// Clean latent of the target frame.
    pub x0: &'a Tensor,
    /// Noise draw.
    pub eps: &'a Tensor,
    pub t: usize,
    /// Rendered pose map of the target frame.
    pub target_pose_map: &'a Tensor,
    /// Rendered pose maps of the reference frames.
    pub ref_pose_maps: &'a [Tensor],
    /// Codec latents of the reference frames.
    pub ref_latents: &'a [Tensor],
    /// Frozen global features per reference.
    pub ref_globals: &'a [Tensor],
    /// Zero the prototypes (unconditional-branch training).
    pub drop_refs: bool,
    pub sqrt_alpha_bar: f64,
    pub sigma: f64,
}

/// Forward plus hand-derived backward for one stage-1 sample. Gradients cover
/// the denoiser, the selector, the reference encoder, and the pose encoder.
pub fn stage1_loss_and_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &Stage1Input<'_>,
    grads: &mut Grads,
) -> Result<f64> {
    // Pose features.
    let (x_p, pose_cache) = pose_enc_fwd(store, input.target_pose_map)?;
    let mut ref_feats = Vec::with_capacity(input.ref_pose_maps.len());
    let mut ref_caches = Vec::with_capacity(input.ref_pose_maps.len());
    for m in input.ref_pose_maps {
        let (f, c) = pose_enc_fwd(store, m)?;
        ref_feats.push(f);
        ref_caches.push(c);
    }

    // Reference pyramids.
    let n_refs = input.ref_latents.len();
    let mut pyramids = Vec::with_capacity(n_refs);
    let mut enc_caches = Vec::with_capacity(n_refs);
    for (z, g) in input.ref_latents.iter().zip(input.ref_globals.iter()) {
        let (pyr, c) = refenc_fwd_cached(store, cfg, z, g)?;
        pyramids.push(pyr);
        enc_caches.push(c);
    }

    // Selector and prototypes.
    let (agg, sel_cache) = selector_fwd_cached(store, cfg, &x_p, &ref_feats)?;
    let protos_real = crate::ppa::aggregate_prototypes(&agg, &pyramids, input.ref_globals)?;
    let protos = if input.drop_refs {
        protos_real.zeros_like()
    } else {
        protos_real.clone()
    };

    // Diffusion sample.
    let x_t = input
        .x0
        .scale(input.sqrt_alpha_bar)
        .add(&input.eps.scale(input.sigma))?;
    let v_t = input
        .eps
        .scale(input.sqrt_alpha_bar)
        .sub(&input.x0.scale(input.sigma))?;
    let z0 = x_t.add(&x_p)?;

    let (v_pred, den_cache) = denoiser_fwd_cached(store, cfg, &z0, &protos, input.t)?;
    let loss = v_pred.mse(&v_t)?;

    // Backward.
    let d_v = v_pred.sub(&v_t)?.scale(2.0 / v_pred.len() as f64);
    let din = denoiser_bwd(store, cfg, &den_cache, &protos, &d_v, grads)?;

    // Pose features receive the input-latent gradient...
    let mut d_xp = din.d_input;

    if !input.drop_refs {
        // ...plus the selector gradient through the prototypes.
        let mut d_map = Tensor::zeros(agg.map.shape());
        let mut d_pyramids: Vec<Vec<Tensor>> = pyramids
            .iter()
            .map(|pyr| pyr.iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect();
        for level in 0..NUM_LEVELS {
            let (dm, d_feats) = aggregate_fine_bwd(&agg, &pyramids, level, &din.d_fine[level])?;
            d_map.add_assign(&dm)?;
            for (k, df) in d_feats.into_iter().enumerate() {
                d_pyramids[k][level].add_assign(&df)?;
            }
        }
        for (cache, d_levels) in enc_caches.iter().zip(d_pyramids.iter()) {
            refenc_bwd(store, cache, d_levels, grads)?;
        }
        let mut d_scores = vec![0.0; n_refs];
        if n_refs > 1 {
            for (k, g) in input.ref_globals.iter().enumerate() {
                d_scores[k] = din.d_global.dot(g)?;
            }
        }
        let (d_xp_sel, d_xrp) = selector_bwd(store, cfg, &sel_cache, &d_map, &d_scores, grads)?;
        d_xp.add_assign(&d_xp_sel)?;
        for (c, d) in ref_caches.iter().zip(d_xrp.iter()) {
            pose_enc_bwd(store, c, d, grads)?;
        }
    }
    pose_enc_bwd(store, &pose_cache, &d_xp, grads)?;
    Ok(loss)
}

/// Plain (uncached) counterpart used for finite-difference verification.
pub fn stage1_loss_only(
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &Stage1Input<'_>,
) -> Result<f64> {
    let x_p = crate::poseflow::encode_pose(store, input.target_pose_map)?;
    let ref_feats: Vec<Tensor> = input
        .ref_pose_maps
        .iter()
        .map(|m| crate::poseflow::encode_pose(store, m))
        .collect::<Result<_>>()?;
    let pyramids = crate::refenc::reference_forward(
        store,
        cfg,
        input.ref_latents,
        input.ref_globals,
    )?;
    let agg = crate::ppa::pose_aware_selector(store, cfg, &x_p, &ref_feats)?;
    let mut protos = crate::ppa::aggregate_prototypes(&agg, &pyramids, input.ref_globals)?;
    if input.drop_refs {
        protos = protos.zeros_like();
    }
    let x_t = input
        .x0
        .scale(input.sqrt_alpha_bar)
        .add(&input.eps.scale(input.sigma))?;
    let v_t = input
        .eps
        .scale(input.sqrt_alpha_bar)
        .sub(&input.x0.scale(input.sigma))?;
    let z0 = x_t.add(&x_p)?;
    let out = crate::fpi::denoiser_forward(store, cfg, &[z0], &[protos], input.t, false)?;
    out.v[0].mse(&v_t)
}
