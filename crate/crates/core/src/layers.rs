//! Shared parameterized layers: linear projections, biased convolutions,
//! residual attention layers, and residual conv blocks.
//!
//! Layers read their weights from a [`ParamStore`] by path, so one forward
//! implementation serves training, checkpointing, and perturbation.

use crate::error::{Error, Result};
use crate::params::{InitSpec, ParamStore};
use crate::rng::Rng;
use crate::tensor::{
    concat0, conv2d, from_tokens, group_norm, matmul, multi_head_attention, silu,
    sinusoidal_pos_enc, to_tokens, Tensor,
};

/// Weight std is fan-in scaled: uniform tiny inits collapse signal
/// propagation through the narrow layers of a from-scratch network. For the
/// widest convolutions here this lands near 0.02.
pub fn init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

pub const GN_EPS: f64 = 1e-5;

/// Largest divisor of `channels` no greater than `preferred`, via gcd with
/// fallback to 1. Keeps group norm valid for any channel count.
pub fn norm_groups(channels: usize, preferred: usize) -> usize {
    let mut g = gcd(channels, preferred.max(1));
    if g == 0 {
        g = 1;
    }
    g
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub fn create_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &Rng,
) -> Result<()> {
    store.create(
        &format!("{prefix}.weight"),
        &[d_in, d_out],
        InitSpec::TruncNormal { std: init_std(d_in) },
        rng,
    )?;
    store.create(&format!("{prefix}.bias"), &[d_out], InitSpec::Zeros, rng)
}

/// `x [n, d_in] -> [n, d_out]`.
pub fn linear_forward(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let mut out = matmul(x, w)?;
    let (n, d) = (out.shape()[0], out.shape()[1]);
    for i in 0..n {
        for j in 0..d {
            out.data_mut()[i * d + j] += b.data()[j];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Conv with bias
// ---------------------------------------------------------------------------

pub fn create_conv(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &Rng,
) -> Result<()> {
    store.create(
        &format!("{prefix}.weight"),
        &[c_out, c_in, k, k],
        InitSpec::TruncNormal { std: init_std(c_in * k * k) },
        rng,
    )?;
    store.create(&format!("{prefix}.bias"), &[c_out], InitSpec::Zeros, rng)
}

/// Zero-initialized conv (used for the offset head's final layer).
pub fn create_conv_zero(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &Rng,
) -> Result<()> {
    store.create(
        &format!("{prefix}.weight"),
        &[c_out, c_in, k, k],
        InitSpec::Zeros,
        rng,
    )?;
    store.create(&format!("{prefix}.bias"), &[c_out], InitSpec::Zeros, rng)
}

pub fn conv_forward(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let mut out = conv2d(x, w, stride, padding)?;
    let (c, h, wd) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    for ch in 0..c {
        let bias = b.data()[ch];
        for p in 0..h * wd {
            out.data_mut()[ch * h * wd + p] += bias;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Group norm with learned affine
// ---------------------------------------------------------------------------

pub fn create_group_norm(store: &mut ParamStore, prefix: &str, channels: usize, rng: &Rng) -> Result<()> {
    store.create(
        &format!("{prefix}.gamma"),
        &[channels],
        InitSpec::Constant(1.0),
        rng,
    )?;
    store.create(&format!("{prefix}.beta"), &[channels], InitSpec::Zeros, rng)
}

pub fn group_norm_forward(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    groups: usize,
) -> Result<Tensor> {
    let gamma = store.get(&format!("{prefix}.gamma"))?;
    let beta = store.get(&format!("{prefix}.beta"))?;
    group_norm(x, groups, gamma, beta, GN_EPS)
}

// ---------------------------------------------------------------------------
// Residual attention layers
// ---------------------------------------------------------------------------

/// q/k/v/out projections for one attention layer. Key/value inputs may have a
/// different width than the query stream.
pub fn create_attention(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    d_kv: usize,
    rng: &Rng,
) -> Result<()> {
    create_linear(store, &format!("{prefix}.q"), d_model, d_model, rng)?;
    create_linear(store, &format!("{prefix}.k"), d_kv, d_model, rng)?;
    create_linear(store, &format!("{prefix}.v"), d_kv, d_model, rng)?;
    create_linear(store, &format!("{prefix}.out"), d_model, d_model, rng)
}

/// Residual attention over token matrices: `x + out(MHA(q(x), k(kv), v(kv)))`.
pub fn attention_forward(
    store: &ParamStore,
    prefix: &str,
    x_tokens: &Tensor,
    kv_tokens: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    attention_forward_posqk(store, prefix, x_tokens, kv_tokens, heads, None, None)
}

/// Attention with optional positional encodings added to the query and key
/// inputs (values and the residual stay positional-free). Aligned encodings
/// give spatially-aligned streams a same-position matching prior.
pub fn attention_forward_posqk(
    store: &ParamStore,
    prefix: &str,
    x_tokens: &Tensor,
    kv_tokens: &Tensor,
    heads: usize,
    pos_q: Option<&Tensor>,
    pos_kv: Option<&Tensor>,
) -> Result<Tensor> {
    let q_in = match pos_q {
        Some(p) => x_tokens.add(p)?,
        None => x_tokens.clone(),
    };
    let k_in = match pos_kv {
        Some(p) => kv_tokens.add(p)?,
        None => kv_tokens.clone(),
    };
    let q = linear_forward(store, &format!("{prefix}.q"), &q_in)?;
    let k = linear_forward(store, &format!("{prefix}.k"), &k_in)?;
    let v = linear_forward(store, &format!("{prefix}.v"), kv_tokens)?;
    let att = multi_head_attention(&q, &k, &v, heads)?;
    let out = linear_forward(store, &format!("{prefix}.out"), &att)?;
    x_tokens.add(&out)
}

/// Positional encoding laid out as spatial tokens `[h*w, c]`.
pub fn pos_enc_tokens(c: usize, h: usize, w: usize) -> Result<Tensor> {
    to_tokens(&sinusoidal_pos_enc(h, w, c)?)
}

/// Residual self-attention over the spatial cells of `[C, H, W]`, with a
/// shared positional encoding on queries and keys.
pub fn spatial_self_attention(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let tokens = to_tokens(x)?;
    let pos = pos_enc_tokens(c, h, w)?;
    let out = attention_forward_posqk(store, prefix, &tokens, &tokens, heads, Some(&pos), Some(&pos))?;
    from_tokens(&out, h, w)
}

/// Residual cross-attention of spatial cells against a single global token.
pub fn semantic_cross_attention(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    global: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    if global.shape().len() != 1 {
        return Err(Error::Dim("global feature must be rank 1".into()));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let tokens = to_tokens(x)?;
    let g = Tensor::new(vec![1, global.len()], global.data().to_vec())?;
    let out = attention_forward(store, prefix, &tokens, &g, heads)?;
    from_tokens(&out, h, w)
}

/// Residual cross-attention of latent cells against the concatenation of the
/// latent's own cells and a prototype's cells (2*HW keys).
pub fn prototype_spatial_attention(
    store: &ParamStore,
    prefix: &str,
    latent: &Tensor,
    prototype: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    if latent.shape() != prototype.shape() {
        return Err(Error::Dim(format!(
            "latent {:?} and prototype {:?} must share shape",
            latent.shape(),
            prototype.shape()
        )));
    }
    let (c, h, w) = (latent.shape()[0], latent.shape()[1], latent.shape()[2]);
    let lat_tokens = to_tokens(latent)?;
    let proto_tokens = to_tokens(prototype)?;
    let kv = concat0(&[&lat_tokens, &proto_tokens])?;
    // The prototype is spatially aligned with the latent, so both halves of
    // the key sequence share the latent's positional encoding.
    let pos = pos_enc_tokens(c, h, w)?;
    let pos_kv = concat0(&[&pos, &pos])?;
    let out = attention_forward_posqk(store, prefix, &lat_tokens, &kv, heads, Some(&pos), Some(&pos_kv))?;
    from_tokens(&out, h, w)
}

// ---------------------------------------------------------------------------
// Residual conv block
// ---------------------------------------------------------------------------

/// norm -> silu -> conv3x3 -> (optional timestep add) -> norm -> silu ->
/// conv3x3, plus a skip (1x1 conv when channels change).
pub struct ConvBlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
}

pub fn create_conv_block(
    store: &mut ParamStore,
    prefix: &str,
    spec: &ConvBlockSpec,
    rng: &Rng,
) -> Result<()> {
    create_group_norm(store, &format!("{prefix}.gn0"), spec.c_in, rng)?;
    create_conv(store, &format!("{prefix}.conv0"), spec.c_in, spec.c_out, 3, rng)?;
    create_group_norm(store, &format!("{prefix}.gn1"), spec.c_out, rng)?;
    create_conv(store, &format!("{prefix}.conv1"), spec.c_out, spec.c_out, 3, rng)?;
    if spec.c_in != spec.c_out {
        create_conv(store, &format!("{prefix}.skip"), spec.c_in, spec.c_out, 1, rng)?;
    }
    Ok(())
}

pub fn conv_block_forward(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    spec: &ConvBlockSpec,
    t_shift: Option<&Tensor>,
) -> Result<Tensor> {
    let g0 = norm_groups(spec.c_in, spec.groups);
    let mut h = group_norm_forward(store, &format!("{prefix}.gn0"), x, g0)?;
    h = silu(&h);
    h = conv_forward(store, &format!("{prefix}.conv0"), &h, 1, 1)?;
    if let Some(shift) = t_shift {
        if shift.len() != spec.c_out {
            return Err(Error::Dim("timestep shift width mismatch".into()));
        }
        let (c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        for ch in 0..c {
            let s = shift.data()[ch];
            for p in 0..hh * ww {
                h.data_mut()[ch * hh * ww + p] += s;
            }
        }
    }
    let g1 = norm_groups(spec.c_out, spec.groups);
    let mut h2 = group_norm_forward(store, &format!("{prefix}.gn1"), &h, g1)?;
    h2 = silu(&h2);
    h2 = conv_forward(store, &format!("{prefix}.conv1"), &h2, 1, 1)?;
    let skip = if spec.c_in != spec.c_out {
        conv_forward(store, &format!("{prefix}.skip"), x, 1, 0)?
    } else {
        x.clone()
    };
    h2.add(&skip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_attention(d: usize, d_kv: usize, seed: u64) -> ParamStore {
        let rng = Rng::new(seed);
        let mut s = ParamStore::new();
        create_attention(&mut s, "attn", d, d_kv, &rng).unwrap();
        s
    }

    #[test]
    fn semantic_single_key_is_constant_pre_residual() {
        let store = store_with_attention(8, 6, 3);
        let mut rng = Rng::new(4);
        let x = Tensor::from_fn(&[8, 3, 3], |_| rng.normal());
        let g = Tensor::from_fn(&[6], |_| rng.normal());
        let out = semantic_cross_attention(&store, "attn", &x, &g, 2).unwrap();
        let delta = out.sub(&x).unwrap();
        // Pre-residual output is the same projected value at every cell.
        let first: Vec<f64> = (0..8).map(|c| delta.at(&[c, 0, 0])).collect();
        for y in 0..3 {
            for xp in 0..3 {
                for c in 0..8 {
                    assert!((delta.at(&[c, y, xp]) - first[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut store = store_with_attention(8, 6, 5);
        let zero_w = Tensor::zeros(&[6, 8]);
        store.insert_raw("attn.v.weight", zero_w);
        store.insert_raw("attn.v.bias", Tensor::zeros(&[8]));
        store.insert_raw("attn.out.bias", Tensor::zeros(&[8]));
        let mut rng = Rng::new(6);
        let x = Tensor::from_fn(&[8, 2, 2], |_| rng.normal());
        let g = Tensor::from_fn(&[6], |_| rng.normal());
        let out = semantic_cross_attention(&store, "attn", &x, &g, 2).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn prototype_attention_duplicate_keys_match_self_attention() {
        let store = store_with_attention(8, 8, 7);
        let mut rng = Rng::new(8);
        let x = Tensor::from_fn(&[8, 3, 3], |_| rng.normal());
        let with_proto = prototype_spatial_attention(&store, "attn", &x, &x, 2).unwrap();
        let self_attn = spatial_self_attention(&store, "attn", &x, 2).unwrap();
        assert!(with_proto.max_abs_diff(&self_attn) < 1e-12);
    }

    #[test]
    fn conv_block_preserves_shape() {
        let rng = Rng::new(9);
        let mut store = ParamStore::new();
        let spec = ConvBlockSpec {
            c_in: 4,
            c_out: 8,
            groups: 4,
        };
        create_conv_block(&mut store, "blk", &spec, &rng).unwrap();
        let mut r = Rng::new(10);
        let x = Tensor::from_fn(&[4, 5, 5], |_| r.normal());
        let out = conv_block_forward(&store, "blk", &x, &spec, None).unwrap();
        assert_eq!(out.shape(), &[8, 5, 5]);
        out.check_finite().unwrap();
    }

    #[test]
    fn norm_groups_divides() {
        for c in [3, 4, 6, 8, 12, 192, 7] {
            let g = norm_groups(c, 8);
            assert_eq!(c % g, 0, "c={c} g={g}");
        }
        assert_eq!(norm_groups(192, 8), 8);
        assert_eq!(norm_groups(7, 8), 1);
    }
}
