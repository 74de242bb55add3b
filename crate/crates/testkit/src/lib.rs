//! Brute-force reference implementations used only by tests.
//!
//! Everything here is written as plainly as possible, separate from the main
//! kernels, so a bug in the hot path cannot hide behind a shared helper.

use profashion_core::error::Result;
use profashion_core::tensor::Tensor;

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(k, b.shape()[0]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(&[i, p]) * b.at(&[p, j]);
            }
            *out.at_mut(&[i, j]) = acc;
        }
    }
    out
}

/// Six-loop direct convolution (cross-correlation, zero padding).
pub fn naive_conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _ci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for oc in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ic in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += x.at(&[ic, iy as usize, ix as usize])
                                    * kernel.at(&[oc, ic, ky as usize, kx as usize]);
                            }
                        }
                    }
                }
                *out.at_mut(&[oc, oy, ox]) = acc;
            }
        }
    }
    out
}

/// Per-element softmax route that never forms the shared max: each weight is
/// computed as 1 / sum_j exp(x_j - x_i), which is algebraically identical but
/// follows a different code path.
pub fn softmax_row_alt(row: &[f64]) -> Vec<f64> {
    row.iter()
        .map(|&xi| {
            let denom: f64 = row.iter().map(|&xj| (xj - xi).exp()).sum();
            1.0 / denom
        })
        .collect()
}

/// Scalar-loop multi-head attention: per head, per query, explicit scores,
/// explicit softmax, explicit weighted sum.
pub fn naive_multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dh = d / heads;
    let mut out = Tensor::zeros(&[n, d]);
    for head in 0..heads {
        let off = head * dh;
        for i in 0..n {
            let mut scores = Vec::with_capacity(m);
            for j in 0..m {
                let mut dot = 0.0;
                for t in 0..dh {
                    dot += q.at(&[i, off + t]) * k.at(&[j, off + t]);
                }
                scores.push(dot / (dh as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..m {
                let wgt = exps[j] / total;
                for t in 0..dh {
                    *out.at_mut(&[i, off + t]) += wgt * v.at(&[j, off + t]);
                }
            }
        }
    }
    out
}

/// Residual attention layer recomputed from the raw projection weights with
/// [`naive_matmul`] and [`naive_multi_head_attention`].
pub fn naive_attention_layer(
    store: &profashion_core::params::ParamStore,
    prefix: &str,
    x_tokens: &Tensor,
    kv_tokens: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let lin = |p: &str, t: &Tensor| -> Result<Tensor> {
        let w = store.get(&format!("{p}.weight"))?;
        let b = store.get(&format!("{p}.bias"))?;
        let mut out = naive_matmul(t, w);
        let (n, d) = (out.shape()[0], out.shape()[1]);
        for i in 0..n {
            for j in 0..d {
                *out.at_mut(&[i, j]) += b.data()[j];
            }
        }
        Ok(out)
    };
    let q = lin(&format!("{prefix}.q"), x_tokens)?;
    let k = lin(&format!("{prefix}.k"), kv_tokens)?;
    let v = lin(&format!("{prefix}.v"), kv_tokens)?;
    let att = naive_multi_head_attention(&q, &k, &v, heads);
    let out = lin(&format!("{prefix}.out"), &att)?;
    x_tokens.add(&out)
}

/// Small model configuration used across integration and acceptance tests.
pub fn tiny_model_config(resolution: usize, n_refs: usize) -> profashion_core::modelcfg::ModelConfig {
    profashion_core::modelcfg::ModelConfig {
        resolution,
        n_refs,
        codec_block: 8,
        base_channels: 8,
        heads: 2,
        selector_dim: 16,
        global_dim: 16,
        pose_channels: [4, 8, 8],
        groups: 8,
        window: 4,
        window_stride: 2,
        t_embed_dim: 16,
    }
}

