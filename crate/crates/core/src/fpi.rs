//! Flow-enhanced prototype instantiation: the denoising U-Net.
//!
//! 4 down blocks, 1 mid block, 4 up blocks with skip connections. Every block
//! runs conv -> prototype-guided spatial attention -> semantic cross-attention
//! on the global prototype -> (flow-enhanced temporal attention on the blocks
//! from the last down through the first up) -> temporal attention.
//!
//! The FTA sublayer projects each frame's features to a query, concatenates it
//! with the previous frame's query (frame 1 clamps to itself), predicts a
//! 2-channel offset map with a zero-initialized head, resamples the previous
//! frame's features along the offsets, and attends from the query to the
//! resampled features.

use crate::error::{Error, Result};
use crate::layers::{
    conv_block_forward, conv_forward, create_attention, create_conv, create_conv_block,
    create_conv_zero, create_group_norm, create_linear, group_norm_forward, linear_forward,
    prototype_spatial_attention, semantic_cross_attention, ConvBlockSpec,
};
use crate::modelcfg::{ModelConfig, DOWN_BLOCKS, MID_BLOCKS, NUM_LEVELS, UP_BLOCKS};
use crate::params::ParamStore;
use crate::ppa::PrototypeStack;
use crate::rng::Rng;
use crate::tensor::{
    avg_pool_2x2, bilinear_resize, bilinear_sample, from_tokens, multi_head_attention, silu,
    sinusoidal_embed, to_tokens, Tensor,
};

/// Derived block wiring for a given latent size.
#[derive(Clone, Debug)]
pub struct DenoiserPlan {
    pub level_channels: [usize; NUM_LEVELS],
    pub level_sizes: Vec<(usize, usize)>,
    pub downsample: [bool; NUM_LEVELS],
    pub latent_channels: usize,
    pub fta_blocks: Vec<usize>,
}

impl DenoiserPlan {
    /// Plan for an arbitrary latent size (test latents need not match the
    /// config resolution).
    pub fn for_latent(cfg: &ModelConfig, h: usize, w: usize) -> DenoiserPlan {
        let mut downsample = [false; NUM_LEVELS];
        let (mut ch, mut cw) = (h, w);
        for d in downsample.iter_mut().take(NUM_LEVELS - 1) {
            if ch >= 2 && cw >= 2 {
                *d = true;
                ch /= 2;
                cw /= 2;
            }
        }
        let mut level_sizes = Vec::with_capacity(NUM_LEVELS);
        let (mut sh, mut sw) = (h, w);
        for d in downsample.iter() {
            level_sizes.push((sh, sw));
            if *d {
                sh /= 2;
                sw /= 2;
            }
        }
        DenoiserPlan {
            level_channels: cfg.level_channels(),
            level_sizes,
            downsample,
            latent_channels: cfg.latent_channels(),
            fta_blocks: cfg.fta_blocks(),
        }
    }

    pub fn block_level(&self, block: usize) -> usize {
        [0, 1, 2, 3, 3, 3, 2, 1, 0][block]
    }

    /// Conv-block in/out channels per block index.
    pub fn block_channels(&self, block: usize) -> (usize, usize) {
        let ch = self.level_channels;
        match block {
            0 => (self.latent_channels, ch[0]),
            1 => (ch[0], ch[1]),
            2 => (ch[1], ch[2]),
            3 => (ch[2], ch[3]),
            4 => (ch[3], ch[3]),
            5 => (2 * ch[3], ch[3]),
            6 => (ch[3] + ch[2], ch[2]),
            7 => (ch[2] + ch[1], ch[1]),
            8 => (ch[1] + ch[0], ch[0]),
            _ => unreachable!("block index"),
        }
    }
}

/// Create all denoiser parameters under `fpi.`.
pub fn create_denoiser(store: &mut ParamStore, cfg: &ModelConfig, rng: &Rng) -> Result<()> {
    let d_t = cfg.t_embed_dim;
    create_linear(store, "fpi.t_embed.lin0", d_t, d_t, rng)?;
    create_linear(store, "fpi.t_embed.lin1", d_t, d_t, rng)?;
    let plan = DenoiserPlan::for_latent(cfg, cfg.latent_size(), cfg.latent_size());
    let n_blocks = DOWN_BLOCKS + MID_BLOCKS + UP_BLOCKS;
    for block in 0..n_blocks {
        let (c_in, c_out) = plan.block_channels(block);
        let prefix = format!("fpi.block{block}");
        create_conv_block(
            store,
            &format!("{prefix}.conv"),
            &ConvBlockSpec {
                c_in,
                c_out,
                groups: cfg.groups,
            },
            rng,
        )?;
        create_linear(store, &format!("{prefix}.t_proj"), d_t, c_out, rng)?;
        create_attention(store, &format!("{prefix}.proto_attn"), c_out, c_out, rng)?;
        create_attention(store, &format!("{prefix}.sem_attn"), c_out, cfg.global_dim, rng)?;
        if plan.fta_blocks.contains(&block) {
            create_linear(store, &format!("{prefix}.fta.q_proj"), c_out, c_out, rng)?;
            create_conv(store, &format!("{prefix}.fta.offset.conv0"), 2 * c_out, c_out, 3, rng)?;
            create_conv_zero(store, &format!("{prefix}.fta.offset.conv1"), c_out, 2, 3, rng)?;
            create_linear(store, &format!("{prefix}.fta.attn.k"), c_out, c_out, rng)?;
            create_linear(store, &format!("{prefix}.fta.attn.v"), c_out, c_out, rng)?;
            create_linear(store, &format!("{prefix}.fta.attn.out"), c_out, c_out, rng)?;
        }
        create_attention(store, &format!("{prefix}.temporal"), c_out, c_out, rng)?;
    }
    create_group_norm(store, "fpi.head.gn", plan.level_channels[0], rng)?;
    create_conv(store, "fpi.head.conv", plan.level_channels[0], plan.latent_channels, 3, rng)
}

/// Channel-concatenate each frame's query with its predecessor's; frame 1
/// pairs with itself.
pub fn fta_query_concat(queries: &[Tensor]) -> Result<Vec<Tensor>> {
    if queries.is_empty() {
        return Err(Error::Dim("fta_query_concat needs at least one frame".into()));
    }
    let mut out = Vec::with_capacity(queries.len());
    for i in 0..queries.len() {
        let prev = &queries[i.saturating_sub(1)];
        if prev.shape() != queries[i].shape() {
            return Err(Error::Dim("query shapes differ across frames".into()));
        }
        let (c, h, w) = (
            queries[i].shape()[0],
            queries[i].shape()[1],
            queries[i].shape()[2],
        );
        let mut cat = Tensor::zeros(&[2 * c, h, w]);
        cat.data_mut()[..c * h * w].copy_from_slice(queries[i].data());
        cat.data_mut()[c * h * w..].copy_from_slice(prev.data());
        out.push(cat);
    }
    Ok(out)
}

/// Offset head: conv3x3 -> silu -> conv3x3 (final layer zero-initialized, so
/// fresh parameters predict zero offsets).
pub fn predict_offsets(store: &ParamStore, prefix: &str, q_cat: &Tensor) -> Result<Tensor> {
    let h = conv_forward(store, &format!("{prefix}.conv0"), q_cat, 1, 1)?;
    conv_forward(store, &format!("{prefix}.conv1"), &silu(&h), 1, 1)
}

/// Resample each frame's clamped-predecessor features along its offset map.
pub fn fta_resample(frames: &[Tensor], offsets: &[Tensor]) -> Result<Vec<Tensor>> {
    if frames.len() != offsets.len() {
        return Err(Error::Dim("frame/offset count mismatch".into()));
    }
    let mut out = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let prev = &frames[i.saturating_sub(1)];
        out.push(bilinear_sample(prev, &offsets[i])?);
    }
    Ok(out)
}

/// Per-frame attention with the projected query and resampled key/value,
/// residual onto the pre-FTA features.
pub fn fta_attention(
    store: &ParamStore,
    prefix: &str,
    base: &Tensor,
    query_tokens: &Tensor,
    resampled: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let (h, w) = (base.shape()[1], base.shape()[2]);
    let u_tokens = to_tokens(resampled)?;
    let k = linear_forward(store, &format!("{prefix}.k"), &u_tokens)?;
    let v = linear_forward(store, &format!("{prefix}.v"), &u_tokens)?;
    let att = multi_head_attention(query_tokens, &k, &v, heads)?;
    let out = linear_forward(store, &format!("{prefix}.out"), &att)?;
    base.add(&from_tokens(&out, h, w)?)
}

/// Attention across frames at each spatial cell independently, with a
/// sinusoidal frame-index encoding added to queries and keys; residual add.
pub fn temporal_attention(
    store: &ParamStore,
    prefix: &str,
    frames: &[Tensor],
    heads: usize,
) -> Result<Vec<Tensor>> {
    if frames.is_empty() {
        return Err(Error::Dim("temporal_attention needs frames".into()));
    }
    let shape = frames[0].shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for f in frames {
        if f.shape() != shape.as_slice() {
            return Err(Error::Dim("frame shapes differ".into()));
        }
    }
    let n = frames.len();
    let hw = h * w;
    let pos: Vec<Tensor> = (0..n)
        .map(|i| sinusoidal_embed(i as f64, c))
        .collect::<Result<_>>()?;
    let mut out: Vec<Tensor> = frames.to_vec();
    let mut tokens = Tensor::zeros(&[n, c]);
    let mut tokens_pos = Tensor::zeros(&[n, c]);
    for p in 0..hw {
        for i in 0..n {
            for ch in 0..c {
                let v = frames[i].data()[ch * hw + p];
                tokens.data_mut()[i * c + ch] = v;
                tokens_pos.data_mut()[i * c + ch] = v + pos[i].data()[ch];
            }
        }
        let q = linear_forward(store, &format!("{prefix}.q"), &tokens_pos)?;
        let k = linear_forward(store, &format!("{prefix}.k"), &tokens_pos)?;
        let v = linear_forward(store, &format!("{prefix}.v"), &tokens)?;
        let att = multi_head_attention(&q, &k, &v, heads)?;
        let proj = linear_forward(store, &format!("{prefix}.out"), &att)?;
        for i in 0..n {
            for ch in 0..c {
                out[i].data_mut()[ch * hw + p] += proj.data()[i * c + ch];
            }
        }
    }
    Ok(out)
}

/// Denoiser output: v-prediction per frame plus, per FTA block, the predicted
/// offsets and the offset-head inputs (for offset supervision and its
/// analytic gradient).
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub v: Vec<Tensor>,
    /// (block index, per-frame offset maps `[2, h, w]`).
    pub offsets: Vec<(usize, Vec<Tensor>)>,
    /// (block index, per-frame offset-head inputs `[2C, h, w]`).
    pub fta_inputs: Vec<(usize, Vec<Tensor>)>,
    /// Per-frame inputs of the output-head conv (post norm and activation);
    /// the delta rule for the head reads these.
    pub head_inputs: Vec<Tensor>,
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Dim("channel concat with mismatched spatial dims".into()));
    }
    let (ca, cb) = (a.shape()[0], b.shape()[0]);
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let mut out = Tensor::zeros(&[ca + cb, h, w]);
    out.data_mut()[..ca * h * w].copy_from_slice(a.data());
    out.data_mut()[ca * h * w..].copy_from_slice(b.data());
    Ok(out)
}

/// Timestep embedding: sinusoidal then a 2-layer projection.
pub fn timestep_embedding(store: &ParamStore, cfg: &ModelConfig, t: usize) -> Result<Tensor> {
    let e = sinusoidal_embed(t as f64, cfg.t_embed_dim)?;
    let row = e.reshape(&[1, cfg.t_embed_dim])?;
    let h = linear_forward(store, "fpi.t_embed.lin0", &row)?;
    let h = linear_forward(store, "fpi.t_embed.lin1", &silu(&h))?;
    h.reshape(&[cfg.t_embed_dim])
}

/// Full U-Net forward over a window of frames.
///
/// `frames` are input latents (noise plus pose features), one per frame;
/// `protos` are the per-frame prototype stacks. `include_fta` gates the FTA
/// sublayer (stage-1 training runs without it).
pub fn denoiser_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    frames: &[Tensor],
    protos: &[PrototypeStack],
    timestep: usize,
    include_fta: bool,
) -> Result<DenoiserOutput> {
    if frames.is_empty() {
        return Err(Error::Dim("denoiser needs at least one frame".into()));
    }
    if frames.len() != protos.len() {
        return Err(Error::Dim(format!(
            "{} frames but {} prototype stacks",
            frames.len(),
            protos.len()
        )));
    }
    let shape = frames[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != cfg.latent_channels() {
        return Err(Error::Dim(format!(
            "latent shape {:?} does not match {} channels",
            shape,
            cfg.latent_channels()
        )));
    }
    for f in frames {
        if f.shape() != shape.as_slice() {
            return Err(Error::Dim("latent shapes differ across frames".into()));
        }
    }
    let plan = DenoiserPlan::for_latent(cfg, shape[1], shape[2]);
    for (fi, p) in protos.iter().enumerate() {
        if p.fine.len() != NUM_LEVELS {
            return Err(Error::Dim("prototype stack must cover all levels".into()));
        }
        for level in 0..NUM_LEVELS {
            let (h, w) = plan.level_sizes[level];
            let want = [plan.level_channels[level], h, w];
            if p.fine[level].shape() != want {
                return Err(Error::Dim(format!(
                    "frame {fi} prototype level {level}: {:?} vs required {:?}",
                    p.fine[level].shape(),
                    want
                )));
            }
        }
    }

    let t_emb = timestep_embedding(store, cfg, timestep)?;
    let t_row = t_emb.clone().reshape(&[1, cfg.t_embed_dim])?;
    let n = frames.len();
    let mut state: Vec<Tensor> = frames.to_vec();
    let mut skips: Vec<Vec<Tensor>> = Vec::with_capacity(DOWN_BLOCKS);
    let mut offsets_rec: Vec<(usize, Vec<Tensor>)> = Vec::new();
    let mut fta_in_rec: Vec<(usize, Vec<Tensor>)> = Vec::new();

    let n_blocks = DOWN_BLOCKS + MID_BLOCKS + UP_BLOCKS;
    for block in 0..n_blocks {
        let level = plan.block_level(block);
        let (c_in, c_out) = plan.block_channels(block);
        let prefix = format!("fpi.block{block}");
        let spec = ConvBlockSpec {
            c_in,
            c_out,
            groups: cfg.groups,
        };

        // Up blocks first restore resolution and concat their skip.
        if block >= DOWN_BLOCKS + MID_BLOCKS {
            let skip_idx = n_blocks - 1 - block; // 5->3, 6->2, 7->1, 8->0
            let skip = &skips[skip_idx];
            for i in 0..n {
                let (sh, sw) = (skip[i].shape()[1], skip[i].shape()[2]);
                let cur = if state[i].shape()[1] != sh || state[i].shape()[2] != sw {
                    bilinear_resize(&state[i], sh, sw)?
                } else {
                    state[i].clone()
                };
                state[i] = concat_channels(&cur, &skip[i])?;
            }
        }

        let t_shift = linear_forward(store, &format!("{prefix}.t_proj"), &t_row)?
            .reshape(&[c_out])?;
        for i in 0..n {
            let mut z = conv_block_forward(
                store,
                &format!("{prefix}.conv"),
                &state[i],
                &spec,
                Some(&t_shift),
            )?;
            z = prototype_spatial_attention(
                store,
                &format!("{prefix}.proto_attn"),
                &z,
                &protos[i].fine[level],
                cfg.heads,
            )?;
            z = semantic_cross_attention(
                store,
                &format!("{prefix}.sem_attn"),
                &z,
                &protos[i].global,
                cfg.heads,
            )?;
            state[i] = z;
        }

        if include_fta && plan.fta_blocks.contains(&block) {
            let (h, w) = plan.level_sizes[level];
            let mut q_spatial = Vec::with_capacity(n);
            let mut q_tokens = Vec::with_capacity(n);
            for z in state.iter() {
                let toks = linear_forward(store, &format!("{prefix}.fta.q_proj"), &to_tokens(z)?)?;
                q_spatial.push(from_tokens(&toks, h, w)?);
                q_tokens.push(toks);
            }
            let q_cat = fta_query_concat(&q_spatial)?;
            let mut offs = Vec::with_capacity(n);
            for qc in &q_cat {
                offs.push(predict_offsets(store, &format!("{prefix}.fta.offset"), qc)?);
            }
            let resampled = fta_resample(&state, &offs)?;
            for i in 0..n {
                state[i] = fta_attention(
                    store,
                    &format!("{prefix}.fta.attn"),
                    &state[i],
                    &q_tokens[i],
                    &resampled[i],
                    cfg.heads,
                )?;
            }
            offsets_rec.push((block, offs));
            fta_in_rec.push((block, q_cat));
        }

        state = temporal_attention(store, &format!("{prefix}.temporal"), &state, cfg.heads)?;

        // Down path: record skip, then shrink.
        if block < DOWN_BLOCKS {
            skips.push(state.clone());
            if block < DOWN_BLOCKS - 1 && plan.downsample[block] {
                for z in state.iter_mut() {
                    *z = avg_pool_2x2(z)?;
                }
            }
        }
    }

    // Output head.
    let groups = crate::layers::norm_groups(plan.level_channels[0], cfg.groups);
    let mut v_out = Vec::with_capacity(n);
    let mut head_inputs = Vec::with_capacity(n);
    for z in state.iter() {
        let h = group_norm_forward(store, "fpi.head.gn", z, groups)?;
        let a = silu(&h);
        let v = conv_forward(store, "fpi.head.conv", &a, 1, 1)?;
        head_inputs.push(a);
        v_out.push(v);
    }
    Ok(DenoiserOutput {
        v: v_out,
        offsets: offsets_rec,
        fta_inputs: fta_in_rec,
        head_inputs,
    })
}

/// Names of the flow-enhanced temporal attention parameters (the stage-2
/// trainable set).
pub fn is_fta_param(name: &str) -> bool {
    name.contains(".fta.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppa::PrototypeStack;

    fn cfg() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            base_channels: 8,
            heads: 2,
            selector_dim: 16,
            global_dim: 16,
            pose_channels: [4, 8, 8],
            t_embed_dim: 16,
            ..Default::default()
        }
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let rng = Rng::new(seed);
        let mut s = ParamStore::new();
        create_denoiser(&mut s, cfg, &rng).unwrap();
        s
    }

    fn random_protos(cfg: &ModelConfig, plan: &DenoiserPlan, rng: &mut Rng) -> PrototypeStack {
        let fine = (0..NUM_LEVELS)
            .map(|l| {
                let (h, w) = plan.level_sizes[l];
                Tensor::from_fn(&[plan.level_channels[l], h, w], |_| 0.1 * rng.normal())
            })
            .collect();
        PrototypeStack {
            fine,
            global: Tensor::from_fn(&[cfg.global_dim], |_| 0.1 * rng.normal()),
        }
    }

    #[test]
    fn fta_query_concat_rules() {
        let a = Tensor::full(&[2, 2, 2], 1.0);
        let b = Tensor::full(&[2, 2, 2], 2.0);
        let cat = fta_query_concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat[0].shape(), &[4, 2, 2]);
        // Frame 0 pairs with itself.
        assert_eq!(cat[0].data()[0], 1.0);
        assert_eq!(cat[0].data()[8], 1.0);
        // Frame 1 pairs with frame 0.
        assert_eq!(cat[1].data()[0], 2.0);
        assert_eq!(cat[1].data()[8], 1.0);
        let single = fta_query_concat(&[a]).unwrap();
        assert_eq!(single[0].shape(), &[4, 2, 2]);
    }

    #[test]
    fn fresh_offset_head_predicts_zero() {
        let cfg = cfg();
        let s = store(&cfg, 1);
        let mut rng = Rng::new(2);
        let c = cfg.level_channels()[3];
        let q_cat = Tensor::from_fn(&[2 * c, 3, 3], |_| rng.normal());
        let o = predict_offsets(&s, "fpi.block3.fta.offset", &q_cat).unwrap();
        assert_eq!(o.shape(), &[2, 3, 3]);
        assert_eq!(o.sq_norm(), 0.0);
    }

    #[test]
    fn resample_zero_offsets_gives_clamped_previous() {
        let mut rng = Rng::new(3);
        let frames: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[4, 3, 3], |_| rng.normal()))
            .collect();
        let zeros = vec![Tensor::zeros(&[2, 3, 3]); 3];
        let u = fta_resample(&frames, &zeros).unwrap();
        assert_eq!(u[0], frames[0]);
        assert_eq!(u[1], frames[0]);
        assert_eq!(u[2], frames[1]);
    }

    #[test]
    fn temporal_attention_constant_input_stays_constant() {
        let cfg = cfg();
        let s = store(&cfg, 4);
        let c = cfg.level_channels()[0];
        let frames: Vec<Tensor> = (0..4).map(|_| Tensor::full(&[c, 2, 2], 0.5)).collect();
        let out = temporal_attention(&s, "fpi.block0.temporal", &frames, cfg.heads).unwrap();
        for o in &out {
            assert!(o.max_abs_diff(&out[0]) < 1e-12);
        }
        // All cells agree too (tokens identical everywhere).
        let v0 = out[0].data()[0];
        for p in 0..4 {
            assert!((out[0].data()[p] - v0).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_attention_single_frame_matches_value_path() {
        let cfg = cfg();
        let mut s = store(&cfg, 5);
        // Zero value projection turns the layer into the identity.
        let c = cfg.level_channels()[0];
        s.insert_raw("fpi.block0.temporal.v.weight", Tensor::zeros(&[c, c]));
        s.insert_raw("fpi.block0.temporal.v.bias", Tensor::zeros(&[c]));
        s.insert_raw("fpi.block0.temporal.out.bias", Tensor::zeros(&[c]));
        let mut rng = Rng::new(6);
        let frame = Tensor::from_fn(&[c, 2, 2], |_| rng.normal());
        let out = temporal_attention(&s, "fpi.block0.temporal", &[frame.clone()], cfg.heads).unwrap();
        assert!(out[0].max_abs_diff(&frame) < 1e-14);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = cfg();
        let s = store(&cfg, 7);
        let plan = DenoiserPlan::for_latent(&cfg, 4, 4);
        let mut rng = Rng::new(8);
        let frames: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[192, 4, 4], |_| 0.5 * rng.normal()))
            .collect();
        let protos: Vec<PrototypeStack> =
            (0..2).map(|_| random_protos(&cfg, &plan, &mut rng)).collect();
        let out = denoiser_forward(&s, &cfg, &frames, &protos, 500, true).unwrap();
        assert_eq!(out.v.len(), 2);
        for v in &out.v {
            assert_eq!(v.shape(), frames[0].shape());
            v.check_finite().unwrap();
        }
        // FTA runs exactly on blocks 3, 4, 5.
        let blocks: Vec<usize> = out.offsets.iter().map(|(b, _)| *b).collect();
        assert_eq!(blocks, vec![3, 4, 5]);
        let again = denoiser_forward(&s, &cfg, &frames, &protos, 500, true).unwrap();
        for (a, b) in out.v.iter().zip(again.v.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fta_excluded_records_nothing() {
        let cfg = cfg();
        let s = store(&cfg, 9);
        let plan = DenoiserPlan::for_latent(&cfg, 4, 4);
        let mut rng = Rng::new(10);
        let frames = vec![Tensor::from_fn(&[192, 4, 4], |_| 0.5 * rng.normal())];
        let protos = vec![random_protos(&cfg, &plan, &mut rng)];
        let out = denoiser_forward(&s, &cfg, &frames, &protos, 100, false).unwrap();
        assert!(out.offsets.is_empty());
        assert!(out.fta_inputs.is_empty());
        assert_eq!(out.v.len(), 1);
    }

    #[test]
    fn reference_sensitivity() {
        let cfg = cfg();
        let s = store(&cfg, 11);
        let plan = DenoiserPlan::for_latent(&cfg, 4, 4);
        let mut rng = Rng::new(12);
        let frames = vec![Tensor::from_fn(&[192, 4, 4], |_| 0.5 * rng.normal())];
        let protos = vec![random_protos(&cfg, &plan, &mut rng)];
        let out_a = denoiser_forward(&s, &cfg, &frames, &protos, 100, true).unwrap();
        let mut protos_b = protos.clone();
        protos_b[0].fine[0] = protos_b[0].fine[0].map(|v| v + 0.05);
        let out_b = denoiser_forward(&s, &cfg, &frames, &protos_b, 100, true).unwrap();
        assert!(out_a.v[0].sub(&out_b.v[0]).unwrap().sq_norm() > 0.0);
    }

    #[test]
    fn single_frame_fta_is_finite() {
        let cfg = cfg();
        let s = store(&cfg, 13);
        let plan = DenoiserPlan::for_latent(&cfg, 2, 2);
        let mut rng = Rng::new(14);
        let frames = vec![Tensor::from_fn(&[192, 2, 2], |_| 0.5 * rng.normal())];
        let protos = vec![random_protos(&cfg, &plan, &mut rng)];
        let out = denoiser_forward(&s, &cfg, &frames, &protos, 1, true).unwrap();
        out.v[0].check_finite().unwrap();
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = cfg();
        let s = store(&cfg, 15);
        let plan = DenoiserPlan::for_latent(&cfg, 4, 4);
        let mut rng = Rng::new(16);
        let frames = vec![Tensor::zeros(&[192, 4, 4])];
        let mut protos = vec![random_protos(&cfg, &plan, &mut rng)];
        protos[0].fine[1] = Tensor::zeros(&[3, 2, 2]);
        assert!(denoiser_forward(&s, &cfg, &frames, &protos, 1, false).is_err());
    }
}
