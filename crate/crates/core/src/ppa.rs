//! Pose-aware prototype aggregation.
//!
//! A selector scores every reference against the driving pose: positional
//! encoding is added to the pose features, each is group-normalized and
//! linearly projected, the driving cells attend over all reference cells,
//! and the attention mass is pooled over the query axis into a per-reference
//! spatial map. The map is renormalized across references at each cell so
//! fine and global prototypes are convex combinations of reference features;
//! this keeps feature magnitudes at parity with the single-reference case
//! and makes N_r = 1 an exact identity.
//!
//! A full-attention variant (no query pooling) exists for ablation.

use crate::error::{Error, Result};
use crate::layers::{create_group_norm, create_linear, group_norm_forward, linear_forward};
use crate::modelcfg::{ModelConfig, NUM_LEVELS};
use crate::params::ParamStore;
use crate::refenc::RefPyramid;
use crate::rng::Rng;
use crate::tensor::{
    bilinear_resize, from_tokens, matmul, sinusoidal_pos_enc, softmax, to_tokens, Tensor,
};

/// Per-frame reference weighting: a per-cell map over references plus pooled
/// per-reference scores, both normalized to sum 1 across references.
#[derive(Clone, Debug)]
pub struct AggregationMap {
    /// `[N_r, h, w]`, cell sums across references = 1.
    pub map: Tensor,
    /// `[N_r]`, sums to 1.
    pub scores: Vec<f64>,
}

/// Per-frame prototypes: one fine tensor per pyramid level plus the global
/// vector. Shapes equal those of a single reference's features.
#[derive(Clone, Debug)]
pub struct PrototypeStack {
    pub fine: Vec<Tensor>,
    pub global: Tensor,
}

impl PrototypeStack {
    /// All-zero prototypes with the same shapes (the unconditional branch
    /// for classifier-free guidance).
    pub fn zeros_like(&self) -> PrototypeStack {
        PrototypeStack {
            fine: self.fine.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            global: Tensor::zeros(self.global.shape()),
        }
    }
}

/// Create selector parameters under `ppa.selector.`.
pub fn create_selector(store: &mut ParamStore, cfg: &ModelConfig, rng: &Rng) -> Result<()> {
    let c = cfg.latent_channels();
    create_group_norm(store, "ppa.selector.q_norm", c, rng)?;
    create_group_norm(store, "ppa.selector.k_norm", c, rng)?;
    create_linear(store, "ppa.selector.q_proj", c, cfg.selector_dim, rng)?;
    create_linear(store, "ppa.selector.k_proj", c, cfg.selector_dim, rng)
}

fn project_pose(
    store: &ParamStore,
    cfg: &ModelConfig,
    feat: &Tensor,
    pos: &Tensor,
    norm_prefix: &str,
    proj_prefix: &str,
) -> Result<Tensor> {
    let with_pos = feat.add(pos)?;
    let groups = crate::layers::norm_groups(feat.shape()[0], cfg.groups);
    let normed = group_norm_forward(store, norm_prefix, &with_pos, groups)?;
    let tokens = to_tokens(&normed)?;
    linear_forward(store, proj_prefix, &tokens)
}

/// Score references against one driving pose (Eqs. 5-7 wiring).
///
/// The positional encoding is shared between the driving pose and every
/// reference. After softmax over all N_r*h*w keys and mean pooling over the
/// h*w queries, the map is renormalized across references per cell.
pub fn pose_aware_selector(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_p: &Tensor,
    x_rp: &[Tensor],
) -> Result<AggregationMap> {
    if x_rp.is_empty() {
        return Err(Error::Dim("selector needs at least one reference pose".into()));
    }
    for r in x_rp {
        if r.shape() != x_p.shape() {
            return Err(Error::Dim(format!(
                "driving pose {:?} and reference pose {:?} must share shape",
                x_p.shape(),
                r.shape()
            )));
        }
    }
    let (c, h, w) = (x_p.shape()[0], x_p.shape()[1], x_p.shape()[2]);
    let n_refs = x_rp.len();
    let hw = h * w;
    let pos = sinusoidal_pos_enc(h, w, c)?;

    let q = project_pose(store, cfg, x_p, &pos, "ppa.selector.q_norm", "ppa.selector.q_proj")?;
    let mut key_rows: Vec<Tensor> = Vec::with_capacity(n_refs);
    for r in x_rp {
        key_rows.push(project_pose(
            store,
            cfg,
            r,
            &pos,
            "ppa.selector.k_norm",
            "ppa.selector.k_proj",
        )?);
    }
    let keys = crate::tensor::concat0(&key_rows.iter().collect::<Vec<_>>())?;

    // A = softmax(q kT / sqrt(d)) over the key axis.
    let d = cfg.selector_dim as f64;
    let kt = transpose(&keys);
    let mut logits = matmul(&q, &kt)?;
    let s = 1.0 / d.sqrt();
    for v in logits.data_mut() {
        *v *= s;
    }
    let attn = softmax(&logits, 1)?;

    // Mean over the query axis -> mass per key cell -> [N_r, h, w].
    let mut mass = vec![0.0f64; n_refs * hw];
    for qi in 0..hw {
        for kj in 0..n_refs * hw {
            mass[kj] += attn.data()[qi * n_refs * hw + kj];
        }
    }
    let inv_q = 1.0 / hw as f64;
    for v in &mut mass {
        *v *= inv_q;
    }

    // Renormalize across references at each cell.
    let mut map = Tensor::zeros(&[n_refs, h, w]);
    for p in 0..hw {
        let mut total = 0.0;
        for k in 0..n_refs {
            total += mass[k * hw + p];
        }
        for k in 0..n_refs {
            map.data_mut()[k * hw + p] = mass[k * hw + p] / total;
        }
    }

    // Pooled scores, renormalized to sum 1.
    let mut scores: Vec<f64> = (0..n_refs)
        .map(|k| map.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() * inv_q)
        .collect();
    let total: f64 = scores.iter().sum();
    for v in &mut scores {
        *v /= total;
    }
    Ok(AggregationMap { map, scores })
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = m.data()[i * c + j];
        }
    }
    out
}

/// Resize the aggregation map to a block's spatial dims (reference axis as
/// channels).
pub fn resize_map(map: &AggregationMap, h: usize, w: usize) -> Result<Tensor> {
    bilinear_resize(&map.map, h, w)
}

/// Fine prototype at one block: sum over references of feature x resized
/// per-cell weight.
pub fn aggregate_fine(
    map: &AggregationMap,
    pyramids: &[RefPyramid],
    level: usize,
) -> Result<Tensor> {
    if pyramids.is_empty() {
        return Err(Error::Dim("aggregate_fine needs references".into()));
    }
    if level >= pyramids[0].len() {
        return Err(Error::Dim(format!("level {level} out of pyramid range")));
    }
    let shape = pyramids[0][level].shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let n_refs = pyramids.len();
    if map.map.shape()[0] != n_refs {
        return Err(Error::Dim("map reference axis mismatch".into()));
    }
    if n_refs == 1 {
        // Exact single-reference degeneration.
        return Ok(pyramids[0][level].clone());
    }
    let weights = resize_map(map, h, w)?;
    let hw = h * w;
    let c = shape[0];
    let mut out = Tensor::zeros(&shape);
    for (k, pyr) in pyramids.iter().enumerate() {
        let feat = &pyr[level];
        if feat.shape() != shape.as_slice() {
            return Err(Error::Dim("pyramid shapes differ across references".into()));
        }
        for ch in 0..c {
            for p in 0..hw {
                out.data_mut()[ch * hw + p] += feat.data()[ch * hw + p] * weights.data()[k * hw + p];
            }
        }
    }
    Ok(out)
}

/// Global prototype: score-weighted sum of global reference features.
pub fn aggregate_global(map: &AggregationMap, x_refs: &[Tensor]) -> Result<Tensor> {
    if x_refs.is_empty() {
        return Err(Error::Dim("aggregate_global needs references".into()));
    }
    if map.scores.len() != x_refs.len() {
        return Err(Error::Dim("score/reference count mismatch".into()));
    }
    if x_refs.len() == 1 {
        return Ok(x_refs[0].clone());
    }
    let mut out = Tensor::zeros(x_refs[0].shape());
    for (k, x) in x_refs.iter().enumerate() {
        if x.shape() != out.shape() {
            return Err(Error::Dim("global feature shapes differ".into()));
        }
        let s = map.scores[k];
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += s * v;
        }
    }
    Ok(out)
}

/// Prototypes for one frame through the pooled path.
pub fn aggregate_prototypes(
    map: &AggregationMap,
    pyramids: &[RefPyramid],
    x_refs: &[Tensor],
) -> Result<PrototypeStack> {
    let mut fine = Vec::with_capacity(NUM_LEVELS);
    for level in 0..pyramids[0].len() {
        fine.push(aggregate_fine(map, pyramids, level)?);
    }
    Ok(PrototypeStack {
        fine,
        global: aggregate_global(map, x_refs)?,
    })
}

/// Cell budget guard for the full-attention variant.
pub const FULL_ATTENTION_CELL_LIMIT: usize = 1 << 24;

/// Ablation variant: skip query pooling. Per block, pose features are
/// resized to the block's dims, re-projected, and the full per-query
/// attention map multiplies reference cells directly. The global prototype
/// still uses the pooled scores.
pub fn full_attention_aggregate(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_p: &Tensor,
    x_rp: &[Tensor],
    pyramids: &[RefPyramid],
    x_refs: &[Tensor],
) -> Result<PrototypeStack> {
    if pyramids.is_empty() || pyramids.len() != x_rp.len() {
        return Err(Error::Dim("reference count mismatch".into()));
    }
    let n_refs = x_rp.len();
    let d = cfg.selector_dim as f64;
    let mut fine = Vec::with_capacity(pyramids[0].len());
    for level in 0..pyramids[0].len() {
        let shape = pyramids[0][level].shape();
        let (c_f, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        if n_refs * hw * hw > FULL_ATTENTION_CELL_LIMIT {
            return Err(Error::Config(format!(
                "full attention map of {} cells exceeds limit {}",
                n_refs * hw * hw,
                FULL_ATTENTION_CELL_LIMIT
            )));
        }
        let pos = sinusoidal_pos_enc(h, w, x_p.shape()[0])?;
        let xp_r = bilinear_resize(x_p, h, w)?;
        let q = project_pose(store, cfg, &xp_r, &pos, "ppa.selector.q_norm", "ppa.selector.q_proj")?;
        let mut key_rows = Vec::with_capacity(n_refs);
        for r in x_rp {
            let rr = bilinear_resize(r, h, w)?;
            key_rows.push(project_pose(
                store,
                cfg,
                &rr,
                &pos,
                "ppa.selector.k_norm",
                "ppa.selector.k_proj",
            )?);
        }
        let keys = crate::tensor::concat0(&key_rows.iter().collect::<Vec<_>>())?;
        let kt = transpose(&keys);
        let mut logits = matmul(&q, &kt)?;
        let s = 1.0 / d.sqrt();
        for v in logits.data_mut() {
            *v *= s;
        }
        let attn = softmax(&logits, 1)?; // [hw, n_refs*hw], rows sum to 1

        // proto[cell n] = sum over (ref k, cell n') of A[n, (k, n')] * feat.
        let mut feat_tokens = Vec::with_capacity(n_refs);
        for pyr in pyramids {
            feat_tokens.push(to_tokens(&pyr[level])?);
        }
        let feats = crate::tensor::concat0(&feat_tokens.iter().collect::<Vec<_>>())?;
        let proto_tokens = matmul(&attn, &feats)?;
        let proto = from_tokens(&proto_tokens, h, w)?;
        debug_assert_eq!(proto.shape(), &[c_f, h, w]);
        fine.push(proto);
    }
    let pooled = pose_aware_selector(store, cfg, x_p, x_rp)?;
    Ok(PrototypeStack {
        fine,
        global: aggregate_global(&pooled, x_refs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refenc::{
        create_global_encoder, create_reference_encoder, encode_global, reference_forward,
        LatentCodec,
    };
    use crate::synthworld::{make_turning_clip, render_pose_map};

    fn cfg() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            base_channels: 8,
            heads: 2,
            selector_dim: 16,
            global_dim: 16,
            pose_channels: [4, 8, 8],
            ..Default::default()
        }
    }

    fn store_all(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let rng = Rng::new(seed);
        let mut s = ParamStore::new();
        create_selector(&mut s, cfg, &rng).unwrap();
        create_global_encoder(&mut s, cfg, &rng).unwrap();
        create_reference_encoder(&mut s, cfg, &rng).unwrap();
        crate::poseflow::create_pose_encoder(&mut s, cfg, &rng).unwrap();
        s
    }

    fn pose_features(store: &ParamStore, clip: &crate::synthworld::SceneClip, idx: &[usize]) -> Vec<Tensor> {
        idx.iter()
            .map(|&i| {
                let map = render_pose_map(&clip.keypoints[i], clip.resolution);
                crate::poseflow::encode_pose(store, &map).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_reference_map_is_one() {
        let cfg = cfg();
        let store = store_all(&cfg, 1);
        let clip = make_turning_clip(2, 4, 32, 0.5).unwrap();
        let feats = pose_features(&store, &clip, &[0, 1]);
        let m = pose_aware_selector(&store, &cfg, &feats[0], &feats[1..2]).unwrap();
        for v in m.map.data() {
            assert_eq!(*v, 1.0);
        }
        assert_eq!(m.scores, vec![1.0]);
    }

    #[test]
    fn identical_references_uniform_map() {
        let cfg = cfg();
        let store = store_all(&cfg, 2);
        let clip = make_turning_clip(3, 4, 32, 0.5).unwrap();
        let feats = pose_features(&store, &clip, &[0, 1]);
        let refs = vec![feats[1].clone(), feats[1].clone(), feats[1].clone()];
        let m = pose_aware_selector(&store, &cfg, &feats[0], &refs).unwrap();
        for v in m.map.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        for s in &m.scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn map_cells_sum_to_one_and_permute() {
        let cfg = cfg();
        let store = store_all(&cfg, 3);
        let clip = make_turning_clip(4, 6, 32, 0.9).unwrap();
        let feats = pose_features(&store, &clip, &[0, 1, 3, 5]);
        let refs = vec![feats[1].clone(), feats[2].clone(), feats[3].clone()];
        let m = pose_aware_selector(&store, &cfg, &feats[0], &refs).unwrap();
        let (n, h, w) = (m.map.shape()[0], m.map.shape()[1], m.map.shape()[2]);
        for p in 0..h * w {
            let sum: f64 = (0..n).map(|k| m.map.data()[k * h * w + p]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert!((m.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let perm_refs = vec![feats[3].clone(), feats[1].clone(), feats[2].clone()];
        let mp = pose_aware_selector(&store, &cfg, &feats[0], &perm_refs).unwrap();
        let hw = h * w;
        for p in 0..hw {
            assert!((mp.map.data()[p] - m.map.data()[2 * hw + p]).abs() < 1e-15);
            assert!((mp.map.data()[hw + p] - m.map.data()[p]).abs() < 1e-15);
            assert!((mp.map.data()[2 * hw + p] - m.map.data()[hw + p]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = cfg();
        let store = store_all(&cfg, 4);
        let a = Tensor::zeros(&[192, 4, 4]);
        let b = Tensor::zeros(&[192, 8, 8]);
        assert!(pose_aware_selector(&store, &cfg, &a, &[b]).is_err());
    }

    fn build_pyramids(
        store: &ParamStore,
        cfg: &ModelConfig,
        clip: &crate::synthworld::SceneClip,
        idx: &[usize],
    ) -> (Vec<RefPyramid>, Vec<Tensor>) {
        let codec = LatentCodec::new(cfg.codec_block);
        let z: Vec<Tensor> = idx
            .iter()
            .map(|&i| codec.encode(&clip.frames[i]).unwrap())
            .collect();
        let g: Vec<Tensor> = idx
            .iter()
            .map(|&i| encode_global(store, &clip.frames[i]).unwrap())
            .collect();
        let pyr = reference_forward(store, cfg, &z, &g).unwrap();
        (pyr, g)
    }

    #[test]
    fn single_reference_prototypes_are_exact() {
        let cfg = cfg();
        let store = store_all(&cfg, 5);
        let clip = make_turning_clip(6, 4, 32, 0.5).unwrap();
        let feats = pose_features(&store, &clip, &[0, 2]);
        let (pyr, g) = build_pyramids(&store, &cfg, &clip, &[2]);
        let m = pose_aware_selector(&store, &cfg, &feats[0], &feats[1..2]).unwrap();
        let proto = aggregate_prototypes(&m, &pyr, &g).unwrap();
        for level in 0..4 {
            assert_eq!(proto.fine[level], pyr[0][level], "level {level}");
        }
        assert_eq!(proto.global, g[0]);
    }

    #[test]
    fn identical_references_give_shared_feature() {
        let cfg = cfg();
        let store = store_all(&cfg, 6);
        let clip = make_turning_clip(7, 4, 32, 0.5).unwrap();
        let feats = pose_features(&store, &clip, &[0, 2]);
        let (pyr_one, g_one) = build_pyramids(&store, &cfg, &clip, &[2]);
        let pyr = vec![pyr_one[0].clone(), pyr_one[0].clone(), pyr_one[0].clone()];
        let g = vec![g_one[0].clone(), g_one[0].clone(), g_one[0].clone()];
        let refs = vec![feats[1].clone(), feats[1].clone(), feats[1].clone()];
        let m = pose_aware_selector(&store, &cfg, &feats[0], &refs).unwrap();
        let proto = aggregate_prototypes(&m, &pyr, &g).unwrap();
        for level in 0..4 {
            assert!(
                proto.fine[level].max_abs_diff(&pyr_one[0][level]) < 1e-12,
                "level {level}"
            );
        }
        assert!(proto.global.max_abs_diff(&g_one[0]) < 1e-12);
    }

    #[test]
    fn fine_aggregation_matches_loop_oracle() {
        let cfg = cfg();
        let store = store_all(&cfg, 7);
        let clip = make_turning_clip(8, 6, 32, 0.7).unwrap();
        let feats = pose_features(&store, &clip, &[0, 1, 4]);
        let (pyr, _g) = build_pyramids(&store, &cfg, &clip, &[1, 4]);
        let m = pose_aware_selector(&store, &cfg, &feats[0], &feats[1..3]).unwrap();
        for level in 0..4 {
            let got = aggregate_fine(&m, &pyr, level).unwrap();
            let shape = pyr[0][level].shape();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let weights = resize_map(&m, h, w).unwrap();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for k in 0..2 {
                            acc += pyr[k][level].at(&[ch, y, x]) * weights.at(&[k, y, x]);
                        }
                        assert!((got.at(&[ch, y, x]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn global_aggregation_matches_dot_oracle() {
        let cfg = cfg();
        let store = store_all(&cfg, 8);
        let clip = make_turning_clip(9, 6, 32, 0.7).unwrap();
        let feats = pose_features(&store, &clip, &[0, 1, 4]);
        let (_p, g) = build_pyramids(&store, &cfg, &clip, &[1, 4]);
        let m = pose_aware_selector(&store, &cfg, &feats[0], &feats[1..3]).unwrap();
        let got = aggregate_global(&m, &g).unwrap();
        for i in 0..g[0].len() {
            let expect = m.scores[0] * g[0].data()[i] + m.scores[1] * g[1].data()[i];
            assert!((got.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn convexity_bounds_hold() {
        let cfg = cfg();
        let store = store_all(&cfg, 9);
        let clip = make_turning_clip(10, 6, 32, 0.7).unwrap();
        let feats = pose_features(&store, &clip, &[0, 1, 4]);
        let (pyr, _g) = build_pyramids(&store, &cfg, &clip, &[1, 4]);
        let m = pose_aware_selector(&store, &cfg, &feats[0], &feats[1..3]).unwrap();
        for level in 0..4 {
            let got = aggregate_fine(&m, &pyr, level).unwrap();
            for i in 0..got.len() {
                let a = pyr[0][level].data()[i];
                let b = pyr[1][level].data()[i];
                let lo = a.min(b) - 1e-9;
                let hi = a.max(b) + 1e-9;
                assert!(got.data()[i] >= lo && got.data()[i] <= hi);
            }
        }
    }

    #[test]
    fn full_attention_matches_pooled_on_constant_inputs() {
        let cfg = cfg();
        let store = store_all(&cfg, 10);
        // One reference with constant features: both paths return the constant.
        let xp = Tensor::full(&[192, 4, 4], 0.3);
        let xrp = vec![Tensor::full(&[192, 4, 4], 0.1)];
        let sizes = cfg.level_sizes();
        let chans = cfg.level_channels();
        let pyr: Vec<RefPyramid> = vec![(0..4)
            .map(|j| Tensor::full(&[chans[j], sizes[j], sizes[j]], 0.7))
            .collect()];
        let g = vec![Tensor::full(&[16], 0.2)];
        let full = full_attention_aggregate(&store, &cfg, &xp, &xrp, &pyr, &g).unwrap();
        let m = pose_aware_selector(&store, &cfg, &xp, &xrp).unwrap();
        let pooled = aggregate_prototypes(&m, &pyr, &g).unwrap();
        for level in 0..4 {
            assert!(full.fine[level].max_abs_diff(&pooled.fine[level]) < 1e-12);
            assert_eq!(full.fine[level].shape(), pooled.fine[level].shape());
        }
    }

    #[test]
    fn full_attention_differs_on_structured_case() {
        let cfg = cfg();
        let store = store_all(&cfg, 11);
        let clip = make_turning_clip(12, 6, 32, 0.7).unwrap();
        let feats = pose_features(&store, &clip, &[0, 1, 4]);
        let (pyr, g) = build_pyramids(&store, &cfg, &clip, &[1, 4]);
        let full =
            full_attention_aggregate(&store, &cfg, &feats[0], &feats[1..3], &pyr, &g).unwrap();
        let m = pose_aware_selector(&store, &cfg, &feats[0], &feats[1..3]).unwrap();
        let pooled = aggregate_prototypes(&m, &pyr, &g).unwrap();
        let mut gap = 0.0;
        for level in 0..4 {
            gap += full.fine[level].sub(&pooled.fine[level]).unwrap().sq_norm();
        }
        assert!(gap > 0.0);
    }

    #[test]
    fn full_attention_memory_guard() {
        let cfg = ModelConfig {
            resolution: 64,
            ..cfg()
        };
        let store = store_all(&cfg, 12);
        let xp = Tensor::zeros(&[192, 8, 8]);
        let xrp = vec![Tensor::zeros(&[192, 8, 8]); 2];
        // A 64x64 level puts 2 * 4096^2 > 2^24 cells on the attention map.
        let pyr: Vec<RefPyramid> = vec![
            vec![Tensor::zeros(&[1, 64, 64])],
            vec![Tensor::zeros(&[1, 64, 64])],
        ];
        let g = vec![Tensor::zeros(&[16]); 2];
        let err = full_attention_aggregate(&store, &cfg, &xp, &xrp, &pyr, &g);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
