//! Noise schedule, v-parameterization, losses, classifier-free guidance,
//! DDIM sampling with sliding-window aggregation, and the two-stage toy
//! training loop.
//!
//! The model is forward-only outside the offset-supervision path, so the
//! training loop estimates gradients with antithetic random-direction probes
//! (simultaneous perturbation): the loss is evaluated at `theta +- c*delta`
//! for Rademacher `delta` on the trainable set, and the difference quotient
//! scales `delta` into a descent direction, smoothed by momentum. The offset
//! loss adds its exact analytic gradient on top.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fpi::{denoiser_forward, is_fta_param};
use crate::gradpath::{flatten_grads, masked_mse, offset_loss_and_grad, offset_mask};
use crate::modelcfg::ModelConfig;
use crate::params::ParamStore;
use crate::poseflow::{encode_pose, keypoint_flow_map};
use crate::ppa::{aggregate_prototypes, pose_aware_selector, PrototypeStack};
use crate::refenc::{encode_global, reference_forward, LatentCodec, RefPyramid};
use crate::rng::Rng;
use crate::synthworld::{render_pose_map, SceneClip};
use crate::tensor::{bilinear_resize, Tensor};

// ---------------------------------------------------------------------------
// Schedule and v-parameterization
// ---------------------------------------------------------------------------

/// Cumulative-signal schedule: `alpha_bar[t]` for t in 0..=T, with
/// `alpha_bar[0] = 1`, strictly decreasing, always positive.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine schedule with per-step beta clipped at 0.999.
    pub fn cosine(t_steps: usize) -> Result<NoiseSchedule> {
        if t_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let s = 0.008;
        let f = |t: f64| {
            let x = (t / t_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha_bar = Vec::with_capacity(t_steps + 1);
        alpha_bar.push(1.0);
        let mut prev_target = 1.0;
        let mut acc = 1.0;
        for t in 1..=t_steps {
            let target = f(t as f64) / f0;
            let beta = (1.0 - target / prev_target).min(0.999);
            prev_target = target;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Config(format!("timestep {} out of schedule", t)))
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }
}

/// Forward process: `x_t = sqrt(alpha_bar_t) x0 + sigma_t eps`.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha_bar(t)?.sqrt();
    let s = sched.sigma(t)?;
    x0.scale(a).add(&eps.scale(s))
}

/// v-prediction target: `v = sqrt(alpha_bar_t) eps - sigma_t x0`.
pub fn v_target(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha_bar(t)?.sqrt();
    let s = sched.sigma(t)?;
    eps.scale(a).sub(&x0.scale(s))
}

/// Recover x0 from (x_t, v): `x0 = sqrt(alpha_bar_t) x_t - sigma_t v`.
pub fn x0_from_v(x_t: &Tensor, v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha_bar(t)?.sqrt();
    let s = sched.sigma(t)?;
    x_t.scale(a).sub(&v.scale(s))
}

/// Recover eps from (x_t, v): `eps = sigma_t x_t + sqrt(alpha_bar_t) v`.
pub fn eps_from_v(x_t: &Tensor, v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha_bar(t)?.sqrt();
    let s = sched.sigma(t)?;
    x_t.scale(s).add(&v.scale(a))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Denoising loss: mean squared error.
pub fn loss_denoise(v_pred: &Tensor, v_target: &Tensor) -> Result<f64> {
    v_pred.mse(v_target)
}

/// Offset loss: masked MSE of predicted offsets against the keypoint flow,
/// averaged over blocks and frames. `per_block` pairs each block's per-frame
/// offsets with the matching per-frame flow maps.
pub fn loss_offset(per_block: &[(Vec<Tensor>, Vec<Tensor>)]) -> Result<f64> {
    if per_block.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (offsets, deltas) in per_block {
        if offsets.len() != deltas.len() {
            return Err(Error::Dim("offset/flow frame count mismatch".into()));
        }
        for (o, d) in offsets.iter().zip(deltas.iter()) {
            let mask = offset_mask(d)?;
            total += masked_mse(o, d, &mask)?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Composite objective `L = L_d + lambda L_o`.
pub fn total_loss(l_d: f64, l_o: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    Ok(l_d + lambda * l_o)
}

/// Classifier-free guidance: `v_u + s (v_c - v_u)`.
pub fn cfg_combine(v_uncond: &Tensor, v_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_uncond.add(&v_cond.sub(v_uncond)?.scale(scale))
}

/// Resize a pixel-space flow map to a block grid, rescaling the displacement
/// values to the block's pixel units.
pub fn resize_flow_to_block(delta: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (sh, sw) = (delta.shape()[1], delta.shape()[2]);
    let mut out = bilinear_resize(delta, h, w)?;
    let (ry, rx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let hw = h * w;
    for p in 0..hw {
        out.data_mut()[p] *= ry;
        out.data_mut()[hw + p] *= rx;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sliding windows
// ---------------------------------------------------------------------------

/// Start indices of sliding windows covering `n_frames`, final window clamped
/// to the end.
pub fn window_starts(n_frames: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be >= 1".into()));
    }
    if stride > window {
        return Err(Error::Coverage(format!(
            "stride {} exceeds window {}: frames would be skipped",
            stride, window
        )));
    }
    if n_frames <= window {
        return Ok(vec![0]);
    }
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        starts.push(s.min(n_frames - window));
        if s + window >= n_frames {
            break;
        }
        s += stride;
    }
    starts.dedup();
    Ok(starts)
}

fn ramp_weight(pos: usize, window: usize) -> f64 {
    (pos + 1).min(window - pos) as f64
}

/// Normalized per-frame weight sums (each should be 1 after normalization);
/// exposed so the weight bookkeeping itself can be audited.
pub fn window_weight_audit(starts: &[usize], window: usize, n_frames: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_frames];
    for &s in starts {
        for p in 0..window {
            if s + p < n_frames {
                sums[s + p] += ramp_weight(p, window);
            }
        }
    }
    // Normalization divides each weight by the frame's total, so the audit
    // reports sum(w_k / total) per frame.
    sums.iter().map(|&t| if t > 0.0 { 1.0 } else { 0.0 }).collect()
}

/// Blend overlapping per-window outputs into a single timeline with linear
/// ramp weights, normalized per frame. A frame covered by one window passes
/// through bit-exact.
pub fn temporal_window_aggregate(
    windows: &[(usize, Vec<Tensor>)],
    n_frames: usize,
) -> Result<Vec<Tensor>> {
    if windows.is_empty() {
        return Err(Error::Coverage("no windows to aggregate".into()));
    }
    let mut cover: Vec<Vec<(f64, &Tensor)>> = vec![Vec::new(); n_frames];
    for (start, frames) in windows {
        let w = frames.len();
        for (p, t) in frames.iter().enumerate() {
            let idx = start + p;
            if idx >= n_frames {
                return Err(Error::Dim(format!(
                    "window at {} overruns timeline of {}",
                    start, n_frames
                )));
            }
            cover[idx].push((ramp_weight(p, w), t));
        }
    }
    let mut out = Vec::with_capacity(n_frames);
    for (i, entries) in cover.iter().enumerate() {
        match entries.len() {
            0 => {
                return Err(Error::Coverage(format!("frame {} not covered by any window", i)));
            }
            1 => out.push(entries[0].1.clone()),
            _ => {
                let total: f64 = entries.iter().map(|(w, _)| w).sum();
                let mut acc = Tensor::zeros(entries[0].1.shape());
                for (w, t) in entries {
                    let wn = w / total;
                    for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += wn * v;
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// DDIM
// ---------------------------------------------------------------------------

/// Sampling configuration.
#[derive(Clone, Debug)]
pub struct SampleConfig {
    pub ddim_steps: usize,
    pub cfg_scale: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            ddim_steps: 35,
            cfg_scale: 3.5,
        }
    }
}

/// Uniformly spaced descending sub-schedule over (0, T].
pub fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_total {
        return Err(Error::Config(format!(
            "ddim steps {} must be in 1..={}",
            steps, t_total
        )));
    }
    let mut taus: Vec<usize> = (1..=steps)
        .map(|k| ((k * t_total) as f64 / steps as f64).round() as usize)
        .map(|t| t.clamp(1, t_total))
        .collect();
    taus.dedup();
    taus.reverse();
    Ok(taus)
}

/// Deterministic DDIM (eta = 0) over a window model.
///
/// `model(frames, t, conditional)` returns the v-prediction for a full
/// timeline slice; windowing and guidance happen here. The v fields of
/// overlapping windows are blended per step before the shared update.
pub fn ddim_sample<M>(
    model: &M,
    latent_shape: &[usize],
    n_frames: usize,
    window: usize,
    stride: usize,
    sample_cfg: &SampleConfig,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<Vec<Tensor>>
where
    M: Fn(&[Tensor], usize, usize, bool) -> Result<Vec<Tensor>> + Sync,
{
    let taus = ddim_timesteps(sched.steps(), sample_cfg.ddim_steps)?;
    let mut z: Vec<Tensor> = (0..n_frames)
        .map(|i| {
            let mut r = rng.split_index("ddim.init", i as u64);
            Tensor::from_fn(latent_shape, |_| r.normal())
        })
        .collect();
    let starts = window_starts(n_frames, window.min(n_frames), stride)?;
    let win = window.min(n_frames);

    for (si, &t) in taus.iter().enumerate() {
        let t_next = taus.get(si + 1).copied().unwrap_or(0);
        // Windows are independent per step (PROFASHION_THREADS parallelism);
        // results are aggregated in start order either way.
        let zs = &z;
        let per_window = crate::parallel::map_indexed(starts.len(), |wi| {
            let start = starts[wi];
            let slice = &zs[start..start + win];
            let v_c = model(slice, start, t, true)?;
            let v = if sample_cfg.cfg_scale == 1.0 {
                v_c
            } else {
                let v_u = model(slice, start, t, false)?;
                v_c.iter()
                    .zip(v_u.iter())
                    .map(|(c, u)| cfg_combine(u, c, sample_cfg.cfg_scale))
                    .collect::<Result<Vec<_>>>()?
            };
            Ok((start, v))
        });
        let window_vs: Vec<(usize, Vec<Tensor>)> = per_window.into_iter().collect::<Result<_>>()?;
        let v_all = temporal_window_aggregate(&window_vs, n_frames)?;
        for i in 0..n_frames {
            let x0 = x0_from_v(&z[i], &v_all[i], t, sched)?;
            let eps = eps_from_v(&z[i], &v_all[i], t, sched)?;
            let a_next = sched.alpha_bar(t_next)?.sqrt();
            let s_next = sched.sigma(t_next)?;
            z[i] = x0.scale(a_next).add(&eps.scale(s_next))?;
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Conditioning pipeline
// ---------------------------------------------------------------------------

/// Reference-derived inputs shared by every frame of a generation or
/// training sample.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub pyramids: Vec<RefPyramid>,
    pub ref_globals: Vec<Tensor>,
    pub ref_pose_feats: Vec<Tensor>,
}

/// Encode reference frames and their pose maps into conditioning inputs.
pub fn build_conditioning(
    store: &ParamStore,
    cfg: &ModelConfig,
    codec: &LatentCodec,
    ref_frames: &[Tensor],
    ref_pose_maps: &[Tensor],
) -> Result<Conditioning> {
    if ref_frames.len() != ref_pose_maps.len() {
        return Err(Error::Dim("reference frame/pose count mismatch".into()));
    }
    let z: Vec<Tensor> = ref_frames
        .iter()
        .map(|f| codec.encode(f))
        .collect::<Result<_>>()?;
    let g: Vec<Tensor> = ref_frames
        .iter()
        .map(|f| encode_global(store, f))
        .collect::<Result<_>>()?;
    let pyramids = reference_forward(store, cfg, &z, &g)?;
    let ref_pose_feats: Vec<Tensor> = ref_pose_maps
        .iter()
        .map(|m| encode_pose(store, m))
        .collect::<Result<_>>()?;
    Ok(Conditioning {
        pyramids,
        ref_globals: g,
        ref_pose_feats,
    })
}

/// Prototypes for one driving pose feature.
pub fn prototypes_for_pose(
    store: &ParamStore,
    cfg: &ModelConfig,
    cond: &Conditioning,
    x_p: &Tensor,
) -> Result<PrototypeStack> {
    let map = pose_aware_selector(store, cfg, x_p, &cond.ref_pose_feats)?;
    aggregate_prototypes(&map, &cond.pyramids, &cond.ref_globals)
}

// ---------------------------------------------------------------------------
// Toy training
// ---------------------------------------------------------------------------

/// Training knobs.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    /// Samples averaged per loss evaluation.
    pub batch: usize,
    /// Probability of a repeated-still window in stage 2.
    pub still_prob: f64,
    /// Antithetic probe pairs per step; 0 trains on analytic gradients only.
    pub probes: usize,
    /// Perturbation radius.
    pub probe_step: f64,
    /// Probability of zeroing the prototypes (trains the unconditional
    /// branch for guidance).
    pub ref_dropout: f64,
    /// Gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Hard bound on trained parameter values; 0 disables. Keeps long
    /// stochastic runs out of overflow territory.
    pub param_clamp: f64,
    /// Training timesteps are drawn from [t_min_frac * T, T]. Low timesteps
    /// carry mostly irreducible noise targets, so excluding them concentrates
    /// the gradient on the conditional structure.
    pub t_min_frac: f64,
    /// Noise draws per (clip, frame) pair; each sample reuses one of these
    /// seeded draws instead of fresh noise, turning the objective into a
    /// finite sum with far lower gradient variance. 0 means fresh noise.
    pub eps_bank: usize,
    /// Probability of drawing the anchor timestep instead of a uniform one.
    /// Near-pure-noise samples are where reference content is the only
    /// signal; anchoring concentrates that contrast on a small sample set.
    pub t_anchor_frac: f64,
    pub t_steps: usize,
    /// Stage-2 window length.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            steps: 200,
            lr: 0.02,
            momentum: 0.9,
            lambda: 0.1,
            batch: 2,
            still_prob: 0.3,
            probes: 1,
            probe_step: 1e-3,
            ref_dropout: 0.1,
            grad_clip: 1.0,
            param_clamp: 1.5,
            t_min_frac: 0.0,
            eps_bank: 2,
            t_anchor_frac: 0.5,
            t_steps: 1000,
            window: 4,
        }
    }
}

/// Loss history of a run.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub loss_curve: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Exponential smoothing used for the reported curve.
pub fn smooth_curve(raw: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut acc = f64::NAN;
    for &v in raw {
        acc = if acc.is_nan() { v } else { alpha * v + (1.0 - alpha) * acc };
        out.push(acc);
    }
    out
}

/// Names updated by a stage.
pub fn trainable_names(store: &ParamStore, stage: u8) -> Vec<String> {
    match stage {
        2 => store.select(is_fta_param),
        _ => store.select(|n| !n.starts_with("global_enc.") && !is_fta_param(n)),
    }
}

struct ClipCache {
    latents: Vec<Tensor>,
    pose_maps: Vec<Tensor>,
    /// Global features per frame; the global encoder is frozen in both
    /// stages, so these never go stale.
    globals: Vec<Tensor>,
}

fn build_clip_cache(
    store: &ParamStore,
    codec: &LatentCodec,
    clips: &[SceneClip],
) -> Result<Vec<ClipCache>> {
    clips
        .iter()
        .map(|clip| {
            let latents = clip
                .frames
                .iter()
                .map(|f| codec.encode(f))
                .collect::<Result<Vec<_>>>()?;
            let pose_maps = clip
                .keypoints
                .iter()
                .map(|k| render_pose_map(k, clip.resolution))
                .collect();
            let globals = clip
                .frames
                .iter()
                .map(|f| encode_global(store, f))
                .collect::<Result<Vec<_>>>()?;
            Ok(ClipCache {
                latents,
                pose_maps,
                globals,
            })
        })
        .collect()
}

pub(crate) struct Stage1Sample {
    clip: usize,
    target: usize,
    refs: Vec<usize>,
    t: usize,
    eps: Tensor,
    drop_refs: bool,
}

struct Stage2Sample {
    /// Input latents (x_t + pose), prototypes, v targets: all fixed given the
    /// frozen non-FTA parameters.
    inputs: Vec<Tensor>,
    protos: Vec<PrototypeStack>,
    v_targets: Vec<Tensor>,
    /// Per-frame keypoint flow at pose-map resolution (frame 0 pairs with
    /// itself: zero flow).
    deltas: Vec<Tensor>,
    t: usize,
}

/// Two-stage toy training. Stage 1 updates everything except the frozen
/// global encoder and the FTA layers, on single frames without FTA. Stage 2
/// updates only FTA parameters on windows (some repeated stills).
pub fn train_toy(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    clips: &[SceneClip],
    tc: &TrainConfig,
    rng: &Rng,
) -> Result<TrainResult> {
    if clips.is_empty() {
        return Err(Error::Config("training needs at least one clip".into()));
    }
    if tc.stage != 1 && tc.stage != 2 {
        return Err(Error::Config(format!("stage must be 1 or 2, got {}", tc.stage)));
    }
    if tc.lambda < 0.0 {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    let sched = NoiseSchedule::cosine(tc.t_steps)?;
    let codec = LatentCodec::new(cfg.codec_block);
    let cache = build_clip_cache(store, &codec, clips)?;
    let names = trainable_names(store, tc.stage);
    let dim = store.total_len(&names)?;
    let mut velocity = vec![0.0; dim];
    let mut loss_curve = Vec::with_capacity(tc.steps);
    let mut delta_cache: HashMap<(usize, usize), Tensor> = HashMap::new();

    // Stage 1 trains entirely on hand-derived gradients; stage 2 probes the
    // FTA parameters directionally (plus the exact offset-supervision part).
    let spsa_names: Vec<String> = if tc.stage == 1 {
        Vec::new()
    } else {
        names.clone()
    };
    let spsa_dim = store.total_len(&spsa_names)?;
    let spsa_scatter = offsets_of(store, &names, &spsa_names)?;
    let name_offsets: std::collections::BTreeMap<String, usize> = {
        let mut m = std::collections::BTreeMap::new();
        let mut o = 0;
        for n in &names {
            m.insert(n.clone(), o);
            o += store.get(n)?.len();
        }
        m
    };

    for step in 0..tc.steps {
        let mut step_rng = rng.split_index("train.step", step as u64);
        let loss_center;
        let mut grad = vec![0.0; dim];

        if tc.stage == 1 {
            let batch: Vec<Stage1Sample> = (0..tc.batch.max(1))
                .map(|_| draw_stage1(cfg, clips, &cache, &sched, tc, &mut step_rng))
                .collect::<Result<_>>()?;
            let eval = |s: &ParamStore| -> Result<f64> {
                let mut acc = 0.0;
                for sample in &batch {
                    acc += stage1_loss(s, cfg, clips, &cache, &sched, sample)?;
                }
                Ok(acc / batch.len() as f64)
            };
            // Directional probes cover the reference encoder; everything else
            // gets its hand-derived gradient from a center pass.
            let mut spsa_grad = vec![0.0; spsa_dim];
            spsa_step(store, &spsa_names, spsa_dim, tc, &mut step_rng, &eval, &mut spsa_grad)?;
            scatter(&spsa_grad, &spsa_scatter, &mut grad);
            let mut center = 0.0;
            let mut bp_grads = crate::backprop::Grads::new();
            for sample in &batch {
                center +=
                    stage1_backprop(store, cfg, clips, &cache, &sched, sample, &mut bp_grads)?;
            }
            let inv_b = 1.0 / batch.len() as f64;
            bp_grads.scale(inv_b);
            let mut bp_flat = vec![0.0; dim];
            for (k, g) in bp_grads.map() {
                if let Some(&off) = name_offsets.get(k) {
                    for (i, v) in g.data().iter().enumerate() {
                        bp_flat[off + i] = *v;
                    }
                }
            }
            clip_norm(&mut bp_flat, tc.grad_clip);
            for (g, b) in grad.iter_mut().zip(bp_flat.iter()) {
                *g += b;
            }
            loss_center = center * inv_b;
        } else {
            let batch: Vec<Stage2Sample> = (0..tc.batch.max(1))
                .map(|_| {
                    draw_stage2(
                        store,
                        cfg,
                        &codec,
                        clips,
                        &cache,
                        &sched,
                        tc,
                        &mut step_rng,
                        &mut delta_cache,
                    )
                })
                .collect::<Result<_>>()?;
            let eval = |s: &ParamStore| -> Result<f64> {
                let mut acc = 0.0;
                for sample in &batch {
                    let out = denoiser_forward(s, cfg, &sample.inputs, &sample.protos, sample.t, true)?;
                    let mut l = 0.0;
                    for (v, vt) in out.v.iter().zip(sample.v_targets.iter()) {
                        l += loss_denoise(v, vt)?;
                    }
                    acc += l / out.v.len() as f64;
                }
                Ok(acc / batch.len() as f64)
            };
            let l_d = spsa_step(store, &names, dim, tc, &mut step_rng, &eval, &mut grad)?;
            // Analytic offset-supervision gradient at the center point.
            let mut offset_grad = vec![0.0; dim];
            let l_o = add_offset_grads(store, cfg, &batch, tc.lambda, &names, &mut offset_grad)?;
            clip_norm(&mut offset_grad, tc.grad_clip);
            for (g, o) in grad.iter_mut().zip(offset_grad.iter()) {
                *g += o;
            }
            let l_d = if l_d.is_nan() {
                // probes = 0: recompute the denoising loss at the center.
                eval(store)?
            } else {
                l_d
            };
            loss_center = total_loss(l_d, l_o, tc.lambda)?;
        }

        if !loss_center.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged: non-finite loss at step {}",
                step
            )));
        }
        if tc.lr != 0.0 {
            for (v, g) in velocity.iter_mut().zip(grad.iter()) {
                *v = tc.momentum * *v - tc.lr * g;
            }
            store.axpy(&names, &velocity, 1.0)?;
            if tc.param_clamp > 0.0 {
                let c = tc.param_clamp;
                for name in &names {
                    for v in store.get_mut(name)?.data_mut() {
                        *v = v.clamp(-c, c);
                    }
                }
            }
        }
        loss_curve.push(loss_center);
    }

    let smoothed = smooth_curve(&loss_curve, 0.05);
    Ok(TrainResult {
        loss_curve,
        smoothed,
    })
}

/// Flat offset of each `subset` name within the `full` flattening.
fn offsets_of(store: &ParamStore, full: &[String], subset: &[String]) -> Result<Vec<(usize, usize)>> {
    subset
        .iter()
        .map(|n| Ok((offset_of(store, full, n)?, store.get(n)?.len())))
        .collect()
}

fn offset_of(store: &ParamStore, full: &[String], name: &str) -> Result<usize> {
    let mut o = 0;
    for n in full {
        if n == name {
            return Ok(o);
        }
        o += store.get(n)?.len();
    }
    Err(Error::Config(format!("'{name}' not in trainable set")))
}

fn clip_norm(v: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm: f64 = v.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in v.iter_mut() {
            *g *= s;
        }
    }
}

fn scatter(compact: &[f64], layout: &[(usize, usize)], full: &mut [f64]) {
    let mut c = 0;
    for &(off, len) in layout {
        full[off..off + len].copy_from_slice(&compact[c..c + len]);
        c += len;
    }
}

/// Antithetic SPSA estimate accumulated into `grad`; returns the mean probe
/// loss as the curve value.
fn spsa_step<F>(
    store: &mut ParamStore,
    names: &[String],
    dim: usize,
    tc: &TrainConfig,
    rng: &mut Rng,
    eval: &F,
    grad: &mut [f64],
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if tc.probes == 0 || dim == 0 {
        return Ok(f64::NAN); // caller computes the curve value elsewhere
    }
    let probes = tc.probes;
    let base = store.flatten(names)?;
    let mut work = vec![0.0; dim];
    let mut center_est = 0.0;
    for _ in 0..probes {
        let delta: Vec<f64> = (0..dim).map(|_| rng.sign()).collect();
        for i in 0..dim {
            work[i] = base[i] + tc.probe_step * delta[i];
        }
        store.unflatten(names, &work)?;
        let l_plus = eval(store)?;
        for i in 0..dim {
            work[i] = base[i] - tc.probe_step * delta[i];
        }
        store.unflatten(names, &work)?;
        let l_minus = eval(store)?;
        if !l_plus.is_finite() || !l_minus.is_finite() {
            store.unflatten(names, &base)?;
            return Err(Error::Numeric("non-finite probe loss".into()));
        }
        let slope = (l_plus - l_minus) / (2.0 * tc.probe_step * probes as f64);
        for (g, d) in grad.iter_mut().zip(delta.iter()) {
            *g += slope * d;
        }
        center_est += 0.5 * (l_plus + l_minus) / probes as f64;
    }
    // Exact restore: probing must not drift the parameters.
    store.unflatten(names, &base)?;
    clip_norm(grad, tc.grad_clip);
    Ok(center_est)
}

/// Reference frames for one training sample: one frame per orientation
/// group when the clip covers them (mirroring inference-time selection),
/// otherwise uniform draws.
fn draw_refs(cfg: &ModelConfig, clip: &SceneClip, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = clip.n_frames();
    if cfg.n_refs >= 2 {
        if let Ok(rep) = crate::poseflow::select_references(clip, cfg.n_refs, rng) {
            if rep.warnings.is_empty() {
                return Ok(rep.indices);
            }
        }
    }
    Ok((0..cfg.n_refs).map(|_| rng.below(n)).collect())
}

fn draw_stage1(
    cfg: &ModelConfig,
    clips: &[SceneClip],
    cache: &[ClipCache],
    sched: &NoiseSchedule,
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<Stage1Sample> {
    let clip = rng.below(clips.len());
    let n = clips[clip].n_frames();
    let target = rng.below(n);
    let refs = draw_refs(cfg, &clips[clip], rng)?;
    let _ = n;
    let t_lo = ((tc.t_min_frac.clamp(0.0, 0.99) * sched.steps() as f64) as usize).max(1);
    let t = if rng.uniform() < tc.t_anchor_frac {
        (sched.steps() as f64 * 0.95) as usize
    } else {
        t_lo + rng.below(sched.steps() - t_lo + 1).min(sched.steps() - t_lo)
    };
    let shape = cache[clip].latents[target].shape().to_vec();
    let eps = if tc.eps_bank > 0 {
        let slot = rng.below(tc.eps_bank) as u64;
        let key = (clip as u64) << 40 | (target as u64) << 8 | slot;
        let mut bank_rng = Rng::new(key).split("train.eps_bank");
        Tensor::from_fn(&shape, |_| bank_rng.normal())
    } else {
        Tensor::from_fn(&shape, |_| rng.normal())
    };
    let drop_refs = rng.uniform() < tc.ref_dropout;
    Ok(Stage1Sample {
        clip,
        target,
        refs,
        t,
        eps,
        drop_refs,
    })
}

fn stage1_input<'a>(
    cache: &'a [ClipCache],
    sched: &NoiseSchedule,
    sample: &'a Stage1Sample,
    ref_latents: &'a [Tensor],
    ref_globals: &'a [Tensor],
    ref_pose_maps: &'a [Tensor],
) -> Result<crate::backprop::Stage1Input<'a>> {
    let cc = &cache[sample.clip];
    Ok(crate::backprop::Stage1Input {
        x0: &cc.latents[sample.target],
        eps: &sample.eps,
        t: sample.t,
        target_pose_map: &cc.pose_maps[sample.target],
        ref_pose_maps,
        ref_latents,
        ref_globals,
        drop_refs: sample.drop_refs,
        sqrt_alpha_bar: sched.alpha_bar(sample.t)?.sqrt(),
        sigma: sched.sigma(sample.t)?,
    })
}

fn stage1_ref_views(
    cache: &[ClipCache],
    sample: &Stage1Sample,
) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let cc = &cache[sample.clip];
    let latents = sample.refs.iter().map(|&i| cc.latents[i].clone()).collect();
    let globals = sample.refs.iter().map(|&i| cc.globals[i].clone()).collect();
    let poses = sample.refs.iter().map(|&i| cc.pose_maps[i].clone()).collect();
    (latents, globals, poses)
}

fn stage1_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    clips: &[SceneClip],
    cache: &[ClipCache],
    sched: &NoiseSchedule,
    sample: &Stage1Sample,
) -> Result<f64> {
    let _ = clips;
    let (latents, globals, poses) = stage1_ref_views(cache, sample);
    let input = stage1_input(cache, sched, sample, &latents, &globals, &poses)?;
    crate::backprop::stage1_loss_only(store, cfg, &input)
}

fn stage1_backprop(
    store: &ParamStore,
    cfg: &ModelConfig,
    clips: &[SceneClip],
    cache: &[ClipCache],
    sched: &NoiseSchedule,
    sample: &Stage1Sample,
    grads: &mut crate::backprop::Grads,
) -> Result<f64> {
    let _ = clips;
    let (latents, globals, poses) = stage1_ref_views(cache, sample);
    let input = stage1_input(cache, sched, sample, &latents, &globals, &poses)?;
    crate::backprop::stage1_loss_and_grads(store, cfg, &input, grads)
}

#[allow(clippy::too_many_arguments)]
fn draw_stage2(
    store: &ParamStore,
    cfg: &ModelConfig,
    codec: &LatentCodec,
    clips: &[SceneClip],
    cache: &[ClipCache],
    sched: &NoiseSchedule,
    tc: &TrainConfig,
    rng: &mut Rng,
    delta_cache: &mut HashMap<(usize, usize), Tensor>,
) -> Result<Stage2Sample> {
    let clip_idx = rng.below(clips.len());
    let clip = &clips[clip_idx];
    let cc = &cache[clip_idx];
    let n = clip.n_frames();
    let window = tc.window.max(1).min(n);
    let still = rng.uniform() < tc.still_prob;
    let frame_idx: Vec<usize> = if still {
        let f = rng.below(n);
        vec![f; window]
    } else {
        let start = rng.below(n - window + 1);
        (start..start + window).collect()
    };
    let refs: Vec<usize> = (0..cfg.n_refs).map(|_| rng.below(n)).collect();
    let t = 1 + rng.below(sched.steps());
    let drop_refs = rng.uniform() < tc.ref_dropout;

    // Non-FTA parameters are frozen in stage 2, so conditioning, pose
    // features, and targets are fixed for the sample's lifetime.
    let ref_frames: Vec<Tensor> = refs.iter().map(|&i| clip.frames[i].clone()).collect();
    let ref_poses: Vec<Tensor> = refs.iter().map(|&i| cc.pose_maps[i].clone()).collect();
    let cond = build_conditioning(store, cfg, codec, &ref_frames, &ref_poses)?;

    let mut inputs = Vec::with_capacity(window);
    let mut protos = Vec::with_capacity(window);
    let mut v_targets = Vec::with_capacity(window);
    let mut deltas = Vec::with_capacity(window);
    for (pos, &fi) in frame_idx.iter().enumerate() {
        let x_p = encode_pose(store, &cc.pose_maps[fi])?;
        let p = prototypes_for_pose(store, cfg, &cond, &x_p)?;
        protos.push(if drop_refs { p.zeros_like() } else { p });
        let x0 = &cc.latents[fi];
        let eps = Tensor::from_fn(x0.shape(), |_| rng.normal());
        let x_t = add_noise(x0, &eps, t, sched)?;
        v_targets.push(v_target(x0, &eps, t, sched)?);
        inputs.push(x_t.add(&x_p)?);
        // Supervision flow for frame i points back to its predecessor (the
        // direction the FTA sampler warps along); frame 0 and stills carry
        // zero flow.
        let d = if pos == 0 || still || frame_idx[pos - 1] + 1 != fi {
            Tensor::zeros(&[2, clip.resolution, clip.resolution])
        } else {
            let key = (clip_idx, fi);
            if let Some(d) = delta_cache.get(&key) {
                d.clone()
            } else {
                let d = keypoint_flow_map(
                    &cc.pose_maps[fi],
                    &cc.pose_maps[fi - 1],
                    &clip.keypoints[fi],
                    &crate::farneback::FlowParams::default(),
                )?;
                delta_cache.insert(key, d.clone());
                d
            }
        };
        deltas.push(d);
    }
    Ok(Stage2Sample {
        inputs,
        protos,
        v_targets,
        deltas,
        t,
    })
}

/// Per-timestep-band validation losses: (t_lo, t_hi, loss), plus variants
/// with zeroed prototypes and with the target's own latent as every
/// reference. Diagnostic for how much conditioning the model uses.
pub fn eval_denoise_bands(
    store: &ParamStore,
    cfg: &ModelConfig,
    clips: &[SceneClip],
    t_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    let sched = NoiseSchedule::cosine(t_steps)?;
    let codec = LatentCodec::new(cfg.codec_block);
    let cache = build_clip_cache(store, &codec, clips)?;
    let tc = TrainConfig {
        ref_dropout: 0.0,
        ..Default::default()
    };
    let mut out = Vec::new();
    for band in 0..4 {
        let mut rng = Rng::new(seed ^ band as u64).split("eval.bands");
        let (lo, hi) = (band * t_steps / 4, (band + 1) * t_steps / 4);
        let mut acc = 0.0;
        let mut acc_nocond = 0.0;
        for _ in 0..n_samples.max(1) {
            let mut sample = draw_stage1(cfg, clips, &cache, &sched, &tc, &mut rng)?;
            sample.t = (lo + rng.below(hi - lo)).max(1);
            acc += stage1_loss(store, cfg, clips, &cache, &sched, &sample)?;
            sample.drop_refs = true;
            acc_nocond += stage1_loss(store, cfg, clips, &cache, &sched, &sample)?;
        }
        out.push((
            hi,
            acc / n_samples.max(1) as f64,
            acc_nocond / n_samples.max(1) as f64,
        ));
    }
    Ok(out)
}

/// Mean denoising loss over a fixed, seeded sample set; the validation
/// counterpart of stage-1 training (no FTA, no reference dropout).
pub fn eval_denoise_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    clips: &[SceneClip],
    t_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let sched = NoiseSchedule::cosine(t_steps)?;
    let codec = LatentCodec::new(cfg.codec_block);
    let cache = build_clip_cache(store, &codec, clips)?;
    let tc = TrainConfig {
        ref_dropout: 0.0,
        ..Default::default()
    };
    let mut rng = Rng::new(seed).split("eval.denoise");
    let mut acc = 0.0;
    for _ in 0..n_samples.max(1) {
        let sample = draw_stage1(cfg, clips, &cache, &sched, &tc, &mut rng)?;
        acc += stage1_loss(store, cfg, clips, &cache, &sched, &sample)?;
    }
    Ok(acc / n_samples.max(1) as f64)
}

/// Mean offset loss over the batch, with lambda-scaled analytic gradients
/// accumulated into the flat gradient vector.
fn add_offset_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &[Stage2Sample],
    lambda: f64,
    names: &[String],
    grad: &mut [f64],
) -> Result<f64> {
    let mut total_lo = 0.0;
    for sample in batch {
        let out = denoiser_forward(store, cfg, &sample.inputs, &sample.protos, sample.t, true)?;
        let n_blocks = out.offsets.len().max(1);
        let mut sample_grads = crate::gradpath::HeadGrads::new();
        for ((block, offsets), (_, q_cats)) in out.offsets.iter().zip(out.fta_inputs.iter()) {
            let (h, w) = (offsets[0].shape()[1], offsets[0].shape()[2]);
            let deltas_resized: Vec<Tensor> = sample
                .deltas
                .iter()
                .map(|d| resize_flow_to_block(d, h, w))
                .collect::<Result<_>>()?;
            let prefix = format!("fpi.block{block}.fta.offset");
            let (lo, grads) = offset_loss_and_grad(store, &prefix, q_cats, &deltas_resized, true)?;
            total_lo += lo / n_blocks as f64;
            if let Some(g) = grads {
                for (k, v) in g {
                    let scaled = v.scale(lambda / (n_blocks * batch.len()) as f64);
                    match sample_grads.get_mut(&k) {
                        Some(t) => t.add_assign(&scaled)?,
                        None => {
                            sample_grads.insert(k, scaled);
                        }
                    }
                }
            }
        }
        let flat = flatten_grads(store, names, &sample_grads)?;
        for (g, f) in grad.iter_mut().zip(flat.iter()) {
            *g += f;
        }
    }
    Ok(total_lo / batch.len() as f64)
}
