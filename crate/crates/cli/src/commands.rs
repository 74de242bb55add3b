//! Command implementations. Each command is a pure function of its resolved
//! config (plus named input paths) and writes byte-deterministic artifacts
//! into the output directory.

use std::fs;
use std::path::Path;

use profashion_core::checkpoint::{load_checkpoint, save_checkpoint, write_loss_curve};
use profashion_core::diffusion::{
    build_conditioning, ddim_sample, prototypes_for_pose, train_toy, NoiseSchedule, SampleConfig,
    TrainConfig,
};
use profashion_core::error::{Error, Result};
use profashion_core::evalkit::MetricReport;
use profashion_core::fpi::denoiser_forward;
use profashion_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use profashion_core::gradpath::{flatten_grads, resample_loss_and_grad};
use profashion_core::model::build_params;
use profashion_core::params::{InitSpec, ParamStore};
use profashion_core::parallel::map_indexed;
use profashion_core::poseflow::{encode_pose, select_references, SelectionReport};
use profashion_core::ppa::{pose_aware_selector, PrototypeStack};
use profashion_core::ppm::{read_frame, write_clip, write_frame};
use profashion_core::refenc::LatentCodec;
use profashion_core::rng::Rng;
use profashion_core::synthworld::{label_clip, make_clip, render_pose_map, ClipSpec, SceneClip};
use profashion_core::tensor::{softmax, Tensor};

use crate::config::RunConfig;

pub fn clip_from_config(cfg: &RunConfig) -> Result<SceneClip> {
    make_clip(&ClipSpec {
        seed: cfg.seed,
        n_frames: cfg.n_frames,
        resolution: cfg.resolution,
        turn_rate: cfg.effective_turn_rate(),
        drift: cfg.drift,
        start_yaw: cfg.start_yaw,
    })
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("resolved_config.txt"), cfg.to_text())?;
    Ok(())
}

/// `synth`: clip frames as P6 plus the sidecar.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    write_resolved(cfg)?;
    let clip = clip_from_config(cfg)?;
    write_clip(&cfg.out.join("clip"), &clip)?;
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        stage: cfg.stage,
        steps: cfg.steps,
        lr: cfg.lr,
        momentum: cfg.momentum,
        lambda: cfg.lambda,
        batch: cfg.batch,
        still_prob: cfg.still_prob,
        probes: cfg.probes,
        probe_step: cfg.probe_step,
        ref_dropout: cfg.ref_dropout,
        grad_clip: cfg.grad_clip,
        param_clamp: cfg.param_clamp,
        t_min_frac: cfg.t_min_frac,
        eps_bank: cfg.eps_bank,
        t_anchor_frac: cfg.t_anchor_frac,
        t_steps: cfg.t_steps,
        window: cfg.model.window,
    }
}

/// `train`: run one stage on the config's clip, write checkpoint and loss
/// curve. `init` resumes from an existing checkpoint (stage 2 normally
/// resumes from a stage-1 checkpoint).
pub fn cmd_train(cfg: &RunConfig, init: Option<&Path>) -> Result<()> {
    write_resolved(cfg)?;
    let mut store = match init {
        Some(path) => load_compatible_checkpoint(cfg, path)?,
        None => build_params(&cfg.model, cfg.seed)?,
    };
    let clip = clip_from_config(cfg)?;
    let result = train_toy(
        &mut store,
        &cfg.model,
        &[clip],
        &train_config(cfg),
        &Rng::new(cfg.seed),
    )?;
    let metadata = vec![
        ("model_hash".to_string(), cfg.model_hash()),
        ("config_hash".to_string(), cfg.hash()),
        ("stage".to_string(), cfg.stage.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ];
    save_checkpoint(&cfg.out.join("checkpoint.bin"), &store, &metadata)?;
    write_loss_curve(
        &cfg.out.join("loss.csv"),
        &result.loss_curve,
        &result.smoothed,
    )?;
    Ok(())
}

fn load_compatible_checkpoint(cfg: &RunConfig, path: &Path) -> Result<ParamStore> {
    let (store, metadata) = load_checkpoint(path)?;
    let found = metadata
        .iter()
        .find(|(k, _)| k == "model_hash")
        .map(|(_, v)| v.clone())
        .unwrap_or_default();
    if found != cfg.model_hash() {
        return Err(Error::Config(format!(
            "checkpoint model_hash {} does not match config model_hash {}",
            found,
            cfg.model_hash()
        )));
    }
    Ok(store)
}

/// Everything generation produces besides pixels.
pub struct GenerationOutput {
    pub frames: Vec<Tensor>,
    pub selection: SelectionReport,
}

/// Full sampling pipeline: select references, build prototypes per frame,
/// run guided DDIM over sliding windows, decode.
pub fn generate_frames(store: &ParamStore, cfg: &RunConfig, clip: &SceneClip) -> Result<GenerationOutput> {
    let codec = LatentCodec::new(cfg.model.codec_block);
    let mut sel_rng = Rng::new(cfg.seed).split("select");
    let selection = select_references(clip, cfg.model.n_refs, &mut sel_rng)?;
    let ref_frames: Vec<Tensor> = selection
        .indices
        .iter()
        .map(|&i| clip.frames[i].clone())
        .collect();
    let ref_poses: Vec<Tensor> = selection
        .indices
        .iter()
        .map(|&i| render_pose_map(&clip.keypoints[i], clip.resolution))
        .collect();
    let cond = build_conditioning(store, &cfg.model, &codec, &ref_frames, &ref_poses)?;

    let n = clip.n_frames();
    let pose_feats: Vec<Tensor> = map_indexed(n, |i| {
        let map = render_pose_map(&clip.keypoints[i], clip.resolution);
        encode_pose(store, &map)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let protos: Vec<PrototypeStack> = pose_feats
        .iter()
        .map(|xp| prototypes_for_pose(store, &cfg.model, &cond, xp))
        .collect::<Result<_>>()?;
    let zero_protos: Vec<PrototypeStack> = protos.iter().map(|p| p.zeros_like()).collect();

    let sched = NoiseSchedule::cosine(cfg.t_steps)?;
    let sample_cfg = SampleConfig {
        ddim_steps: cfg.ddim_steps,
        cfg_scale: cfg.cfg_scale,
    };
    let latent_c = cfg.model.latent_channels();
    let latent_s = cfg.model.latent_size();
    let model = |frames: &[Tensor], start: usize, t: usize, cond_branch: bool| {
        let inputs: Vec<Tensor> = frames
            .iter()
            .enumerate()
            .map(|(i, z)| z.add(&pose_feats[start + i]))
            .collect::<Result<_>>()?;
        let slice: Vec<PrototypeStack> = if cond_branch {
            protos[start..start + frames.len()].to_vec()
        } else {
            zero_protos[start..start + frames.len()].to_vec()
        };
        denoiser_forward(store, &cfg.model, &inputs, &slice, t, true).map(|o| o.v)
    };
    let latents = ddim_sample(
        &model,
        &[latent_c, latent_s, latent_s],
        n,
        cfg.model.window,
        cfg.model.window_stride,
        &sample_cfg,
        &sched,
        &Rng::new(cfg.seed),
    )?;
    let frames: Vec<Tensor> = latents
        .iter()
        .map(|z| Ok(codec.decode(z)?.map(|v| v.clamp(0.0, 1.0))))
        .collect::<Result<_>>()?;
    Ok(GenerationOutput { frames, selection })
}

fn selection_text(selection: &SelectionReport) -> String {
    let mut s = String::from("report = reference-selection-v1\n");
    for (i, (idx, label)) in selection
        .indices
        .iter()
        .zip(selection.labels.iter())
        .enumerate()
    {
        s.push_str(&format!("ref_{} = {} ({})\n", i + 1, idx, label.as_str()));
    }
    for w in &selection.warnings {
        s.push_str(&format!("warning = {w}\n"));
    }
    s
}

/// `generate`: sample a video driven by the config clip's poses and compare
/// it to the clip's real frames.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    write_resolved(cfg)?;
    let store = load_compatible_checkpoint(cfg, checkpoint)?;
    let clip = clip_from_config(cfg)?;
    let out = generate_frames(&store, cfg, &clip)?;
    let dir = cfg.out.join("gen");
    fs::create_dir_all(&dir)?;
    for (i, frame) in out.frames.iter().enumerate() {
        write_frame(&dir.join(format!("frame_{:04}.ppm", i + 1)), frame)?;
    }
    fs::write(cfg.out.join("references.txt"), selection_text(&out.selection))?;
    let labels = label_clip(&clip)?;
    let report = MetricReport::build(
        &out.frames,
        &clip.frames,
        &labels,
        &clip.masks,
        cfg.seed,
        cfg.hash(),
    )?;
    fs::write(cfg.out.join("metrics.txt"), report.to_text())?;
    Ok(())
}

/// `evaluate`: compare a directory of predicted frames against a clip
/// directory written by `synth`.
pub fn cmd_evaluate(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path) -> Result<()> {
    write_resolved(cfg)?;
    let gt_clip = profashion_core::ppm::read_clip(gt_dir)?;
    let mut pred = Vec::with_capacity(gt_clip.n_frames());
    for i in 0..gt_clip.n_frames() {
        let path = pred_dir.join(format!("frame_{:04}.ppm", i + 1));
        if !path.exists() {
            return Err(Error::Io(format!("missing predicted frame {}", path.display())));
        }
        pred.push(read_frame(&path)?);
    }
    let labels = label_clip(&gt_clip)?;
    let report = MetricReport::build(
        &pred,
        &gt_clip.frames,
        &labels,
        &gt_clip.masks,
        cfg.seed,
        cfg.hash(),
    )?;
    fs::write(cfg.out.join("metrics.txt"), report.to_text())?;
    Ok(())
}

/// One gradient-check scenario's outcome.
pub struct GradCheckOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub threshold: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.threshold
    }
}

/// The three gradient-check scenarios: quadratic self-test, softmax
/// cross-entropy, and the offset path through the bilinear sampler on a
/// 2-frame 16x16 instance.
pub fn run_gradchecks(cfg: &RunConfig) -> Result<Vec<GradCheckOutcome>> {
    let mut outcomes = Vec::new();
    let opts = GradCheckOptions::default();

    // Quadratic: f = sum x^2, grad 2x.
    {
        let rng = Rng::new(cfg.seed);
        let mut store = ParamStore::new();
        store.create("quad.x", &[12], InitSpec::TruncNormal { std: 1.0 }, &rng)?;
        let names = vec!["quad.x".to_string()];
        let analytic: Vec<f64> = store.get("quad.x")?.data().iter().map(|v| 2.0 * v).collect();
        let report = grad_check(
            |s| Ok(s.get("quad.x")?.sq_norm()),
            &store,
            &names,
            &analytic,
            &opts,
        )?;
        outcomes.push(GradCheckOutcome {
            name: "quadratic",
            report,
            threshold: 1e-8,
        });
    }

    // Softmax cross-entropy toy with its closed-form gradient.
    {
        let rng = Rng::new(cfg.seed ^ 1);
        let mut store = ParamStore::new();
        store.create("sce.logits", &[7], InitSpec::TruncNormal { std: 1.0 }, &rng)?;
        let names = vec!["sce.logits".to_string()];
        let target = 3usize;
        let probs = softmax(store.get("sce.logits")?, 0)?;
        let analytic: Vec<f64> = probs
            .data()
            .iter()
            .enumerate()
            .map(|(i, p)| p - if i == target { 1.0 } else { 0.0 })
            .collect();
        let report = grad_check(
            |s| {
                let p = softmax(s.get("sce.logits")?, 0)?;
                Ok(-p.data()[target].ln())
            },
            &store,
            &names,
            &analytic,
            &opts,
        )?;
        outcomes.push(GradCheckOutcome {
            name: "softmax_cross_entropy",
            report,
            threshold: 1e-6,
        });
    }

    // Offset path: head convs -> bilinear sampler -> masked MSE, 2 frames at
    // 16x16, through the real denoiser block's head parameters (reseeded so
    // offsets land at generic fractional positions).
    {
        let mut store = build_params(&cfg.model, cfg.seed)?;
        let block = cfg.model.fta_blocks()[0];
        let prefix = format!("fpi.block{block}.fta.offset");
        let c = cfg.model.level_channels()[3];
        let rng = Rng::new(cfg.seed ^ 2);
        let mut tmp = ParamStore::new();
        tmp.create("w", &[2, c, 3, 3], InitSpec::TruncNormal { std: 0.05 }, &rng)?;
        tmp.create("b", &[2], InitSpec::TruncNormal { std: 0.05 }, &rng)?;
        store.insert_raw(&format!("{prefix}.conv1.weight"), tmp.get("w")?.clone());
        store.insert_raw(&format!("{prefix}.conv1.bias"), tmp.get("b")?.clone());

        let mut data_rng = Rng::new(cfg.seed ^ 3);
        let q_cats: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[2 * c, 16, 16], |_| data_rng.normal()))
            .collect();
        let bases: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[4, 16, 16], |_| data_rng.normal()))
            .collect();
        let targets: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[4, 16, 16], |_| data_rng.normal()))
            .collect();
        let masks: Vec<Vec<bool>> = (0..2)
            .map(|_| (0..256).map(|p| p % 5 == 0).collect())
            .collect();
        let names: Vec<String> = store.select(|n| n.starts_with(&prefix));
        let (_, grads) =
            resample_loss_and_grad(&store, &prefix, &q_cats, &bases, &targets, &masks, true)?;
        let flat = flatten_grads(&store, &names, &grads.expect("grads requested"))?;
        let probe_opts = GradCheckOptions {
            probes: 240,
            seed: cfg.seed,
            ..Default::default()
        };
        let report = grad_check(
            |s| {
                resample_loss_and_grad(s, &prefix, &q_cats, &bases, &targets, &masks, false)
                    .map(|(l, _)| l)
            },
            &store,
            &names,
            &flat,
            &probe_opts,
        )?;
        outcomes.push(GradCheckOutcome {
            name: "offset_path",
            report,
            threshold: 1e-4,
        });
    }
    Ok(outcomes)
}

/// `gradcheck`: run the scenarios, write the report, fail on any miss.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    write_resolved(cfg)?;
    let outcomes = run_gradchecks(cfg)?;
    let mut text = String::from("report = gradcheck-v1\n");
    let mut all_ok = true;
    for o in &outcomes {
        all_ok &= o.passed();
        text.push_str(&format!(
            "{}_max_rel_err = {:.6e}\n{}_threshold = {:.1e}\n{}_worst_coordinate = {}[{}]\n{}_status = {}\n",
            o.name,
            o.report.max_rel_err,
            o.name,
            o.threshold,
            o.name,
            o.report.worst_param,
            o.report.worst_index,
            o.name,
            if o.passed() { "pass" } else { "fail" },
        ));
    }
    fs::write(cfg.out.join("gradcheck.txt"), &text)?;
    if !all_ok {
        return Err(Error::Numeric("gradient check failed; see gradcheck.txt".into()));
    }
    Ok(())
}

/// `inspect-ppa`: per-frame aggregation scores against the selected
/// references.
pub fn cmd_inspect_ppa(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    write_resolved(cfg)?;
    let store = load_compatible_checkpoint(cfg, checkpoint)?;
    let clip = clip_from_config(cfg)?;
    let mut sel_rng = Rng::new(cfg.seed).split("select");
    let selection = select_references(&clip, cfg.model.n_refs, &mut sel_rng)?;
    let ref_pose_feats: Vec<Tensor> = selection
        .indices
        .iter()
        .map(|&i| {
            let map = render_pose_map(&clip.keypoints[i], clip.resolution);
            encode_pose(&store, &map)
        })
        .collect::<Result<_>>()?;
    let mut text = String::from("report = ppa-scores-v1\n");
    text.push_str(&selection_text(&selection));
    for i in 0..clip.n_frames() {
        let map = render_pose_map(&clip.keypoints[i], clip.resolution);
        let x_p = encode_pose(&store, &map)?;
        let agg = pose_aware_selector(&store, &cfg.model, &x_p, &ref_pose_feats)?;
        let row: Vec<String> = agg.scores.iter().map(|s| format!("{:.12e}", s)).collect();
        text.push_str(&format!("scores_{:04} = {}\n", i + 1, row.join(",")));
    }
    fs::write(cfg.out.join("ppa_scores.txt"), text)?;
    Ok(())
}
