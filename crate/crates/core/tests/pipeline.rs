//! Cross-module behavior: FTA alignment, denoiser invariants, offset-path
//! gradient checks through the real model, and training contracts.

use profashion_core::diffusion::{
    build_conditioning, ddim_sample, prototypes_for_pose, train_toy, trainable_names,
    NoiseSchedule, SampleConfig, TrainConfig,
};
use profashion_core::fpi::{denoiser_forward, fta_resample, is_fta_param};
use profashion_core::gradcheck::{grad_check, GradCheckOptions};
use profashion_core::gradpath::{
    flatten_grads, masked_mse, offset_mask, resample_loss_and_grad,
};
use profashion_core::model::build_params;
use profashion_core::params::InitSpec;
use profashion_core::poseflow::{encode_pose, exact_keypoint_flow, keypoint_disc_radius};
use profashion_core::refenc::LatentCodec;
use profashion_core::rng::Rng;
use profashion_core::synthworld::{make_clip, make_turning_clip, render_pose_map, ClipSpec};
use profashion_core::tensor::Tensor;
use profashion_testkit::tiny_model_config;

#[test]
fn fta_resample_with_oracle_offsets_aligns_translation() {
    // Per-frame backward keypoint flow warps the previous frame onto the
    // current one; alignment must beat the unwarped previous frame on the
    // keypoint discs.
    let spec = ClipSpec {
        seed: 3,
        n_frames: 3,
        resolution: 64,
        turn_rate: 0.0,
        drift: (2.0, 1.0),
        start_yaw: Some(0.0),
    };
    let clip = make_clip(&spec).unwrap();
    let radius = keypoint_disc_radius(64);
    for i in 1..3 {
        let oracle =
            exact_keypoint_flow(&clip.keypoints[i], &clip.keypoints[i - 1], 64, radius).unwrap();
        let mask = offset_mask(&oracle).unwrap();
        let warped = fta_resample(
            &[clip.frames[i - 1].clone(), clip.frames[i - 1].clone()],
            &[Tensor::zeros(&[2, 64, 64]), oracle],
        )
        .unwrap();
        let aligned_err = masked_mse(&warped[1], &clip.frames[i], &mask).unwrap();
        let unaligned_err = masked_mse(&clip.frames[i - 1], &clip.frames[i], &mask).unwrap();
        assert!(
            aligned_err < unaligned_err,
            "frame {i}: aligned {aligned_err} vs unaligned {unaligned_err}"
        );
        assert!(unaligned_err > 1e-4, "translation must move disc content");
    }
}

#[test]
fn denoiser_static_identical_refs_identical_frames() {
    let cfg = tiny_model_config(32, 3);
    let store = build_params(&cfg, 5).unwrap();
    let codec = LatentCodec::new(cfg.codec_block);
    let clip = make_turning_clip(6, 4, 32, 0.0).unwrap();
    let pose_map = render_pose_map(&clip.keypoints[0], 32);
    let ref_frames = vec![clip.frames[0].clone(); 3];
    let ref_poses = vec![pose_map.clone(); 3];
    let cond = build_conditioning(&store, &cfg, &codec, &ref_frames, &ref_poses).unwrap();
    let x_p = encode_pose(&store, &pose_map).unwrap();
    let protos = prototypes_for_pose(&store, &cfg, &cond, &x_p).unwrap();

    // Same input latent per frame (static content, shared noise).
    let mut rng = Rng::new(7);
    let latent = Tensor::from_fn(&[192, 4, 4], |_| rng.normal())
        .add(&x_p)
        .unwrap();
    let frames = vec![latent; 4];
    let protos_all = vec![protos; 4];
    let out = denoiser_forward(&store, &cfg, &frames, &protos_all, 400, true).unwrap();
    for i in 1..4 {
        let d = out.v[i].max_abs_diff(&out.v[0]);
        assert!(d < 1e-6, "frame {i} differs by {d}");
    }
}

#[test]
fn offset_path_gradcheck_through_real_block() {
    // Criterion-6 style instance: 2 frames at 16x16 through the real offset
    // head of an FTA block, bilinear sampler included. The head parameters
    // are reinitialized with nonzero values so the offsets are generic
    // fractional positions.
    let cfg = tiny_model_config(32, 3);
    let mut store = build_params(&cfg, 8).unwrap();
    let block = cfg.fta_blocks()[0];
    let prefix = format!("fpi.block{block}.fta.offset");
    let c = cfg.level_channels()[3];
    let rng = Rng::new(99);
    let mut reinit = profashion_core::params::ParamStore::new();
    reinit
        .create("w1", &[2, c, 3, 3], InitSpec::TruncNormal { std: 0.05 }, &rng)
        .unwrap();
    reinit
        .create("b1", &[2], InitSpec::TruncNormal { std: 0.05 }, &rng)
        .unwrap();
    store.insert_raw(
        &format!("{prefix}.conv1.weight"),
        reinit.get("w1").unwrap().clone(),
    );
    store.insert_raw(
        &format!("{prefix}.conv1.bias"),
        reinit.get("b1").unwrap().clone(),
    );

    let mut rng = Rng::new(9);
    let q_cats: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[2 * c, 16, 16], |_| rng.normal()))
        .collect();
    let bases: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[4, 16, 16], |_| rng.normal()))
        .collect();
    let targets: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[4, 16, 16], |_| rng.normal()))
        .collect();
    let masks: Vec<Vec<bool>> = (0..2)
        .map(|_| (0..256).map(|p| p % 5 == 0).collect())
        .collect();
    let names: Vec<String> = store.select(|n| n.starts_with(&prefix));
    let (_, grads) =
        resample_loss_and_grad(&store, &prefix, &q_cats, &bases, &targets, &masks, true).unwrap();
    let flat = flatten_grads(&store, &names, &grads.unwrap()).unwrap();
    let opts = GradCheckOptions {
        probes: 200,
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
        &opts,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "rel err {} at {}[{}]",
        report.max_rel_err,
        report.worst_param,
        report.worst_index
    );
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let cfg = tiny_model_config(32, 2);
    let mut store = build_params(&cfg, 10).unwrap();
    let before = store.clone();
    let clips = vec![make_turning_clip(11, 4, 32, 0.8).unwrap()];
    let tc = TrainConfig {
        stage: 1,
        steps: 3,
        lr: 0.0,
        batch: 1,
        ..Default::default()
    };
    train_toy(&mut store, &cfg, &clips, &tc, &Rng::new(12)).unwrap();
    for name in before.names() {
        assert_eq!(
            before.get(&name).unwrap(),
            store.get(&name).unwrap(),
            "{name} changed"
        );
    }
}

#[test]
fn stage2_freezes_non_fta_params() {
    let cfg = tiny_model_config(32, 2);
    let mut store = build_params(&cfg, 13).unwrap();
    let before = store.clone();
    let clips = vec![make_turning_clip(14, 6, 32, 0.5).unwrap()];
    let tc = TrainConfig {
        stage: 2,
        steps: 4,
        lr: 0.05,
        batch: 1,
        window: 3,
        ..Default::default()
    };
    train_toy(&mut store, &cfg, &clips, &tc, &Rng::new(15)).unwrap();
    let mut fta_changed = false;
    for name in before.names() {
        let a = before.get(&name).unwrap();
        let b = store.get(&name).unwrap();
        if is_fta_param(&name) {
            fta_changed |= a != b;
        } else {
            // Bit-identical freeze.
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} drifted");
            }
        }
    }
    assert!(fta_changed, "stage 2 should move FTA parameters");
}

#[test]
fn stage1_moves_trainable_set_and_loss_is_finite() {
    let cfg = tiny_model_config(32, 2);
    let mut store = build_params(&cfg, 16).unwrap();
    let before = store.clone();
    let clips = vec![make_turning_clip(17, 4, 32, 0.8).unwrap()];
    let tc = TrainConfig {
        stage: 1,
        steps: 5,
        lr: 0.02,
        batch: 1,
        ..Default::default()
    };
    let result = train_toy(&mut store, &cfg, &clips, &tc, &Rng::new(18)).unwrap();
    assert_eq!(result.loss_curve.len(), 5);
    for l in &result.loss_curve {
        assert!(l.is_finite());
    }
    let names = trainable_names(&store, 1);
    let moved = names
        .iter()
        .any(|n| before.get(n).unwrap() != store.get(n).unwrap());
    assert!(moved, "stage 1 should move parameters");
    // Frozen global encoder.
    for n in store.select(|n| n.starts_with("global_enc.")) {
        assert_eq!(before.get(&n).unwrap(), store.get(&n).unwrap());
    }
}

#[test]
fn end_to_end_sampling_is_deterministic() {
    let cfg = tiny_model_config(32, 2);
    let store = build_params(&cfg, 19).unwrap();
    let codec = LatentCodec::new(cfg.codec_block);
    let clip = make_turning_clip(20, 6, 32, 0.9).unwrap();
    let mut sel_rng = Rng::new(21).split("select");
    let report = profashion_core::poseflow::select_references(&clip, 2, &mut sel_rng).unwrap();
    let ref_frames: Vec<Tensor> = report.indices.iter().map(|&i| clip.frames[i].clone()).collect();
    let ref_poses: Vec<Tensor> = report
        .indices
        .iter()
        .map(|&i| render_pose_map(&clip.keypoints[i], 32))
        .collect();
    let cond = build_conditioning(&store, &cfg, &codec, &ref_frames, &ref_poses).unwrap();
    let pose_feats: Vec<Tensor> = (0..clip.n_frames())
        .map(|i| encode_pose(&store, &render_pose_map(&clip.keypoints[i], 32)).unwrap())
        .collect();
    let protos: Vec<_> = pose_feats
        .iter()
        .map(|xp| prototypes_for_pose(&store, &cfg, &cond, xp).unwrap())
        .collect();
    let zero_protos: Vec<_> = protos.iter().map(|p| p.zeros_like()).collect();

    let sched = NoiseSchedule::cosine(1000).unwrap();
    let sample_cfg = SampleConfig {
        ddim_steps: 3,
        cfg_scale: 3.5,
    };
    let model = |frames: &[Tensor], start: usize, t: usize, cond_branch: bool| {
        let inputs: Vec<Tensor> = frames
            .iter()
            .enumerate()
            .map(|(i, z)| z.add(&pose_feats[start + i]).unwrap())
            .collect();
        let slice: Vec<_> = if cond_branch {
            protos[start..start + frames.len()].to_vec()
        } else {
            zero_protos[start..start + frames.len()].to_vec()
        };
        denoiser_forward(&store, &cfg, &inputs, &slice, t, true).map(|o| o.v)
    };
    let run = |seed: u64| {
        ddim_sample(
            &model,
            &[192, 4, 4],
            6,
            cfg.window,
            cfg.window_stride,
            &sample_cfg,
            &sched,
            &Rng::new(seed),
        )
        .unwrap()
    };
    let a = run(30);
    let b = run(30);
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x, y);
    }
    let decoded = codec.decode(&a[0]).unwrap();
    assert_eq!(decoded.shape(), &[3, 32, 32]);
    decoded.check_finite().unwrap();
    let c = run(31);
    assert!(a[0].max_abs_diff(&c[0]) > 0.0);
}
