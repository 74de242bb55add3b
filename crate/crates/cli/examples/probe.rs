//! Scratch: single-sample overfit probe of the stage-1 path.

use profashion_core::backprop::{stage1_loss_and_grads, Grads, Stage1Input};
use profashion_core::model::build_params;
use profashion_core::refenc::{encode_global, LatentCodec};
use profashion_core::rng::Rng;
use profashion_core::synthworld::{make_turning_clip, render_pose_map};
use profashion_core::tensor::Tensor;
use profashion_cli::config::RunConfig;

fn grad_norms_by_prefix(grads: &Grads, store: &profashion_core::params::ParamStore) {
    let mut groups: std::collections::BTreeMap<&str, f64> = Default::default();
    for name in store.names() {
        let g = grads.get(&name).map(|t| t.sq_norm()).unwrap_or(0.0);
        let key = if name.starts_with("fpi.head") { "fpi.head" }
        else if name.contains("proto_attn") { "proto_attn" }
        else if name.contains("sem_attn") { "sem_attn" }
        else if name.contains("temporal") { "temporal" }
        else if name.contains(".conv.") && name.starts_with("fpi") { "fpi.convs" }
        else if name.starts_with("fpi") { "fpi.other" }
        else if name.starts_with("refenc") { "refenc" }
        else if name.starts_with("ppa") { "selector" }
        else if name.starts_with("pose_enc") { "pose_enc" }
        else { "other" };
        *groups.entry(key).or_default() += g;
    }
    for (k, v) in groups {
        println!("  |g {k}| = {:.4e}", v.sqrt());
    }
}

struct Sample {
    x0: Tensor,
    eps: Tensor,
    target_pose: Tensor,
    ref_poses: Vec<Tensor>,
    ref_latents: Vec<Tensor>,
    globals: Vec<Tensor>,
}

fn main() {
    let mut rc = RunConfig::default();
    rc.model = profashion_testkit::tiny_model_config(32, 3);
    rc.model.base_channels = 16;
    let mut store = build_params(&rc.model, 7).unwrap();
    let codec = LatentCodec::new(8);
    let target = 18usize; // back view
    let refs = [0usize, 18, 9];
    let mut rng = Rng::new(3);

    // Two characters, identical poses, identical noise: only texture and
    // references differ between the samples.
    let eps_shared: Option<Tensor> = None;
    let mut eps_shared = eps_shared;
    let samples: Vec<Sample> = [1000u64, 2000u64]
        .iter()
        .map(|&seed| {
            let clip = make_turning_clip(seed, 36, 32, std::f64::consts::TAU / 36.0).unwrap();
            let x0 = codec.encode(&clip.frames[target]).unwrap();
            if eps_shared.is_none() {
                eps_shared = Some(Tensor::from_fn(x0.shape(), |_| rng.normal()));
            }
            Sample {
                eps: eps_shared.clone().unwrap(),
                target_pose: render_pose_map(&clip.keypoints[target], 32),
                ref_poses: refs.iter().map(|&i| render_pose_map(&clip.keypoints[i], 32)).collect(),
                ref_latents: refs.iter().map(|&i| codec.encode(&clip.frames[i]).unwrap()).collect(),
                globals: refs.iter().map(|&i| encode_global(&store, &clip.frames[i]).unwrap()).collect(),
                x0,
            }
        })
        .collect();

    let t = 950usize;
    let sched = profashion_core::diffusion::NoiseSchedule::cosine(1000).unwrap();
    let (a, s) = (sched.alpha_bar(t).unwrap().sqrt(), sched.sigma(t).unwrap());
    let names: Vec<String> = store.select(|n| !n.starts_with("global_enc.") && !n.contains(".fta."));
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.05);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let mut velocity = vec![0.0; store.total_len(&names).unwrap()];
    for step in 0..steps {
        let mut grads = Grads::new();
        let mut losses = Vec::new();
        for sm in &samples {
            let input = Stage1Input {
                x0: &sm.x0,
                eps: &sm.eps,
                t,
                target_pose_map: &sm.target_pose,
                ref_pose_maps: &sm.ref_poses,
                ref_latents: &sm.ref_latents,
                ref_globals: &sm.globals,
                drop_refs: false,
                sqrt_alpha_bar: a,
                sigma: s,
            };
            losses.push(stage1_loss_and_grads(&store, &rc.model, &input, &mut grads).unwrap());
        }
        grads.scale(0.5);
        if step % 50 == 0 || step == steps - 1 {
            println!("step {step}: losses {:.5} {:.5}", losses[0], losses[1]);
            if std::env::var("NORMS").is_ok() {
                grad_norms_by_prefix(&grads, &store);
            }
        }
        let mut flat = vec![0.0; velocity.len()];
        let mut o = 0;
        for n in &names {
            let len = store.get(n).unwrap().len();
            if let Some(g) = grads.get(n) {
                flat[o..o + len].copy_from_slice(g.data());
            }
            o += len;
        }
        let norm: f64 = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 1.0 {
            for g in &mut flat {
                *g /= norm;
            }
        }
        for (v, g) in velocity.iter_mut().zip(flat.iter()) {
            *v = 0.9 * *v - lr * g;
        }
        store.axpy(&names, &velocity, 1.0).unwrap();
    }
}
