//! Scratch harness for tuning the multi-reference comparison task.

use profashion_cli::commands::generate_frames;
use profashion_cli::config::RunConfig;
use profashion_core::diffusion::{eval_denoise_bands, eval_denoise_loss, train_toy, TrainConfig};
use profashion_core::evalkit::view_masked_error;
use profashion_core::model::build_params;
use profashion_core::rng::Rng;
use profashion_core::synthworld::label_clip;

fn loss_sweep() {
    let steps = envu("S1", 800);
    let lr = envf("LR", 0.01);
    let probes = envu("PROBES", 1);
    let batch = envu("BATCH", 2);
    let momentum = envf("MOM", 0.9);
    let res = envu("RES", 32);
    let mut rc = RunConfig::default();
    rc.seed = 1000;
    rc.resolution = res;
    rc.n_frames = 36;
    rc.model = profashion_testkit::tiny_model_config(res, 3);
    rc.model.base_channels = envu("BASE", rc.model.base_channels);
    rc.model.heads = envu("HEADS", rc.model.heads);
    let n_clips = envu("NCLIPS", 4);
    let clips: Vec<_> = (0..n_clips as u64)
        .map(|i| {
            let mut c = rc.clone();
            c.seed = 1000 + i;
            profashion_cli::commands::clip_from_config(&c).unwrap()
        })
        .collect();
    let mut unseen_rc = rc.clone();
    unseen_rc.seed = 1999;
    let unseen = profashion_cli::commands::clip_from_config(&unseen_rc).unwrap();
    let clip = clips[0].clone();
    let mut store = build_params(&rc.model, rc.seed).unwrap();
    let t0 = std::time::Instant::now();
    let tc = TrainConfig {
        stage: 1,
        steps,
        lr,
        probes,
        batch,
        momentum,
        grad_clip: envf("CLIP", 1.0),
        t_min_frac: envf("TMIN", 0.0),
        eps_bank: envu("EBANK", 2),
        t_anchor_frac: envf("ANCHOR", 0.5),
        ..Default::default()
    };
    let val0 = eval_denoise_loss(&store, &rc.model, &clips, 1000, 48, 5).unwrap();
    let r = train_toy(&mut store, &rc.model, &clips, &tc, &Rng::new(7)).unwrap();
    let val1 = eval_denoise_loss(&store, &rc.model, &clips, 1000, 48, 5).unwrap();
    let vu = eval_denoise_loss(&store, &rc.model, std::slice::from_ref(&unseen), 1000, 48, 5).unwrap();
    print!("lr {lr} probes {probes} batch {batch} mom {momentum}: val {val0:.4} -> {val1:.4} ({:+.1}%) unseen {vu:.4} | ", 100.0*(val1-val0)/val0);
    for i in (0..steps).step_by((steps / 8).max(1)) {
        print!("{:.4} ", r.smoothed[i]);
    }
    println!(
        "| final {:.4} ({:.0}s)",
        r.smoothed.last().unwrap(),
        t0.elapsed().as_secs_f64()
    );
    for (hi, l, l_nc) in eval_denoise_bands(&store, &rc.model, std::slice::from_ref(&unseen), 1000, 24, 5).unwrap() {
        println!("  unseen t<{hi}: cond {l:.4} nocond {l_nc:.4} diff {:+.2e}", l - l_nc);
    }
    let _ = clip;
}

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn envu(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    if std::env::var("MODE").as_deref() == Ok("loss") {
        loss_sweep();
        return;
    }
    let seeds: Vec<u64> = (0..envu("SEEDS", 1) as u64).collect();
    let s1 = envu("S1", 600);
    let s2 = envu("S2", 200);
    let lr = envf("LR", 0.1);
    let lr2 = envf("LR2", 0.05);
    let batch = envu("BATCH", 2);
    let probes = envu("PROBES", 1);
    let lambda = envf("LAMBDA", 0.1);
    let cfg_scale = envf("CFG", 3.5);
    let ddim = envu("DDIM", 35);
    let mut wins = 0;

    for &seed in &seeds {
        let mut results = Vec::new();
        for n_refs in [3usize, 1] {
            let mut rc = RunConfig::default();
            rc.seed = 1000 + seed;
            rc.resolution = 32;
            rc.n_frames = 36;
            rc.model = profashion_testkit::tiny_model_config(32, n_refs);
            rc.model.window = envu("WINDOW", 8);
            rc.model.window_stride = envu("STRIDE", 4);
            rc.ddim_steps = ddim;
            rc.cfg_scale = cfg_scale;
            let clip = profashion_cli::commands::clip_from_config(&rc).unwrap();
            let mut store = build_params(&rc.model, rc.seed).unwrap();

            let t0 = std::time::Instant::now();
            let tc1 = TrainConfig {
                stage: 1,
                steps: s1,
                lr,
                batch,
                probes,
                lambda,
                ..Default::default()
            };
            let r1 = train_toy(&mut store, &rc.model, std::slice::from_ref(&clip), &tc1, &Rng::new(rc.seed)).unwrap();
            let tc2 = TrainConfig {
                stage: 2,
                steps: s2,
                lr: lr2,
                batch,
                probes,
                lambda,
                window: rc.model.window,
                ..Default::default()
            };
            let r2 = train_toy(&mut store, &rc.model, std::slice::from_ref(&clip), &tc2, &Rng::new(rc.seed ^ 77)).unwrap();
            let t_train = t0.elapsed().as_secs_f64();

            let t1 = std::time::Instant::now();
            let gen = generate_frames(&store, &rc, &clip).unwrap();
            let t_gen = t1.elapsed().as_secs_f64();
            let labels = label_clip(&clip).unwrap();
            let errs = view_masked_error(&gen.frames, &clip.frames, &labels, &clip.masks).unwrap();
            println!(
                "seed {seed} n_refs {n_refs}: back {:.5} front {:.5} side {:.5} | loss1 {:.4}->{:.4} loss2 {:.4}->{:.4} | train {:.0}s gen {:.0}s",
                errs["back"], errs["front"], errs["side"],
                r1.smoothed.first().unwrap(), r1.smoothed.last().unwrap(),
                r2.smoothed.first().unwrap(), r2.smoothed.last().unwrap(),
                t_train, t_gen,
            );
            results.push(errs["back"]);
        }
        let win = results[0] < results[1];
        wins += win as usize;
        println!("seed {seed}: N3 back {:.5} vs N1 back {:.5} -> {}", results[0], results[1], if win { "WIN" } else { "LOSS" });
    }
    println!("wins: {wins}/{}", seeds.len());
}
