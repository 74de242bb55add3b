//! Pose feature encoding, keypoint flow maps, and reference selection.
//!
//! The pose encoder is a 4-layer conv stack (stride-2 three times) shared
//! between driving and reference poses. Keypoint flow maps come from dense
//! flow between consecutive rendered pose maps, masked to discs around the
//! keypoints so they stay sparse; an exact-correspondence variant splats the
//! known keypoint displacements and serves as the flow oracle.

use crate::error::{Error, Result};
use crate::farneback::{farneback_flow, to_grayscale, FlowParams};
use crate::layers::{conv_forward, create_conv};
use crate::modelcfg::ModelConfig;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::synthworld::{label_clip, SceneClip, ViewLabel};
use crate::tensor::{silu, Tensor};

/// Create the pose encoder parameters under `pose_enc.`.
pub fn create_pose_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &Rng) -> Result<()> {
    let [c1, c2, c3] = cfg.pose_channels;
    let c_out = cfg.latent_channels();
    create_conv(store, "pose_enc.conv0", 3, c1, 3, rng)?;
    create_conv(store, "pose_enc.conv1", c1, c2, 3, rng)?;
    create_conv(store, "pose_enc.conv2", c2, c3, 3, rng)?;
    create_conv(store, "pose_enc.conv3", c3, c_out, 3, rng)
}

/// Encode a rendered pose map `[3, R, R]` into `[C_latent, R/8, R/8]`.
pub fn encode_pose(store: &ParamStore, pose_map: &Tensor) -> Result<Tensor> {
    let h = conv_forward(store, "pose_enc.conv0", pose_map, 2, 1)?;
    let h = conv_forward(store, "pose_enc.conv1", &silu(&h), 2, 1)?;
    let h = conv_forward(store, "pose_enc.conv2", &silu(&h), 2, 1)?;
    conv_forward(store, "pose_enc.conv3", &silu(&h), 1, 1)
}

/// Disc radius for keypoint flow masks, scaled from the reference radius of
/// 3 px at 64 px maps so sparsity holds at smaller resolutions.
pub fn keypoint_disc_radius(resolution: usize) -> f64 {
    ((3.0 * resolution as f64) / 64.0).max(1.0)
}

/// Dense flow between two rendered pose maps, masked to discs around the
/// first frame's keypoints; zero elsewhere.
pub fn keypoint_flow_map(
    pose_a: &Tensor,
    pose_b: &Tensor,
    keypoints_a: &[(f64, f64)],
    params: &FlowParams,
) -> Result<Tensor> {
    let gray_a = to_grayscale(pose_a)?;
    let gray_b = to_grayscale(pose_b)?;
    let flow = farneback_flow(&gray_a, &gray_b, params)?;
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let radius = keypoint_disc_radius(h.max(w));
    let mut out = Tensor::zeros(&[2, h, w]);
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            if in_any_disc(keypoints_a, y as f64, x as f64, radius) {
                let p = y * w + x;
                out.data_mut()[p] = flow.data()[p];
                out.data_mut()[hw + p] = flow.data()[hw + p];
            }
        }
    }
    Ok(out)
}

/// Splat the exact per-keypoint displacement into discs around the first
/// frame's keypoints. Oracle counterpart of [`keypoint_flow_map`]; overlaps
/// resolve to the nearest keypoint (lowest index on ties).
pub fn exact_keypoint_flow(
    keypoints_a: &[(f64, f64)],
    keypoints_b: &[(f64, f64)],
    resolution: usize,
    radius: f64,
) -> Result<Tensor> {
    if keypoints_a.len() != keypoints_b.len() {
        return Err(Error::Dim("keypoint lists differ in length".into()));
    }
    let r = resolution;
    let mut out = Tensor::zeros(&[2, r, r]);
    let hw = r * r;
    for y in 0..r {
        for x in 0..r {
            let mut best: Option<(f64, usize)> = None;
            for (k, &(ky, kx)) in keypoints_a.iter().enumerate() {
                let d2 = (y as f64 - ky).powi(2) + (x as f64 - kx).powi(2);
                if d2 <= radius * radius && best.map_or(true, |(bd, _)| d2 < bd) {
                    best = Some((d2, k));
                }
            }
            if let Some((_, k)) = best {
                out.data_mut()[y * r + x] = keypoints_b[k].0 - keypoints_a[k].0;
                out.data_mut()[hw + y * r + x] = keypoints_b[k].1 - keypoints_a[k].1;
            }
        }
    }
    Ok(out)
}

fn in_any_disc(keypoints: &[(f64, f64)], y: f64, x: f64, radius: f64) -> bool {
    keypoints
        .iter()
        .any(|&(ky, kx)| (y - ky).powi(2) + (x - kx).powi(2) <= radius * radius)
}

/// Outcome of reference selection: chosen frame indices, their view labels,
/// and any fallback warnings.
#[derive(Clone, Debug)]
pub struct SelectionReport {
    pub indices: Vec<usize>,
    pub labels: Vec<ViewLabel>,
    pub warnings: Vec<String>,
}

/// Pick one reference frame per orientation group (front, back, side, in
/// that order, cycling for n_refs > 3). Empty groups fall back to the
/// largest group with a warning.
pub fn select_references(clip: &SceneClip, n_refs: usize, rng: &mut Rng) -> Result<SelectionReport> {
    if n_refs == 0 {
        return Err(Error::Config("n_refs must be >= 1".into()));
    }
    let labels = label_clip(clip)?;
    let group = |want: ViewLabel| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == want)
            .map(|(i, _)| i)
            .collect()
    };
    let groups = [
        (ViewLabel::Front, group(ViewLabel::Front)),
        (ViewLabel::Back, group(ViewLabel::Back)),
        (ViewLabel::Side, group(ViewLabel::Side)),
    ];
    let largest = groups
        .iter()
        .max_by_key(|(_, g)| g.len())
        .expect("three groups");
    if largest.1.is_empty() {
        return Err(Error::Labeling("clip has no labelable frames".into()));
    }
    let mut report = SelectionReport {
        indices: Vec::with_capacity(n_refs),
        labels: Vec::with_capacity(n_refs),
        warnings: Vec::new(),
    };
    for slot in 0..n_refs {
        let (want, members) = &groups[slot % 3];
        let (pool, label) = if members.is_empty() {
            report.warnings.push(format!(
                "group {} empty; sampling from largest group {}",
                want.as_str(),
                largest.0.as_str()
            ));
            (&largest.1, largest.0)
        } else {
            (members, *want)
        };
        let pick = pool[rng.below(pool.len())];
        report.indices.push(pick);
        report.labels.push(label);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::synthworld::{make_clip, make_turning_clip, render_pose_map, ClipSpec};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            resolution: 64,
            pose_channels: [4, 8, 8],
            ..Default::default()
        }
    }

    fn pose_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let rng = Rng::new(seed);
        let mut store = ParamStore::new();
        create_pose_encoder(&mut store, cfg, &rng).unwrap();
        store
    }

    #[test]
    fn black_map_zero_bias_gives_zero_feature() {
        let cfg = small_cfg();
        let store = pose_store(&cfg, 1);
        let black = Tensor::zeros(&[3, 64, 64]);
        let feat = encode_pose(&store, &black).unwrap();
        // silu(0) = 0, biases are zero-init, so the stack stays at zero.
        assert_eq!(feat.sq_norm(), 0.0);
        assert_eq!(feat.shape(), &[192, 8, 8]);
    }

    #[test]
    fn identical_maps_identical_features() {
        let cfg = small_cfg();
        let store = pose_store(&cfg, 2);
        let clip = make_turning_clip(3, 2, 64, 0.2).unwrap();
        let map = render_pose_map(&clip.keypoints[0], 64);
        let a = encode_pose(&store, &map).unwrap();
        let b = encode_pose(&store, &map).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_is_one_eighth_resolution() {
        let cfg = small_cfg();
        let store = pose_store(&cfg, 3);
        let map = Tensor::zeros(&[3, 64, 64]);
        let feat = encode_pose(&store, &map).unwrap();
        assert_eq!(feat.shape()[1], 8);
        assert_eq!(feat.shape()[2], 8);
    }

    #[test]
    fn translation_covariance_by_stride() {
        // Shifting the pose map 8 px right shifts the feature one cell for
        // cells whose receptive field (31 px) avoids the zero padding.
        let cfg = small_cfg();
        let store = pose_store(&cfg, 4);
        let base = crate::farneback::pattern_tensor(64, 64, (0.0, 0.0));
        let img = Tensor::from_fn(&[3, 64, 64], |i| base.at(&[i[1], i[2]]));
        let shifted = Tensor::from_fn(&[3, 64, 64], |i| {
            if i[2] >= 8 {
                img.at(&[i[0], i[1], i[2] - 8])
            } else {
                0.0
            }
        });
        let fa = encode_pose(&store, &img).unwrap();
        let fb = encode_pose(&store, &shifted).unwrap();
        for c in 0..8 {
            // channel subsample keeps the test fast
            let ch = c * 24;
            for y in 3..6 {
                for x in 3..6 {
                    let d = (fb.at(&[ch, y, x]) - fa.at(&[ch, y, x - 1])).abs();
                    assert!(d < 1e-9, "cell ({y},{x}) ch {ch}: {d}");
                }
            }
        }
    }

    #[test]
    fn static_pose_zero_keypoint_flow() {
        let clip = make_turning_clip(5, 2, 64, 0.0).unwrap();
        let map = render_pose_map(&clip.keypoints[0], 64);
        let delta = keypoint_flow_map(&map, &map, &clip.keypoints[0], &FlowParams::default()).unwrap();
        let max = delta.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-6);
    }

    #[test]
    fn translated_skeleton_flow_in_discs() {
        let spec = ClipSpec {
            seed: 6,
            n_frames: 2,
            resolution: 64,
            turn_rate: 0.0,
            drift: (2.0, 1.0),
            start_yaw: Some(0.0),
        };
        let clip = make_clip(&spec).unwrap();
        let map_a = render_pose_map(&clip.keypoints[0], 64);
        let map_b = render_pose_map(&clip.keypoints[1], 64);
        let delta =
            keypoint_flow_map(&map_a, &map_b, &clip.keypoints[0], &FlowParams::default()).unwrap();
        let radius = keypoint_disc_radius(64);
        let mut worst = 0.0f64;
        for y in 0..64 {
            for x in 0..64 {
                if in_any_disc(&clip.keypoints[0], y as f64, x as f64, radius) {
                    let dy = delta.at(&[0, y, x]);
                    let dx = delta.at(&[1, y, x]);
                    let err = ((dy - 2.0).powi(2) + (dx - 1.0).powi(2)).sqrt();
                    worst = worst.max(err);
                } else {
                    assert_eq!(delta.at(&[0, y, x]), 0.0);
                    assert_eq!(delta.at(&[1, y, x]), 0.0);
                }
            }
        }
        assert!(worst < 0.5, "worst disc error {worst}");
    }

    #[test]
    fn nonzero_fraction_stays_sparse() {
        let clip = make_turning_clip(7, 2, 64, 0.1).unwrap();
        let map_a = render_pose_map(&clip.keypoints[0], 64);
        let map_b = render_pose_map(&clip.keypoints[1], 64);
        let delta =
            keypoint_flow_map(&map_a, &map_b, &clip.keypoints[0], &FlowParams::default()).unwrap();
        let hw = 64 * 64;
        let nonzero = (0..hw)
            .filter(|&p| delta.data()[p] != 0.0 || delta.data()[hw + p] != 0.0)
            .count();
        assert!(
            nonzero as f64 / hw as f64 <= 0.10,
            "fraction {}",
            nonzero as f64 / hw as f64
        );
    }

    #[test]
    fn exact_flow_zero_and_single_keypoint() {
        let kps = vec![(10.0, 10.0), (20.0, 20.0)];
        let zero = exact_keypoint_flow(&kps, &kps, 32, 3.0).unwrap();
        assert_eq!(zero.sq_norm(), 0.0);
        let moved: Vec<(f64, f64)> = vec![(13.0, 10.0), (20.0, 20.0)];
        let f = exact_keypoint_flow(&kps, &moved, 32, 3.0).unwrap();
        assert_eq!(f.at(&[0, 10, 10]), 3.0);
        assert_eq!(f.at(&[1, 10, 10]), 0.0);
        assert_eq!(f.at(&[0, 20, 20]), 0.0);
    }

    #[test]
    fn farneback_vs_exact_oracle_on_translation() {
        let spec = ClipSpec {
            seed: 8,
            n_frames: 2,
            resolution: 64,
            turn_rate: 0.0,
            drift: (1.0, 3.0),
            start_yaw: Some(0.0),
        };
        let clip = make_clip(&spec).unwrap();
        let map_a = render_pose_map(&clip.keypoints[0], 64);
        let map_b = render_pose_map(&clip.keypoints[1], 64);
        let measured =
            keypoint_flow_map(&map_a, &map_b, &clip.keypoints[0], &FlowParams::default()).unwrap();
        let radius = keypoint_disc_radius(64);
        let oracle =
            exact_keypoint_flow(&clip.keypoints[0], &clip.keypoints[1], 64, radius).unwrap();
        let hw = 64 * 64;
        let mut worst = 0.0f64;
        for p in 0..hw {
            if oracle.data()[p] != 0.0 || oracle.data()[hw + p] != 0.0 {
                let dy = measured.data()[p] - oracle.data()[p];
                let dx = measured.data()[hw + p] - oracle.data()[hw + p];
                worst = worst.max((dy * dy + dx * dx).sqrt());
            }
        }
        assert!(worst < 0.5, "worst {worst}");
    }

    #[test]
    fn selection_covers_groups_and_is_seeded() {
        let tau = std::f64::consts::TAU;
        let clip = make_turning_clip(9, 36, 32, tau / 36.0).unwrap();
        for seed in 0..20 {
            let mut rng = Rng::new(seed).split("select");
            let rep = select_references(&clip, 3, &mut rng).unwrap();
            assert!(rep.warnings.is_empty());
            assert_eq!(rep.labels[0], ViewLabel::Front);
            assert_eq!(rep.labels[1], ViewLabel::Back);
            assert_eq!(rep.labels[2], ViewLabel::Side);
            for &i in &rep.indices {
                assert!(i < clip.n_frames());
            }
            let mut rng2 = Rng::new(seed).split("select");
            let rep2 = select_references(&clip, 3, &mut rng2).unwrap();
            assert_eq!(rep.indices, rep2.indices);
        }
    }

    #[test]
    fn static_front_clip_falls_back_with_warnings() {
        let spec = ClipSpec {
            seed: 10,
            n_frames: 6,
            resolution: 32,
            turn_rate: 0.0,
            drift: (0.0, 0.0),
            start_yaw: Some(0.0),
        };
        let clip = make_clip(&spec).unwrap();
        let mut rng = Rng::new(0).split("select");
        let rep = select_references(&clip, 3, &mut rng).unwrap();
        assert_eq!(rep.warnings.len(), 2);
        assert!(rep.labels.iter().all(|l| *l == ViewLabel::Front));
    }
}
