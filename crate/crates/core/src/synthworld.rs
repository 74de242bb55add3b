//! Procedural turning-character clips with view-dependent textures.
//!
//! The character is a flat billboard in a body plane: every drawn element
//! (torso, head, limbs) is defined in body coordinates `(u, v)` with `u`
//! lateral and `v` vertical, and rendered by inverse-mapping each pixel
//! through the yaw rotation. Because the projection is affine in `(u, v)`,
//! the displacement of every character pixel between frames has a closed
//! form, which is what [`ground_truth_flow`] returns.
//!
//! The torso carries an 8x8 front texture and a different 8x8 back texture,
//! so view-consistency failures show up directly as color error.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Number of skeleton keypoints.
pub const NUM_KEYPOINTS: usize = 9;

/// Keypoint order: head, L/R shoulder, L/R hip, L/R hand, L/R foot.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "head", "l_shoulder", "r_shoulder", "l_hip", "r_hip", "l_hand", "r_hand", "l_foot", "r_foot",
];

pub const IDX_HEAD: usize = 0;
pub const IDX_L_SHOULDER: usize = 1;
pub const IDX_R_SHOULDER: usize = 2;
pub const IDX_L_HIP: usize = 3;
pub const IDX_R_HIP: usize = 4;
pub const IDX_L_HAND: usize = 5;
pub const IDX_R_HAND: usize = 6;
pub const IDX_L_FOOT: usize = 7;
pub const IDX_R_FOOT: usize = 8;

/// Body-plane keypoint positions (u lateral, v vertical in [0,1]).
/// The character's left is +u, so at yaw 0 (facing the camera) the left
/// shoulder projects to the viewer's right.
const BODY_KEYPOINTS: [(f64, f64); NUM_KEYPOINTS] = [
    (0.00, 0.92),  // head
    (0.22, 0.72),  // l_shoulder
    (-0.22, 0.72), // r_shoulder
    (0.13, 0.42),  // l_hip
    (-0.13, 0.42), // r_hip
    (0.34, 0.44),  // l_hand
    (-0.34, 0.44), // r_hand
    (0.14, 0.02),  // l_foot
    (-0.14, 0.02), // r_foot
];

/// Limb segments as keypoint index pairs.
pub const LIMBS: [(usize, usize); 10] = [
    (IDX_HEAD, IDX_L_SHOULDER),
    (IDX_HEAD, IDX_R_SHOULDER),
    (IDX_L_SHOULDER, IDX_R_SHOULDER),
    (IDX_L_SHOULDER, IDX_L_HAND),
    (IDX_R_SHOULDER, IDX_R_HAND),
    (IDX_L_SHOULDER, IDX_L_HIP),
    (IDX_R_SHOULDER, IDX_R_HIP),
    (IDX_L_HIP, IDX_R_HIP),
    (IDX_L_HIP, IDX_L_FOOT),
    (IDX_R_HIP, IDX_R_FOOT),
];

/// Fixed limb color table (pose maps and frames share it).
pub const LIMB_COLORS: [[f64; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.90, 0.45, 0.10],
    [0.90, 0.90, 0.10],
    [0.45, 0.90, 0.10],
    [0.10, 0.90, 0.10],
    [0.10, 0.90, 0.45],
    [0.10, 0.90, 0.90],
    [0.10, 0.45, 0.90],
    [0.10, 0.10, 0.90],
    [0.45, 0.10, 0.90],
];

/// Fixed joint color table.
pub const JOINT_COLORS: [[f64; 3]; NUM_KEYPOINTS] = [
    [1.00, 0.30, 0.30],
    [1.00, 0.80, 0.20],
    [0.80, 1.00, 0.20],
    [0.20, 1.00, 0.50],
    [0.20, 1.00, 1.00],
    [0.20, 0.50, 1.00],
    [0.50, 0.20, 1.00],
    [1.00, 0.20, 1.00],
    [1.00, 1.00, 1.00],
];

/// Coarse frame orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewLabel {
    Front,
    Back,
    Side,
}

impl ViewLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViewLabel::Front => "front",
            ViewLabel::Back => "back",
            ViewLabel::Side => "side",
        }
    }
}

/// Front/back/side threshold as a fraction of body width.
pub const VIEW_TAU: f64 = 0.25;

/// Body geometry plus the two torso textures.
#[derive(Clone, Debug)]
pub struct Character {
    /// 8x8 RGB texel grids.
    pub front_texture: [[[f64; 3]; 8]; 8],
    pub back_texture: [[[f64; 3]; 8]; 8],
    /// Torso rectangle in body coords: (u_min, u_max, v_min, v_max).
    pub torso: (f64, f64, f64, f64),
    pub head_radius: f64,
    pub limb_half_width: f64,
    pub side_color: [f64; 3],
}

impl Character {
    /// Checker front, striped back. Colors are drawn per seed over the full
    /// gamut so different seeds give genuinely different garments; within a
    /// side the two colors are forced apart so the pattern stays visible.
    pub fn from_seed(seed: u64) -> Character {
        let mut rng = Rng::new(seed).split("character");
        let color = |rng: &mut Rng| {
            [
                rng.uniform_in(0.1, 0.95),
                rng.uniform_in(0.1, 0.95),
                rng.uniform_in(0.1, 0.95),
            ]
        };
        let pair = |rng: &mut Rng| loop {
            let a = color(rng);
            let b = color(rng);
            let dist: f64 = (0..3).map(|i| (a[i] - b[i]) as f64).map(f64::abs).sum();
            if dist >= 0.6 {
                return (a, b);
            }
        };
        let (fa, fb) = pair(&mut rng);
        let (ba, bb) = pair(&mut rng);
        let mut front = [[[0.0; 3]; 8]; 8];
        let mut back = [[[0.0; 3]; 8]; 8];
        for ty in 0..8 {
            for tx in 0..8 {
                front[ty][tx] = if (ty + tx) % 2 == 0 { fa } else { fb };
                back[ty][tx] = if tx % 2 == 0 { ba } else { bb };
            }
        }
        Character {
            front_texture: front,
            back_texture: back,
            torso: (-0.32, 0.32, 0.18, 0.78),
            head_radius: 0.10,
            limb_half_width: 0.035,
            side_color: [0.55, 0.55, 0.55],
        }
    }

    pub fn body_keypoints(&self) -> &'static [(f64, f64); NUM_KEYPOINTS] {
        &BODY_KEYPOINTS
    }
}

/// Full parameterization of a clip (the seed alone determines the character
/// and the initial yaw; rate and drift determine motion).
#[derive(Clone, Debug)]
pub struct ClipSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub resolution: usize,
    /// Yaw increment per frame, radians.
    pub turn_rate: f64,
    /// Screen-space translation per frame, (dy, dx) pixels.
    pub drift: (f64, f64),
    /// Starting yaw; `None` draws a small jitter from the seed.
    pub start_yaw: Option<f64>,
}

impl ClipSpec {
    pub fn turning(seed: u64, n_frames: usize, resolution: usize, turn_rate: f64) -> ClipSpec {
        ClipSpec {
            seed,
            n_frames,
            resolution,
            turn_rate,
            drift: (0.0, 0.0),
            start_yaw: None,
        }
    }
}

/// A synthetic video: frames, per-frame keypoints and yaw, per-transition
/// ground-truth flow, and per-frame character masks.
#[derive(Clone, Debug)]
pub struct SceneClip {
    pub frames: Vec<Tensor>,
    /// Screen-space keypoints per frame, (y, x) pixels.
    pub keypoints: Vec<Vec<(f64, f64)>>,
    pub yaw: Vec<f64>,
    /// gt_flow[i] maps frame i to frame i+1, zero on background.
    pub gt_flow: Vec<Tensor>,
    /// Character coverage per frame.
    pub masks: Vec<Vec<bool>>,
    pub resolution: usize,
    /// Shoulder separation at yaw 0, pixels.
    pub body_width_px: f64,
    pub character: Character,
    pub spec: ClipSpec,
}

impl SceneClip {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Projection scale: body height in pixels.
fn body_scale(resolution: usize) -> f64 {
    0.8 * resolution as f64
}

/// Side-on threshold on |cos yaw| below which the billboard degenerates to a
/// profile strip.
const SIDE_EPS: f64 = 0.05;

struct Camera {
    cx: f64,
    cy: f64,
    scale: f64,
}

impl Camera {
    fn new(resolution: usize) -> Camera {
        let c = (resolution as f64 - 1.0) / 2.0;
        Camera {
            cx: c,
            cy: c,
            scale: body_scale(resolution),
        }
    }

    /// Project body coords to screen (y, x) under yaw and drift.
    fn project(&self, u: f64, v: f64, yaw: f64, drift: (f64, f64)) -> (f64, f64) {
        let x = self.cx + drift.1 + self.scale * u * yaw.cos();
        let y = self.cy + drift.0 + self.scale * (0.5 - v);
        (y, x)
    }

    /// Inverse-map a pixel to body coords; `None` when the view is side-on.
    fn unproject(&self, y: f64, x: f64, yaw: f64, drift: (f64, f64)) -> Option<(f64, f64)> {
        let c = yaw.cos();
        if c.abs() < SIDE_EPS {
            return None;
        }
        let u = (x - self.cx - drift.1) / (self.scale * c);
        let v = 0.5 - (y - self.cy - drift.0) / self.scale;
        Some((u, v))
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt()
}

/// Which body element covers a body-plane point, if any.
enum BodyElement {
    Head,
    Limb(usize),
    Torso,
}

fn body_hit(ch: &Character, u: f64, v: f64) -> Option<BodyElement> {
    let (hu, hv) = BODY_KEYPOINTS[IDX_HEAD];
    let du = u - hu;
    let dv = v - hv;
    if du * du + dv * dv <= ch.head_radius * ch.head_radius {
        return Some(BodyElement::Head);
    }
    for (li, &(a, b)) in LIMBS.iter().enumerate() {
        let pa = BODY_KEYPOINTS[a];
        let pb = BODY_KEYPOINTS[b];
        if dist_to_segment((u, v), pa, pb) <= ch.limb_half_width {
            return Some(BodyElement::Limb(li));
        }
    }
    let (u0, u1, v0, v1) = ch.torso;
    if u >= u0 && u <= u1 && v >= v0 && v <= v1 {
        return Some(BodyElement::Torso);
    }
    None
}

const HEAD_COLOR: [f64; 3] = [0.95, 0.80, 0.65];

fn torso_texel(ch: &Character, u: f64, v: f64, facing_front: bool) -> [f64; 3] {
    let (u0, u1, v0, v1) = ch.torso;
    // Seen from behind, the lateral axis mirrors.
    let tu = if facing_front {
        (u - u0) / (u1 - u0)
    } else {
        (u1 - u) / (u1 - u0)
    };
    let tv = (v1 - v) / (v1 - v0);
    let tx = ((tu * 8.0).floor() as isize).clamp(0, 7) as usize;
    let ty = ((tv * 8.0).floor() as isize).clamp(0, 7) as usize;
    if facing_front {
        ch.front_texture[ty][tx]
    } else {
        ch.back_texture[ty][tx]
    }
}

fn render_frame(
    ch: &Character,
    cam: &Camera,
    resolution: usize,
    yaw: f64,
    drift: (f64, f64),
) -> (Tensor, Vec<bool>) {
    let r = resolution;
    let mut img = Tensor::zeros(&[3, r, r]);
    let mut mask = vec![false; r * r];
    let c = yaw.cos();
    let facing_front = c > 0.0;
    for y in 0..r {
        for x in 0..r {
            let color = if c.abs() >= SIDE_EPS {
                match cam.unproject(y as f64, x as f64, yaw, drift) {
                    Some((u, v)) => body_hit(ch, u, v).map(|el| match el {
                        BodyElement::Head => HEAD_COLOR,
                        BodyElement::Limb(li) => LIMB_COLORS[li],
                        BodyElement::Torso => torso_texel(ch, u, v, facing_front),
                    }),
                    None => None,
                }
            } else {
                // Side-on: the billboard collapses to a thin profile strip.
                let strip_w = (0.02 * cam.scale).max(1.0);
                let v = 0.5 - (y as f64 - cam.cy - drift.0) / cam.scale;
                if (x as f64 - cam.cx - drift.1).abs() <= strip_w && (0.0..=0.95).contains(&v) {
                    Some(ch.side_color)
                } else {
                    None
                }
            };
            if let Some(col) = color {
                for (chan, &val) in col.iter().enumerate() {
                    img.data_mut()[(chan * r + y) * r + x] = val;
                }
                mask[y * r + x] = true;
            }
        }
    }
    (img, mask)
}

/// Generate a clip where the character turns by `turn_rate` per frame.
pub fn make_turning_clip(
    seed: u64,
    n_frames: usize,
    resolution: usize,
    turn_rate: f64,
) -> Result<SceneClip> {
    make_clip(&ClipSpec::turning(seed, n_frames, resolution, turn_rate))
}

/// Generate a clip from a full spec.
pub fn make_clip(spec: &ClipSpec) -> Result<SceneClip> {
    if spec.resolution < 16 {
        return Err(Error::Config(format!(
            "resolution {} below minimum 16",
            spec.resolution
        )));
    }
    if spec.n_frames < 2 {
        return Err(Error::Config("clip needs at least 2 frames".into()));
    }
    let ch = Character::from_seed(spec.seed);
    let cam = Camera::new(spec.resolution);
    let start_yaw = spec.start_yaw.unwrap_or_else(|| {
        let mut rng = Rng::new(spec.seed).split("clip.start_yaw");
        rng.uniform_in(-0.1, 0.1)
    });

    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut keypoints = Vec::with_capacity(spec.n_frames);
    let mut yaws = Vec::with_capacity(spec.n_frames);
    let mut masks = Vec::with_capacity(spec.n_frames);
    for i in 0..spec.n_frames {
        let yaw = start_yaw + spec.turn_rate * i as f64;
        let drift = (spec.drift.0 * i as f64, spec.drift.1 * i as f64);
        let (img, mask) = render_frame(&ch, &cam, spec.resolution, yaw, drift);
        let kps = BODY_KEYPOINTS
            .iter()
            .map(|&(u, v)| cam.project(u, v, yaw, drift))
            .collect();
        frames.push(img);
        keypoints.push(kps);
        yaws.push(yaw);
        masks.push(mask);
    }

    let body_width_px = {
        let (lu, lv) = BODY_KEYPOINTS[IDX_L_SHOULDER];
        let (ru, rv) = BODY_KEYPOINTS[IDX_R_SHOULDER];
        let l = cam.project(lu, lv, 0.0, (0.0, 0.0));
        let r = cam.project(ru, rv, 0.0, (0.0, 0.0));
        l.1 - r.1
    };

    let mut clip = SceneClip {
        frames,
        keypoints,
        yaw: yaws,
        gt_flow: Vec::new(),
        masks,
        resolution: spec.resolution,
        body_width_px,
        character: ch,
        spec: spec.clone(),
    };
    for i in 0..spec.n_frames - 1 {
        let f = compute_flow(&clip, i)?;
        clip.gt_flow.push(f);
    }
    Ok(clip)
}

/// Analytic per-pixel displacement of the rendered character from frame
/// `index` to `index + 1`; zero on background and on side-on frames.
pub fn ground_truth_flow(clip: &SceneClip, index: usize) -> Result<Tensor> {
    if index + 1 >= clip.n_frames() {
        return Err(Error::Config(format!(
            "flow index {} out of range for {} frames",
            index,
            clip.n_frames()
        )));
    }
    compute_flow(clip, index)
}

fn compute_flow(clip: &SceneClip, index: usize) -> Result<Tensor> {
    let r = clip.resolution;
    let cam = Camera::new(r);
    let yaw_a = clip.yaw[index];
    let yaw_b = clip.yaw[index + 1];
    let drift_a = (
        clip.spec.drift.0 * index as f64,
        clip.spec.drift.1 * index as f64,
    );
    let drift_b = (
        clip.spec.drift.0 * (index + 1) as f64,
        clip.spec.drift.1 * (index + 1) as f64,
    );
    let mut flow = Tensor::zeros(&[2, r, r]);
    if yaw_a == yaw_b && drift_a == drift_b {
        return Ok(flow); // identical transform: displacement is exactly zero
    }
    if yaw_a.cos().abs() < SIDE_EPS || yaw_b.cos().abs() < SIDE_EPS {
        return Ok(flow); // degenerate side-on views carry no flow estimate
    }
    let mask = &clip.masks[index];
    for y in 0..r {
        for x in 0..r {
            if !mask[y * r + x] {
                continue;
            }
            let (u, v) = cam
                .unproject(y as f64, x as f64, yaw_a, drift_a)
                .expect("non-side view");
            let (ny, nx) = cam.project(u, v, yaw_b, drift_b);
            flow.data_mut()[y * r + x] = ny - y as f64;
            flow.data_mut()[r * r + y * r + x] = nx - x as f64;
        }
    }
    Ok(flow)
}

/// Draw the skeleton: limbs as colored thick segments, joints as discs,
/// black background.
pub fn render_pose_map(keypoints: &[(f64, f64)], resolution: usize) -> Tensor {
    let r = resolution;
    let mut img = Tensor::zeros(&[3, r, r]);
    if keypoints.is_empty() {
        return img;
    }
    let limb_thickness = (resolution as f64 / 48.0).max(1.0);
    let joint_radius = (resolution as f64 / 28.0).max(1.5);
    for y in 0..r {
        for x in 0..r {
            let p = (x as f64, y as f64);
            let mut color: Option<[f64; 3]> = None;
            if keypoints.len() == NUM_KEYPOINTS {
                for (li, &(a, b)) in LIMBS.iter().enumerate() {
                    let (ay, ax) = keypoints[a];
                    let (by, bx) = keypoints[b];
                    if dist_to_segment(p, (ax, ay), (bx, by)) <= limb_thickness {
                        color = Some(LIMB_COLORS[li]);
                        break;
                    }
                }
            }
            // Joints draw over limbs.
            for (ki, &(ky, kx)) in keypoints.iter().enumerate() {
                let dx = x as f64 - kx;
                let dy = y as f64 - ky;
                if dx * dx + dy * dy <= joint_radius * joint_radius {
                    color = Some(JOINT_COLORS[ki % NUM_KEYPOINTS]);
                    break;
                }
            }
            if let Some(col) = color {
                for (chan, &val) in col.iter().enumerate() {
                    img.data_mut()[(chan * r + y) * r + x] = val;
                }
            }
        }
    }
    img
}

/// Label a frame front/back/side from the signed left-right shoulder offset.
pub fn label_view(keypoints: &[(f64, f64)], body_width_px: f64) -> Result<ViewLabel> {
    if keypoints.len() < 3 {
        return Err(Error::Labeling(
            "need at least head and both shoulders to label a view".into(),
        ));
    }
    let s = keypoints[IDX_L_SHOULDER].1 - keypoints[IDX_R_SHOULDER].1;
    let tau = VIEW_TAU * body_width_px;
    Ok(if s > tau {
        ViewLabel::Front
    } else if s < -tau {
        ViewLabel::Back
    } else {
        ViewLabel::Side
    })
}

/// Per-frame labels for a whole clip.
pub fn label_clip(clip: &SceneClip) -> Result<Vec<ViewLabel>> {
    clip.keypoints
        .iter()
        .map(|kps| label_view(kps, clip.body_width_px))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_clip_identical_frames_zero_flow() {
        let clip = make_turning_clip(5, 4, 32, 0.0).unwrap();
        for i in 1..4 {
            assert_eq!(clip.frames[0], clip.frames[i]);
        }
        for f in &clip.gt_flow {
            assert_eq!(f.sq_norm(), 0.0);
        }
    }

    #[test]
    fn front_then_back_textures_visible() {
        // Two frames: yaw 0 and yaw pi.
        let spec = ClipSpec {
            seed: 2,
            n_frames: 2,
            resolution: 48,
            turn_rate: std::f64::consts::PI,
            drift: (0.0, 0.0),
            start_yaw: Some(0.0),
        };
        let clip = make_clip(&spec).unwrap();
        let ch = &clip.character;
        // Center torso pixel.
        let cam = Camera::new(48);
        let (y, x) = cam.project(0.05, 0.6, 0.0, (0.0, 0.0));
        let (yi, xi) = (y.round() as usize, x.round() as usize);
        let front_px: Vec<f64> = (0..3).map(|c| clip.frames[0].at(&[c, yi, xi])).collect();
        let back_px: Vec<f64> = (0..3).map(|c| clip.frames[1].at(&[c, yi, xi])).collect();
        let front_cols: Vec<[f64; 3]> = ch.front_texture.iter().flatten().copied().collect();
        let back_cols: Vec<[f64; 3]> = ch.back_texture.iter().flatten().copied().collect();
        let is_in = |px: &[f64], cols: &[[f64; 3]]| {
            cols.iter()
                .any(|c| (c[0] - px[0]).abs() + (c[1] - px[1]).abs() + (c[2] - px[2]).abs() < 1e-9)
        };
        assert!(is_in(&front_px, &front_cols));
        assert!(is_in(&back_px, &back_cols));
        assert!(!is_in(&back_px, &front_cols));
    }

    #[test]
    fn keypoints_match_analytic_rotation() {
        let spec = ClipSpec {
            seed: 3,
            n_frames: 10,
            resolution: 64,
            turn_rate: 0.17,
            drift: (0.3, -0.2),
            start_yaw: Some(0.05),
        };
        let clip = make_clip(&spec).unwrap();
        let s = body_scale(64);
        let c0 = (64.0 - 1.0) / 2.0;
        for (i, kps) in clip.keypoints.iter().enumerate() {
            let yaw = 0.05 + 0.17 * i as f64;
            for (k, &(y, x)) in kps.iter().enumerate() {
                let (u, v) = BODY_KEYPOINTS[k];
                let ex = c0 + (-0.2) * i as f64 + s * u * yaw.cos();
                let ey = c0 + 0.3 * i as f64 + s * (0.5 - v);
                assert!((x - ex).abs() < 1e-9, "frame {i} kp {k} x");
                assert!((y - ey).abs() < 1e-9, "frame {i} kp {k} y");
            }
        }
    }

    #[test]
    fn translation_clip_constant_flow() {
        let spec = ClipSpec {
            seed: 4,
            n_frames: 3,
            resolution: 32,
            turn_rate: 0.0,
            drift: (1.0, 2.0),
            start_yaw: Some(0.0),
        };
        let clip = make_clip(&spec).unwrap();
        let f = &clip.gt_flow[0];
        let mask = &clip.masks[0];
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..32 {
                if mask[y * 32 + x] {
                    assert!((f.at(&[0, y, x]) - 1.0).abs() < 1e-12);
                    assert!((f.at(&[1, y, x]) - 2.0).abs() < 1e-12);
                    checked += 1;
                } else {
                    assert_eq!(f.at(&[0, y, x]), 0.0);
                    assert_eq!(f.at(&[1, y, x]), 0.0);
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn rotation_flow_proportional_to_axis_distance() {
        let spec = ClipSpec {
            seed: 5,
            n_frames: 2,
            resolution: 64,
            turn_rate: 0.1,
            drift: (0.0, 0.0),
            start_yaw: Some(0.2),
        };
        let clip = make_clip(&spec).unwrap();
        let f = ground_truth_flow(&clip, 0).unwrap();
        let cx = (64.0 - 1.0) / 2.0;
        let ratio = (0.3f64.cos() / 0.2f64.cos()) - 1.0;
        let mask = &clip.masks[0];
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                if !mask[y * 64 + x] {
                    continue;
                }
                let expect = (x as f64 - cx) * ratio;
                assert!(
                    (f.at(&[1, y, x]) - expect).abs() < 1e-6,
                    "dx at ({y},{x}): {} vs {}",
                    f.at(&[1, y, x]),
                    expect
                );
                assert!(f.at(&[0, y, x]).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn flow_index_out_of_range() {
        let clip = make_turning_clip(6, 3, 32, 0.1).unwrap();
        assert!(ground_truth_flow(&clip, 2).is_err());
        assert!(ground_truth_flow(&clip, 1).is_ok());
    }

    #[test]
    fn pose_map_empty_and_single() {
        let empty = render_pose_map(&[], 32);
        assert_eq!(empty.sq_norm(), 0.0);
        let one = render_pose_map(&[(16.0, 16.0)], 32);
        assert!(one.sq_norm() > 0.0);
        // Disc center carries the head joint color.
        assert!((one.at(&[0, 16, 16]) - JOINT_COLORS[0][0]).abs() < 1e-12);
    }

    #[test]
    fn pose_map_deterministic() {
        let clip = make_turning_clip(7, 2, 32, 0.1).unwrap();
        let a = render_pose_map(&clip.keypoints[0], 32);
        let b = render_pose_map(&clip.keypoints[0], 32);
        assert_eq!(a, b);
    }

    #[test]
    fn view_labels_by_yaw() {
        let cam = Camera::new(64);
        let project_all = |yaw: f64| -> Vec<(f64, f64)> {
            BODY_KEYPOINTS
                .iter()
                .map(|&(u, v)| cam.project(u, v, yaw, (0.0, 0.0)))
                .collect()
        };
        let bw = {
            let l = cam.project(BODY_KEYPOINTS[1].0, BODY_KEYPOINTS[1].1, 0.0, (0.0, 0.0));
            let r = cam.project(BODY_KEYPOINTS[2].0, BODY_KEYPOINTS[2].1, 0.0, (0.0, 0.0));
            l.1 - r.1
        };
        assert_eq!(label_view(&project_all(0.0), bw).unwrap(), ViewLabel::Front);
        assert_eq!(
            label_view(&project_all(std::f64::consts::PI), bw).unwrap(),
            ViewLabel::Back
        );
        // s/bw = cos(pi/2) = 0 < tau -> side.
        assert_eq!(
            label_view(&project_all(std::f64::consts::FRAC_PI_2), bw).unwrap(),
            ViewLabel::Side
        );
    }

    #[test]
    fn missing_shoulders_rejected() {
        assert!(label_view(&[(1.0, 1.0)], 10.0).is_err());
    }

    #[test]
    fn full_turn_covers_all_views() {
        let tau = std::f64::consts::TAU;
        let clip = make_turning_clip(8, 12, 32, tau / 12.0).unwrap();
        let labels = label_clip(&clip).unwrap();
        for want in [ViewLabel::Front, ViewLabel::Back, ViewLabel::Side] {
            assert!(labels.contains(&want), "missing {:?}", want);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = make_turning_clip(9, 5, 32, 0.3).unwrap();
        let b = make_turning_clip(9, 5, 32, 0.3).unwrap();
        for i in 0..5 {
            assert_eq!(a.frames[i], b.frames[i]);
        }
        let c = make_turning_clip(10, 5, 32, 0.3).unwrap();
        assert!(a.frames[0].max_abs_diff(&c.frames[0]) > 0.0);
    }

    #[test]
    fn tiny_resolution_rejected() {
        assert!(make_turning_clip(0, 4, 15, 0.1).is_err());
        assert!(make_turning_clip(0, 1, 32, 0.1).is_err());
    }
}
