//! Binary P6 portable-pixmap I/O and the clip sidecar format.
//!
//! Frames are written as `frame_0001.ppm`, `frame_0002.ppm`, ... plus a
//! `clip.txt` sidecar carrying the generation parameters, per-frame yaw, and
//! keypoints. Writing is byte-deterministic.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthworld::{ClipSpec, SceneClip};
use crate::tensor::Tensor;

/// Quantize `[3, H, W]` in [0,1] to 8-bit P6 bytes.
pub fn encode_p6(img: &Tensor) -> Result<Vec<u8>> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::Dim(format!(
            "P6 expects [3, H, W], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", w, h).as_bytes());
    let hw = h * w;
    for p in 0..hw {
        for c in 0..3 {
            let v = img.data()[c * hw + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decode P6 bytes into `[3, H, W]` in [0,1].
pub fn decode_p6(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut i = 0;
    // Parse the three header fields (magic, dims, maxval), skipping comments.
    while fields.len() < 4 && i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..i])
                .map_err(|_| Error::Io("bad P6 header".into()))?
                .to_string(),
        );
    }
    if fields.len() < 4 || fields[0] != "P6" {
        return Err(Error::Io("not a P6 file".into()));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Io("bad width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Io("bad height".into()))?;
    let maxval: usize = fields[3].parse().map_err(|_| Error::Io("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Io(format!("unsupported maxval {maxval}")));
    }
    i += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < i + need {
        return Err(Error::Io("truncated P6 payload".into()));
    }
    let mut img = Tensor::zeros(&[3, h, w]);
    let hw = h * w;
    for p in 0..hw {
        for c in 0..3 {
            img.data_mut()[c * hw + p] = bytes[i + p * 3 + c] as f64 / 255.0;
        }
    }
    Ok(img)
}

pub fn write_frame(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_p6(img)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<Tensor> {
    decode_p6(&fs::read(path)?)
}

/// Write all frames of a clip plus its sidecar into `dir`.
pub fn write_clip(dir: &Path, clip: &SceneClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, frame) in clip.frames.iter().enumerate() {
        write_frame(&dir.join(format!("frame_{:04}.ppm", i + 1)), frame)?;
    }
    let mut side = String::new();
    side.push_str("format = profashion-clip-v1\n");
    side.push_str(&format!("seed = {}\n", clip.spec.seed));
    side.push_str(&format!("n_frames = {}\n", clip.n_frames()));
    side.push_str(&format!("resolution = {}\n", clip.resolution));
    side.push_str(&format!("turn_rate = {:.17e}\n", clip.spec.turn_rate));
    side.push_str(&format!(
        "drift = {:.17e},{:.17e}\n",
        clip.spec.drift.0, clip.spec.drift.1
    ));
    side.push_str(&format!(
        "start_yaw = {:.17e}\n",
        clip.spec.start_yaw.unwrap_or(clip.yaw[0])
    ));
    side.push_str(&format!("body_width_px = {:.17e}\n", clip.body_width_px));
    for (i, yaw) in clip.yaw.iter().enumerate() {
        side.push_str(&format!("yaw_{:04} = {:.17e}\n", i + 1, yaw));
    }
    for (i, kps) in clip.keypoints.iter().enumerate() {
        let joined: Vec<String> = kps
            .iter()
            .map(|(y, x)| format!("{:.17e}:{:.17e}", y, x))
            .collect();
        side.push_str(&format!("keypoints_{:04} = {}\n", i + 1, joined.join(",")));
    }
    fs::write(dir.join("clip.txt"), side)?;
    Ok(())
}

/// Reload a clip directory. Regenerates masks and flow from the sidecar spec
/// so the result is a full `SceneClip`.
pub fn read_clip(dir: &Path) -> Result<SceneClip> {
    let side = fs::read_to_string(dir.join("clip.txt"))?;
    let mut seed = None;
    let mut n_frames = None;
    let mut resolution = None;
    let mut turn_rate = None;
    let mut drift = (0.0, 0.0);
    let mut start_yaw = None;
    for line in side.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        match k {
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| Error::Io("bad seed".into()))?),
            "n_frames" => {
                n_frames = Some(v.parse::<usize>().map_err(|_| Error::Io("bad n_frames".into()))?)
            }
            "resolution" => {
                resolution =
                    Some(v.parse::<usize>().map_err(|_| Error::Io("bad resolution".into()))?)
            }
            "turn_rate" => {
                turn_rate = Some(v.parse::<f64>().map_err(|_| Error::Io("bad turn_rate".into()))?)
            }
            "start_yaw" => {
                start_yaw = Some(v.parse::<f64>().map_err(|_| Error::Io("bad start_yaw".into()))?)
            }
            "drift" => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Io("bad drift".into()))?;
                drift = (
                    a.trim().parse().map_err(|_| Error::Io("bad drift".into()))?,
                    b.trim().parse().map_err(|_| Error::Io("bad drift".into()))?,
                );
            }
            _ => {}
        }
    }
    let spec = ClipSpec {
        seed: seed.ok_or_else(|| Error::Io("sidecar missing seed".into()))?,
        n_frames: n_frames.ok_or_else(|| Error::Io("sidecar missing n_frames".into()))?,
        resolution: resolution.ok_or_else(|| Error::Io("sidecar missing resolution".into()))?,
        turn_rate: turn_rate.ok_or_else(|| Error::Io("sidecar missing turn_rate".into()))?,
        drift,
        start_yaw,
    };
    crate::synthworld::make_clip(&spec)
}
