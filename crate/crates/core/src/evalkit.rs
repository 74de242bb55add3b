//! Image metrics: SSIM, PSNR, and view-grouped masked error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::synthworld::ViewLabel;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Images here live in [0, 1].
pub const DYNAMIC_RANGE: f64 = 1.0;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(g);
            total += g;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Structural similarity: Gaussian-weighted 11x11 windows, averaged over all
/// valid window positions and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "ssim on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape().len() != 3 {
        return Err(Error::Dim("ssim expects [C, H, W]".into()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dim(format!(
            "image {}x{} smaller than SSIM window {}",
            h, w, SSIM_WINDOW
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for wy in 0..=h - SSIM_WINDOW {
            for wx in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                let mut k = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = win[k];
                        k += 1;
                        let x = pa[(wy + dy) * w + wx + dx];
                        let y = pb[(wy + dy) * w + wx + dx];
                        ma += g * x;
                        mb += g * y;
                        va += g * x * x;
                        vb += g * y * y;
                        cov += g * x * y;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                acc += s;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// PSNR in dB for range-1 images; identical images give +infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
}

/// MSE over character-mask pixels, grouped by frame view label.
pub fn view_masked_error(
    pred: &[Tensor],
    gt: &[Tensor],
    labels: &[ViewLabel],
    masks: &[Vec<bool>],
) -> Result<BTreeMap<&'static str, f64>> {
    if pred.len() != gt.len() || pred.len() != labels.len() || pred.len() != masks.len() {
        return Err(Error::Dim("clip lengths differ".into()));
    }
    let mut sums: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for (((p, g), label), mask) in pred.iter().zip(gt).zip(labels).zip(masks) {
        if p.shape() != g.shape() {
            return Err(Error::Dim("frame shapes differ".into()));
        }
        let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        if mask.len() != h * w {
            return Err(Error::Dim("mask size mismatch".into()));
        }
        let entry = sums.entry(label.as_str()).or_insert((0.0, 0));
        for ch in 0..c {
            for (pix, m) in mask.iter().enumerate() {
                if *m {
                    let d = p.data()[ch * h * w + pix] - g.data()[ch * h * w + pix];
                    entry.0 += d * d;
                    entry.1 += 1;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, if n == 0 { 0.0 } else { s / n as f64 }))
        .collect())
}

/// Per-frame and aggregate metrics with run metadata, serialized with a
/// canonical key order.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_frame_ssim: Vec<f64>,
    pub per_frame_psnr: Vec<f64>,
    pub view_mse: BTreeMap<&'static str, f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn build(
        pred: &[Tensor],
        gt: &[Tensor],
        labels: &[ViewLabel],
        masks: &[Vec<bool>],
        seed: u64,
        config_hash: String,
    ) -> Result<MetricReport> {
        let mut per_frame_ssim = Vec::with_capacity(pred.len());
        let mut per_frame_psnr = Vec::with_capacity(pred.len());
        for (p, g) in pred.iter().zip(gt.iter()) {
            per_frame_ssim.push(ssim(p, g)?);
            per_frame_psnr.push(psnr(p, g)?);
        }
        Ok(MetricReport {
            per_frame_ssim,
            per_frame_psnr,
            view_mse: view_masked_error(pred, gt, labels, masks)?,
            seed,
            config_hash,
        })
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.per_frame_ssim)
    }

    /// Mean over finite frames; infinite frames counted separately.
    pub fn mean_psnr(&self) -> (f64, usize) {
        let finite: Vec<f64> = self
            .per_frame_psnr
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        let infinite = self.per_frame_psnr.len() - finite.len();
        (mean(&finite), infinite)
    }

    /// Canonical text form: fixed key order, stable float formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("report = metric-report-v1\n");
        s.push_str(&format!("config_hash = {}\n", self.config_hash));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("mean_ssim = {:.12e}\n", self.mean_ssim()));
        let (mp, inf) = self.mean_psnr();
        s.push_str(&format!("mean_psnr_db = {:.12e}\n", mp));
        s.push_str(&format!("psnr_infinite_frames = {}\n", inf));
        for (group, v) in &self.view_mse {
            s.push_str(&format!("view_mse_{} = {:.12e}\n", group, v));
        }
        for (i, v) in self.per_frame_ssim.iter().enumerate() {
            s.push_str(&format!("ssim_{:04} = {:.12e}\n", i + 1, v));
        }
        for (i, v) in self.per_frame_psnr.iter().enumerate() {
            if v.is_finite() {
                s.push_str(&format!("psnr_{:04} = {:.12e}\n", i + 1, v));
            } else {
                s.push_str(&format!("psnr_{:04} = inf\n", i + 1));
            }
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
