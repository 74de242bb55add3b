//! Two-frame dense optical flow via quadratic polynomial expansion.
//!
//! Each neighborhood of each image is fit with a quadratic
//! `f(p) ~ pT A p + bT p + c` under Gaussian applicability weights. For a
//! displacement `d` between two expansions, `A d = db` with
//! `A = (A1 + A2)/2` and `db = -(b2 - b1)/2`, solved per pixel after window
//! averaging of the normal equations, refined over a fixed number of
//! iterations, and run coarse-to-fine over an image pyramid.
//!
//! Flow is returned as `[2, H, W]` in `(dy, dx)` pixel units. Textureless
//! regions have near-singular normal matrices and regularize to zero flow.

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

/// Pyramidal Farneback parameters.
#[derive(Clone, Debug)]
pub struct FlowParams {
    pub levels: usize,
    pub pyr_scale: f64,
    pub win_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            levels: 3,
            pyr_scale: 0.5,
            win_size: 9,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

/// Luma conversion for `[3, H, W]` RGB.
pub fn to_grayscale(img: &Tensor) -> Result<Tensor> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::Dim("to_grayscale expects [3, H, W]".into()));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[h, w]);
    for p in 0..hw {
        out.data_mut()[p] = 0.299 * img.data()[p]
            + 0.587 * img.data()[hw + p]
            + 0.114 * img.data()[2 * hw + p];
    }
    Ok(out)
}

/// Per-pixel quadratic expansion coefficients.
struct Expansion {
    h: usize,
    w: usize,
    /// c, bx, by, axx, ayy, axy per pixel (the raw basis coefficients).
    coef: Vec<[f64; 6]>,
}

/// Invert a small symmetric positive-definite matrix by Gauss-Jordan.
fn invert_6x6(m: &[[f64; 6]; 6]) -> Result<[[f64; 6]; 6]> {
    let mut a = *m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        // Partial pivot.
        let mut pivot = col;
        for r in col + 1..6 {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Numeric("singular basis Gram matrix".into()));
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..6 {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..6 {
            if r == col {
                continue;
            }
            let f = a[r][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..6 {
                a[r][j] -= f * a[col][j];
                inv[r][j] -= f * inv[col][j];
            }
        }
    }
    Ok(inv)
}

/// Fit the quadratic basis [1, x, y, x^2, y^2, xy] at every pixel with
/// Gaussian weights over a (2r+1)^2 window, border-replicated.
fn polynomial_expansion(img: &Tensor, poly_n: usize, sigma: f64) -> Result<Expansion> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let r = (poly_n / 2) as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            offsets.push((dy, dx, wgt));
        }
    }
    let basis = |dx: f64, dy: f64| [1.0, dx, dy, dx * dx, dy * dy, dx * dy];
    let mut gram = [[0.0; 6]; 6];
    for &(dy, dx, wgt) in &offsets {
        let phi = basis(dx as f64, dy as f64);
        for i in 0..6 {
            for j in 0..6 {
                gram[i][j] += wgt * phi[i] * phi[j];
            }
        }
    }
    let gram_inv = invert_6x6(&gram)?;

    let mut coef = vec![[0.0; 6]; h * w];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            let mut m = [0.0; 6];
            for &(dy, dx, wgt) in &offsets {
                let sy = clamp(y as isize + dy, h);
                let sx = clamp(x as isize + dx, w);
                let f = img.data()[sy * w + sx];
                let phi = basis(dx as f64, dy as f64);
                for k in 0..6 {
                    m[k] += wgt * phi[k] * f;
                }
            }
            let mut c = [0.0; 6];
            for (i, ci) in c.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, mj) in m.iter().enumerate() {
                    acc += gram_inv[i][j] * mj;
                }
                *ci = acc;
            }
            coef[y * w + x] = c;
        }
    }
    Ok(Expansion { h, w, coef })
}

/// Box blur with replicated borders over a win x win window, in place per
/// channel buffer.
fn box_blur(buf: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
    let r = (win / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dx in -r..=r {
                acc += buf[y * w + clamp(x as isize + dx, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; h * w];
    let norm = 1.0 / (win * win) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                acc += tmp[clamp(y as isize + dy, h) * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

/// One refinement pass: rebuild and solve the displacement normal equations
/// with the current flow as the warp estimate.
fn update_flow(exp_a: &Expansion, exp_b: &Expansion, flow: &mut Tensor, win: usize) {
    let (h, w) = (exp_a.h, exp_a.w);
    let hw = h * w;
    let mut g11 = vec![0.0; hw];
    let mut g12 = vec![0.0; hw];
    let mut g22 = vec![0.0; hw];
    let mut h1 = vec![0.0; hw];
    let mut h2 = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let dy = flow.data()[p];
            let dx = flow.data()[hw + p];
            let ty = ((y as f64 + dy).round() as isize).clamp(0, h as isize - 1) as usize;
            let tx = ((x as f64 + dx).round() as isize).clamp(0, w as isize - 1) as usize;
            let ca = exp_a.coef[p];
            let cb = exp_b.coef[ty * w + tx];
            // A = (A1 + A2) / 2 in (x, y) order.
            let axx = 0.5 * (ca[3] + cb[3]);
            let ayy = 0.5 * (ca[4] + cb[4]);
            let axy = 0.25 * (ca[5] + cb[5]);
            // db = -(b2 - b1)/2 + A d
            let dbx = -0.5 * (cb[1] - ca[1]) + axx * dx + axy * dy;
            let dby = -0.5 * (cb[2] - ca[2]) + axy * dx + ayy * dy;
            g11[p] = axx * axx + axy * axy;
            g12[p] = axy * (axx + ayy);
            g22[p] = ayy * ayy + axy * axy;
            h1[p] = axx * dbx + axy * dby;
            h2[p] = axy * dbx + ayy * dby;
        }
    }
    let g11 = box_blur(&g11, h, w, win);
    let g12 = box_blur(&g12, h, w, win);
    let g22 = box_blur(&g22, h, w, win);
    let h1 = box_blur(&h1, h, w, win);
    let h2 = box_blur(&h2, h, w, win);
    for p in 0..hw {
        let det = g11[p] * g22[p] - g12[p] * g12[p];
        // Regularize relative to the matrix scale so [0,1]-range images are
        // not flattened; the absolute floor keeps textureless pixels at zero.
        let tr = g11[p] + g22[p];
        let idet = 1.0 / (det + (1e-6 * tr * tr).max(1e-9));
        let dx = (g22[p] * h1[p] - g12[p] * h2[p]) * idet;
        let dy = (g11[p] * h2[p] - g12[p] * h1[p]) * idet;
        flow.data_mut()[p] = dy;
        flow.data_mut()[hw + p] = dx;
    }
}

/// 5-tap binomial smoothing before downscaling.
fn binomial_blur(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let k = [1.0, 4.0, 6.0, 4.0, 1.0];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img.data()[y * w + clamp(x as isize + i as isize - 2, w)];
            }
            tmp.data_mut()[y * w + x] = acc / 16.0;
        }
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp.data()[clamp(y as isize + i as isize - 2, h) * w + x];
            }
            out.data_mut()[y * w + x] = acc / 16.0;
        }
    }
    out
}

fn downscale(img: &Tensor, scale: f64) -> Result<Tensor> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let smoothed = binomial_blur(img);
    let as3 = smoothed.reshape(&[1, h, w])?;
    let resized = bilinear_resize(&as3, nh, nw)?;
    resized.reshape(&[nh, nw])
}

/// Dense flow from grayscale `a` to grayscale `b`.
pub fn farneback_flow(a: &Tensor, b: &Tensor, params: &FlowParams) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Dim("farneback_flow expects grayscale [H, W]".into()));
    }
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "image sizes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < params.win_size || w < params.win_size {
        return Err(Error::Config(format!(
            "image {}x{} smaller than window {}",
            h, w, params.win_size
        )));
    }
    if params.poly_n % 2 == 0 || params.poly_n < 3 {
        return Err(Error::Config("poly_n must be odd and >= 3".into()));
    }
    if !(params.pyr_scale > 0.0 && params.pyr_scale < 1.0) {
        return Err(Error::Config("pyr_scale must be in (0, 1)".into()));
    }

    // Build pyramids, stopping early if a level would get too small.
    let min_dim = params.poly_n.max(6);
    let mut pyr_a = vec![a.clone()];
    let mut pyr_b = vec![b.clone()];
    for _ in 1..params.levels.max(1) {
        let prev_a = pyr_a.last().unwrap();
        let nh = (prev_a.shape()[0] as f64 * params.pyr_scale).round() as usize;
        let nw = (prev_a.shape()[1] as f64 * params.pyr_scale).round() as usize;
        if nh < min_dim || nw < min_dim {
            break;
        }
        pyr_a.push(downscale(pyr_a.last().unwrap(), params.pyr_scale)?);
        pyr_b.push(downscale(pyr_b.last().unwrap(), params.pyr_scale)?);
    }

    let coarsest = pyr_a.len() - 1;
    let mut flow = Tensor::zeros(&[2, pyr_a[coarsest].shape()[0], pyr_a[coarsest].shape()[1]]);
    for level in (0..=coarsest).rev() {
        let (lh, lw) = (pyr_a[level].shape()[0], pyr_a[level].shape()[1]);
        if flow.shape()[1] != lh || flow.shape()[2] != lw {
            let (ph, pw) = (flow.shape()[1], flow.shape()[2]);
            let mut up = bilinear_resize(&flow, lh, lw)?;
            let (ry, rx) = (lh as f64 / ph as f64, lw as f64 / pw as f64);
            let hw = lh * lw;
            for p in 0..hw {
                up.data_mut()[p] *= ry;
                up.data_mut()[hw + p] *= rx;
            }
            flow = up;
        }
        let exp_a = polynomial_expansion(&pyr_a[level], params.poly_n, params.poly_sigma)?;
        let exp_b = polynomial_expansion(&pyr_b[level], params.poly_n, params.poly_sigma)?;
        let win = params.win_size.min(lh.min(lw)) | 1; // odd, capped by level size
        for _ in 0..params.iterations.max(1) {
            update_flow(&exp_a, &exp_b, &mut flow, win);
        }
    }
    flow.check_finite()?;
    Ok(flow)
}

/// Smooth multi-frequency pattern; `shift = (dy, dx)` samples the pattern
/// displaced so that flow(img(0,0) -> img(shift)) == shift everywhere.
/// Exists for flow verification against known translations.
pub fn pattern_tensor(h: usize, w: usize, shift: (f64, f64)) -> Tensor {
    Tensor::from_fn(&[h, w], |i| {
        let y = i[0] as f64 - shift.0;
        let x = i[1] as f64 - shift.1;
        0.5 + 0.22 * (x * 0.55).sin() + 0.2 * (y * 0.45).cos()
            + 0.08 * ((x * 0.21) + (y * 0.33)).sin()
    })
}
