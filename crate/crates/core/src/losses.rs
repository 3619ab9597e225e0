//! Unsupervised reconstruction objective: masked L1, SSIM and edge-aware
//! disparity smoothness, combined with fixed weights.

use crate::error::{Error, Result};
use crate::image::{DisparityMap, Image, Plane};
use crate::tensor::{Tape, Tensor, Var};

pub const SSIM_C1: f32 = 0.01 * 0.01;
pub const SSIM_C2: f32 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta_p: f32,
    pub beta_ss: f32,
    pub beta_s: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta_p: 0.15, beta_ss: 0.85, beta_s: 0.1 }
    }
}

/// Individual terms and the weighted total, all scalar tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub photometric: Var,
    pub ssim: Var,
    pub smoothness: Var,
}

/// Mean absolute difference over valid pixels.
pub fn photometric_l1(tape: &mut Tape, pred: Var, target: Var, mask: &[f32]) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    tape.masked_mean(abs, mask)
}

/// Mean of (1 - SSIM)/2 over valid pixels, with 3×3 uniform windows.
pub fn ssim_loss(tape: &mut Tape, pred: Var, target: Var, mask: &[f32]) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!("ssim: {:?} vs {:?}", tape.shape(pred), tape.shape(target))));
    }
    let mu_x = tape.box_filter3(pred)?;
    let mu_y = tape.box_filter3(target)?;
    let xx = tape.square(pred);
    let yy = tape.square(target);
    let xy = tape.mul(pred, target)?;
    let e_xx = tape.box_filter3(xx)?;
    let e_yy = tape.box_filter3(yy)?;
    let e_xy = tape.box_filter3(xy)?;
    let mu_x2 = tape.square(mu_x);
    let mu_y2 = tape.square(mu_y);
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let sigma_x = tape.sub(e_xx, mu_x2)?;
    let sigma_y = tape.sub(e_yy, mu_y2)?;
    let sigma_xy = tape.sub(e_xy, mu_xy)?;

    let n1 = tape.affine(mu_xy, 2.0, SSIM_C1);
    let n2 = tape.affine(sigma_xy, 2.0, SSIM_C2);
    let num = tape.mul(n1, n2)?;
    let d1 = tape.add(mu_x2, mu_y2)?;
    let d1 = tape.add_scalar(d1, SSIM_C1);
    let d2 = tape.add(sigma_x, sigma_y)?;
    let d2 = tape.add_scalar(d2, SSIM_C2);
    let den = tape.mul(d1, d2)?;
    let ssim = tape.div(num, den)?;
    let per_pixel = tape.affine(ssim, -0.5, 0.5);
    tape.masked_mean(per_pixel, mask)
}

/// Edge-aware first-order smoothness of the mean-normalized disparity.
/// `image` is treated as a constant; edge weights use the channel mean of
/// the absolute image gradient.
pub fn smoothness(tape: &mut Tape, disp: Var, image: &Tensor) -> Result<Var> {
    let shape = tape.shape(disp).to_vec();
    let (n, h, w) = match shape[..] {
        [n, 1, h, w] => (n, h, w),
        _ => return Err(Error::shape(format!("smoothness expects N×1×H×W disparity, got {shape:?}"))),
    };
    let (c, ih, iw) = match *image.shape() {
        [inn, c, ih, iw] if inn == n => (c, ih, iw),
        ref s => return Err(Error::shape(format!("smoothness image {s:?} incompatible with disparity {shape:?}"))),
    };
    if (ih, iw) != (h, w) {
        return Err(Error::shape(format!("smoothness: image {ih}×{iw} vs disparity {h}×{w}")));
    }
    let (wx, wy) = edge_weights(image.data(), n, c, h, w);

    let mean = tape.mean(disp);
    let norm = tape.div(disp, mean)?;
    let mut total: Option<Var> = None;
    if w > 1 {
        let right = tape.narrow(norm, 3, 1, w - 1)?;
        let left = tape.narrow(norm, 3, 0, w - 1)?;
        let dx = tape.sub(right, left)?;
        let dx = tape.abs(dx);
        let wx = tape.constant(Tensor::new(vec![n, 1, h, w - 1], wx)?);
        let term = tape.mul(dx, wx)?;
        total = Some(tape.mean(term));
    }
    if h > 1 {
        let below = tape.narrow(norm, 2, 1, h - 1)?;
        let above = tape.narrow(norm, 2, 0, h - 1)?;
        let dy = tape.sub(below, above)?;
        let dy = tape.abs(dy);
        let wy = tape.constant(Tensor::new(vec![n, 1, h - 1, w], wy)?);
        let term = tape.mul(dy, wy)?;
        let m = tape.mean(term);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// exp(-mean_c |∂x I|) on N×1×H×(W-1) and exp(-mean_c |∂y I|) on N×1×(H-1)×W.
fn edge_weights(img: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let mut wx = vec![0.0f32; n * h * w.saturating_sub(1)];
    let mut wy = vec![0.0f32; n * h.saturating_sub(1) * w];
    let plane = h * w;
    for b in 0..n {
        let base = b * c * plane;
        if w > 1 {
            for y in 0..h {
                for x in 0..w - 1 {
                    let g: f32 = (0..c)
                        .map(|ch| (img[base + ch * plane + y * w + x + 1] - img[base + ch * plane + y * w + x]).abs())
                        .sum::<f32>()
                        / c as f32;
                    wx[(b * h + y) * (w - 1) + x] = (-g).exp();
                }
            }
        }
        if h > 1 {
            for y in 0..h - 1 {
                for x in 0..w {
                    let g: f32 = (0..c)
                        .map(|ch| (img[base + ch * plane + (y + 1) * w + x] - img[base + ch * plane + y * w + x]).abs())
                        .sum::<f32>()
                        / c as f32;
                    wy[(b * (h - 1) + y) * w + x] = (-g).exp();
                }
            }
        }
    }
    (wx, wy)
}

/// `beta_p·L_p + beta_ss·L_ss + beta_s·L_s`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    disp: Var,
    disp_image: &Tensor,
    mask: &[f32],
    weights: &LossWeights,
) -> Result<LossTerms> {
    let photometric = photometric_l1(tape, pred, target, mask)?;
    let ssim = ssim_loss(tape, pred, target, mask)?;
    let smooth = smoothness(tape, disp, disp_image)?;
    let a = tape.scale(photometric, weights.beta_p);
    let b = tape.scale(ssim, weights.beta_ss);
    let c = tape.scale(smooth, weights.beta_s);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms { total, photometric, ssim, smoothness: smooth })
}

/// Evaluates a loss on plain images through a throwaway tape.
fn with_images<F>(pred: &Image, target: &Image, mask: &Plane, f: F) -> Result<f32>
where
    F: FnOnce(&mut Tape, Var, Var, &[f32]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.constant(pred.to_tensor());
    let t = tape.constant(target.to_tensor());
    let v = f(&mut tape, p, t, mask.data())?;
    Ok(tape.scalar(v))
}

pub fn photometric_l1_value(pred: &Image, target: &Image, mask: &Plane) -> Result<f32> {
    with_images(pred, target, mask, photometric_l1)
}

pub fn ssim_loss_value(pred: &Image, target: &Image, mask: &Plane) -> Result<f32> {
    with_images(pred, target, mask, ssim_loss)
}

pub fn smoothness_value(disp: &DisparityMap, image: &Image) -> Result<f32> {
    let mut tape = Tape::new();
    let d = tape.constant(disp.plane().to_tensor());
    let v = smoothness(&mut tape, d, &image.to_tensor())?;
    Ok(tape.scalar(v))
}

pub fn combined_loss_value(
    pred: &Image,
    target: &Image,
    disp: &DisparityMap,
    disp_image: &Image,
    mask: &Plane,
    weights: &LossWeights,
) -> Result<f32> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.to_tensor());
    let t = tape.constant(target.to_tensor());
    let d = tape.constant(disp.plane().to_tensor());
    let terms = combined_loss(&mut tape, p, t, d, &disp_image.to_tensor(), mask.data(), weights)?;
    Ok(tape.scalar(terms.total))
}
