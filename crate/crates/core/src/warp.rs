//! Differentiable view synthesis: stereo reconstruction of the right view
//! from the left view and a disparity map, and rigid reconstruction of a
//! target frame from a reference frame, depth and camera parameters.
//!
//! Samples that land outside the source image are marked invalid and
//! contribute neither value nor gradient.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::image::{DepthMap, DisparityMap, Image, Plane};

/// Number of camera scalars: fx, fy, cx, cy, rotation (3), translation (3).
pub const CAM_PARAMS: usize = 10;

/// Pinhole intrinsics plus the rigid motion mapping target-camera
/// coordinates into the reference camera (axis-angle rotation, radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub rotation: [f32; 3],
    pub translation: [f32; 3],
}

impl CameraParams {
    pub fn identity(fx: f32, fy: f32, cx: f32, cy: f32) -> Self {
        Self { fx, fy, cx, cy, rotation: [0.0; 3], translation: [0.0; 3] }
    }

    pub fn to_array(&self) -> [f32; CAM_PARAMS] {
        let [rx, ry, rz] = self.rotation;
        let [tx, ty, tz] = self.translation;
        [self.fx, self.fy, self.cx, self.cy, rx, ry, rz, tx, ty, tz]
    }

    pub fn from_array(a: &[f32]) -> Result<Self> {
        if a.len() != CAM_PARAMS {
            return Err(Error::shape(format!("camera needs {CAM_PARAMS} values, got {}", a.len())));
        }
        Ok(Self { fx: a[0], fy: a[1], cx: a[2], cy: a[3], rotation: [a[4], a[5], a[6]], translation: [a[7], a[8], a[9]] })
    }

    /// Checks positivity of focal lengths and that the principal point lies
    /// inside an `h`×`w` image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera parameters".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got {} / {}", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < w as f32 && self.cy >= 0.0 && self.cy < h as f32) {
            return Err(Error::invalid(format!("principal point ({}, {}) outside {w}×{h}", self.cx, self.cy)));
        }
        Ok(())
    }
}

/// Reconstruction plus per-pixel validity (1 = sampled inside the source).
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub reconstructed: Image,
    pub valid_mask: Plane,
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f32,
    fy: f32,
}

/// Overshoot past the border (in pixels) treated as round-off and snapped
/// back onto the edge.
const EDGE_SLACK: f32 = 1e-5;

#[inline]
fn snap(v: f32, hi: f32) -> f32 {
    if v < 0.0 && v >= -EDGE_SLACK {
        0.0
    } else if v > hi && v <= hi + EDGE_SLACK {
        hi
    } else {
        v
    }
}

#[inline]
fn tap(x: f32, y: f32, w: usize, h: usize) -> Option<Tap> {
    let (x, y) = (snap(x, (w - 1) as f32), snap(y, (h - 1) as f32));
    if !(x >= 0.0 && x <= (w - 1) as f32 && y >= 0.0 && y <= (h - 1) as f32) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    Some(Tap { x0, x1: (x0 + 1).min(w - 1), y0, y1: (y0 + 1).min(h - 1), fx: x - x0 as f32, fy: y - y0 as f32 })
}

#[inline]
fn sample(plane: &[f32], w: usize, t: &Tap) -> f32 {
    let p00 = plane[t.y0 * w + t.x0];
    let p01 = plane[t.y0 * w + t.x1];
    let p10 = plane[t.y1 * w + t.x0];
    let p11 = plane[t.y1 * w + t.x1];
    (1.0 - t.fy) * ((1.0 - t.fx) * p00 + t.fx * p01) + t.fy * ((1.0 - t.fx) * p10 + t.fx * p11)
}

/// (∂/∂x, ∂/∂y) of the interpolant at the tap.
#[inline]
fn sample_grad(plane: &[f32], w: usize, t: &Tap) -> (f32, f32) {
    let p00 = plane[t.y0 * w + t.x0];
    let p01 = plane[t.y0 * w + t.x1];
    let p10 = plane[t.y1 * w + t.x0];
    let p11 = plane[t.y1 * w + t.x1];
    let dx = if t.x1 == t.x0 { 0.0 } else { (1.0 - t.fy) * (p01 - p00) + t.fy * (p11 - p10) };
    let dy = if t.y1 == t.y0 { 0.0 } else { (1.0 - t.fx) * (p10 - p00) + t.fx * (p11 - p01) };
    (dx, dy)
}

#[inline]
fn scatter(grad: &mut [f32], w: usize, t: &Tap, g: f32) {
    grad[t.y0 * w + t.x0] += g * (1.0 - t.fy) * (1.0 - t.fx);
    grad[t.y0 * w + t.x1] += g * (1.0 - t.fy) * t.fx;
    grad[t.y1 * w + t.x0] += g * t.fy * (1.0 - t.fx);
    grad[t.y1 * w + t.x1] += g * t.fy * t.fx;
}

/// Pixels `(x, y)` read by a bilinear sample at the given point, or `None`
/// outside the image.
pub(crate) fn sample_support(x: f32, y: f32, w: usize, h: usize) -> Option<[(usize, usize); 4]> {
    tap(x, y, w, h).map(|t| [(t.x0, t.y0), (t.x1, t.y0), (t.x0, t.y1), (t.x1, t.y1)])
}

/// Bilinear interpolation of every channel of `src` at (x, y). Samples
/// outside `[0, W-1] × [0, H-1]` return zeros and `false`.
pub fn bilinear_sample(src: &Image, x: f32, y: f32) -> (Vec<f32>, bool) {
    let (w, h) = (src.width(), src.height());
    match tap(x, y, w, h) {
        Some(t) => ((0..src.channels()).map(|c| sample(src.plane(c), w, &t)).collect(), true),
        None => (vec![0.0; src.channels()], false),
    }
}

/// Partial derivatives of [`bilinear_sample`] w.r.t. x and y, per channel.
/// Zero outside the image.
pub fn bilinear_sample_grad(src: &Image, x: f32, y: f32) -> Vec<(f32, f32)> {
    let (w, h) = (src.width(), src.height());
    match tap(x, y, w, h) {
        Some(t) => (0..src.channels()).map(|c| sample_grad(src.plane(c), w, &t)).collect(),
        None => vec![(0.0, 0.0); src.channels()],
    }
}

/// Source column addressed by the stereo relation for pixel column `x`.
#[inline]
pub(crate) fn stereo_source_x(x: usize, d: f32) -> f32 {
    x as f32 + d
}

pub(crate) fn stereo_forward(img: &[f32], c: usize, h: usize, w: usize, disp: &[f32], out: &mut [f32], mask: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            match tap(stereo_source_x(x, disp[i]), y as f32, w, h) {
                Some(t) => {
                    mask[i] = 1.0;
                    for ch in 0..c {
                        out[ch * h * w + i] = sample(&img[ch * h * w..(ch + 1) * h * w], w, &t);
                    }
                }
                None => {
                    mask[i] = 0.0;
                    for ch in 0..c {
                        out[ch * h * w + i] = 0.0;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn stereo_backward(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    disp: &[f32],
    mask: &[f32],
    grad_out: &[f32],
    mut grad_img: Option<&mut [f32]>,
    mut grad_disp: Option<&mut [f32]>,
) {
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] == 0.0 {
                continue;
            }
            let t = tap(stereo_source_x(x, disp[i]), y as f32, w, h).expect("valid pixel has a tap");
            let mut gx = 0.0f32;
            for ch in 0..c {
                let g = grad_out[ch * hw + i];
                if let Some(gd) = grad_img.as_deref_mut() {
                    scatter(&mut gd[ch * hw..(ch + 1) * hw], w, &t, g);
                }
                if grad_disp.is_some() {
                    gx += g * sample_grad(&img[ch * hw..(ch + 1) * hw], w, &t).0;
                }
            }
            if let Some(gd) = grad_disp.as_deref_mut() {
                gd[i] += gx;
            }
        }
    }
}

/// Right-view reconstruction `I'_r(x, y) = I_l(x + d(x, y), y)`.
pub fn warp_stereo(left: &Image, disparity: &DisparityMap) -> Result<WarpResult> {
    let (c, h, w) = (left.channels(), left.height(), left.width());
    let d = disparity.plane();
    if d.height() != h || d.width() != w {
        return Err(Error::shape(format!("disparity {}×{} does not match image {h}×{w}", d.height(), d.width())));
    }
    let mut out = vec![0.0; c * h * w];
    let mut mask = vec![0.0; h * w];
    stereo_forward(left.data(), c, h, w, d.data(), &mut out, &mut mask);
    Ok(WarpResult { reconstructed: Image::new(c, h, w, out)?, valid_mask: Plane::new(h, w, mask)? })
}

/// Forward-mode dual number carrying derivatives w.r.t. depth and the ten
/// camera scalars.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 11],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 11] }
    }

    fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 11];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x *= dv;
        }
        Self { v, d }
    }

    fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.map(s, 0.5 / s)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(mut self, o: Dual) -> Dual {
        self.v += o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a += b;
        }
        self
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(mut self, o: Dual) -> Dual {
        self.v -= o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a -= b;
        }
        self
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; 11];
        for i in 0..11 {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let mut d = [0.0; 11];
        for i in 0..11 {
            d[i] = (self.d[i] - self.v * inv * o.d[i]) * inv;
        }
        Dual { v: self.v * inv, d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.map(-self.v, -1.0)
    }
}

/// Rotation matrix from an axis-angle vector (Rodrigues' formula), generic
/// over the scalar so the same code serves values and derivatives.
fn rodrigues_dual(r: [Dual; 3]) -> [[Dual; 3]; 3] {
    let s = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let one = Dual::constant(1.0);
    // A = sin θ / θ, B = (1 - cos θ) / θ², as smooth functions of s = θ².
    let (a, b) = if s.v < 1e-8 {
        (one - s * Dual::constant(1.0 / 6.0), Dual::constant(0.5) - s * Dual::constant(1.0 / 24.0))
    } else {
        let theta = s.sqrt();
        (theta.sin() / theta, (one - theta.cos()) / s)
    };
    let k = [
        [Dual::constant(0.0), -r[2], r[1]],
        [r[2], Dual::constant(0.0), -r[0]],
        [-r[1], r[0], Dual::constant(0.0)],
    ];
    let mut m = [[Dual::constant(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut kk = Dual::constant(0.0);
            for l in 0..3 {
                kk = kk + k[i][l] * k[l][j];
            }
            let id = if i == j { one } else { Dual::constant(0.0) };
            m[i][j] = id + a * k[i][j] + b * kk;
        }
    }
    m
}

/// Rotation matrix for an axis-angle vector.
pub fn rodrigues(r: [f64; 3]) -> [[f64; 3]; 3] {
    let m = rodrigues_dual(r.map(Dual::constant));
    m.map(|row| row.map(|d| d.v))
}

/// Projects target pixels into the reference view for one camera.
pub(crate) struct Projector {
    cam: [Dual; CAM_PARAMS],
    rot: [[Dual; 3]; 3],
}

/// Result of projecting one target pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Projection {
    pub u: f32,
    pub v: f32,
    /// In front of the reference camera.
    pub front: bool,
    /// ∂u and ∂v w.r.t. [depth, fx, fy, cx, cy, rx, ry, rz, tx, ty, tz].
    pub du: [f32; 11],
    pub dv: [f32; 11],
}

impl Projector {
    pub fn new(cam: &[f32; CAM_PARAMS]) -> Self {
        let cam: [Dual; CAM_PARAMS] = std::array::from_fn(|i| Dual::var(cam[i] as f64, i + 1));
        let rot = rodrigues_dual([cam[4], cam[5], cam[6]]);
        Self { cam, rot }
    }

    pub fn project(&self, x: usize, y: usize, depth: f32) -> Projection {
        let [fx, fy, cx, cy, _, _, _, tx, ty, tz] = self.cam;
        let z = Dual::var(depth as f64, 0);
        let px = z * (Dual::constant(x as f64) - cx) / fx;
        let py = z * (Dual::constant(y as f64) - cy) / fy;
        let p = [px, py, z];
        let t = [tx, ty, tz];
        let q: [Dual; 3] = std::array::from_fn(|i| self.rot[i][0] * p[0] + self.rot[i][1] * p[1] + self.rot[i][2] * p[2] + t[i]);
        let front = q[2].v > 1e-6;
        if !front {
            return Projection { u: f32::NAN, v: f32::NAN, front, du: [0.0; 11], dv: [0.0; 11] };
        }
        let u = fx * q[0] / q[2] + cx;
        let v = fy * q[1] / q[2] + cy;
        Projection { u: u.v as f32, v: v.v as f32, front, du: u.d.map(|d| d as f32), dv: v.d.map(|d| d as f32) }
    }
}

/// Per-pixel state kept from the rigid warp's forward pass.
#[derive(Clone, Debug)]
pub struct SfmSaved {
    proj: Vec<Projection>,
    valid: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sfm_forward(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    depth: &[f32],
    cam: &[f32; CAM_PARAMS],
    out: &mut [f32],
    mask: &mut [f32],
) -> SfmSaved {
    let projector = Projector::new(cam);
    let hw = h * w;
    let mut proj = Vec::with_capacity(hw);
    let mut valid = Vec::with_capacity(hw);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let p = projector.project(x, y, depth[i]);
            let t = if p.front { tap(p.u, p.v, w, h) } else { None };
            match t {
                Some(t) => {
                    mask[i] = 1.0;
                    for ch in 0..c {
                        out[ch * hw + i] = sample(&img[ch * hw..(ch + 1) * hw], w, &t);
                    }
                }
                None => {
                    mask[i] = 0.0;
                    for ch in 0..c {
                        out[ch * hw + i] = 0.0;
                    }
                }
            }
            valid.push(t.is_some());
            proj.push(p);
        }
    }
    SfmSaved { proj, valid }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sfm_backward(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    saved: &SfmSaved,
    grad_out: &[f32],
    mut grad_img: Option<&mut [f32]>,
    mut grad_depth: Option<&mut [f32]>,
    grad_cam: Option<&mut [f32]>,
) {
    let hw = h * w;
    let mut cam_acc = [0.0f64; CAM_PARAMS];
    for i in 0..hw {
        if !saved.valid[i] {
            continue;
        }
        let p = &saved.proj[i];
        let t = tap(p.u, p.v, w, h).expect("valid pixel has a tap");
        let (mut gu, mut gv) = (0.0f32, 0.0f32);
        for ch in 0..c {
            let g = grad_out[ch * hw + i];
            if let Some(gi) = grad_img.as_deref_mut() {
                scatter(&mut gi[ch * hw..(ch + 1) * hw], w, &t, g);
            }
            let (sx, sy) = sample_grad(&img[ch * hw..(ch + 1) * hw], w, &t);
            gu += g * sx;
            gv += g * sy;
        }
        if let Some(gd) = grad_depth.as_deref_mut() {
            gd[i] += gu * p.du[0] + gv * p.dv[0];
        }
        for k in 0..CAM_PARAMS {
            cam_acc[k] += (gu * p.du[k + 1] + gv * p.dv[k + 1]) as f64;
        }
    }
    if let Some(gc) = grad_cam {
        for (dst, acc) in gc.iter_mut().zip(cam_acc) {
            *dst += acc as f32;
        }
    }
}

/// Reconstructs the target frame by back-projecting each target pixel with
/// its depth, moving it into the reference camera and sampling `reference`.
pub fn warp_sfm(reference: &Image, depth: &DepthMap, cam: &CameraParams) -> Result<WarpResult> {
    let (c, h, w) = (reference.channels(), reference.height(), reference.width());
    let d = depth.plane();
    if d.height() != h || d.width() != w {
        return Err(Error::shape(format!("depth {}×{} does not match image {h}×{w}", d.height(), d.width())));
    }
    if let Some(z) = d.data().iter().find(|&&z| !(z > 0.0)) {
        return Err(Error::invalid(format!("depth must be positive, found {z}")));
    }
    if !cam.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("camera parameters".into()));
    }
    let mut out = vec![0.0; c * h * w];
    let mut mask = vec![0.0; h * w];
    sfm_forward(reference.data(), c, h, w, d.data(), &cam.to_array(), &mut out, &mut mask);
    Ok(WarpResult { reconstructed: Image::new(c, h, w, out)?, valid_mask: Plane::new(h, w, mask)? })
}

/// `depth = focal · baseline / disparity`, elementwise.
pub fn disparity_to_depth(disparity: &DisparityMap, focal: f32, baseline: f32) -> Result<DepthMap> {
    let p = disparity.plane();
    if let Some(d) = p.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::invalid(format!("disparity must be positive, found {d}")));
    }
    let fb = focal * baseline;
    let data = p.data().iter().map(|&d| fb / d).collect();
    Ok(DepthMap(Plane::new(p.height(), p.width(), data)?))
}

/// `disparity = focal · baseline / depth`, elementwise.
pub fn depth_to_disparity(depth: &DepthMap, focal: f32, baseline: f32) -> Result<DisparityMap> {
    let p = depth.plane();
    if let Some(z) = p.data().iter().find(|&&z| !(z > 0.0)) {
        return Err(Error::invalid(format!("depth must be positive, found {z}")));
    }
    let fb = focal * baseline;
    let data = p.data().iter().map(|&z| fb / z).collect();
    Ok(DisparityMap(Plane::new(p.height(), p.width(), data)?))
}
