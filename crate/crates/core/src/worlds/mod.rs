//! Procedural layered scenes: rectified stereo pairs and monocular
//! sequences with exact ground truth, grouped into domains and
//! distributions.

mod benchmark;
pub mod io;

pub use benchmark::{make_benchmark, Benchmark, BenchmarkConfig, Block, EvalSet, Phase, StreamPlan};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{DepthMap, DisparityMap, Image, Mode, Plane};
use crate::replay::ReplaySample;
use crate::warp::{bilinear_sample, sample_support, stereo_source_x, CameraParams, Projector, CAM_PARAMS};

/// Texture band in cycles per pixel at the reference depth, and amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureStats {
    pub freq_band: (f32, f32),
    pub contrast: f32,
    /// Mean layer color; each layer perturbs it.
    pub palette: [f32; 3],
}

/// Depth-dependent blend toward a haze color: `h = 1 - exp(-z / distance)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Haze {
    pub color: [f32; 3],
    pub distance: f32,
}

/// Camera path: translation along sinusoids per axis (amplitudes in scene
/// units, periods in frames) and roll about the optical axis (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionProfile {
    pub amplitude: [f32; 3],
    pub period: [f32; 3],
    pub roll_amplitude: f32,
    pub roll_period: f32,
}

impl MotionProfile {
    pub fn still() -> Self {
        Self { amplitude: [0.0; 3], period: [1.0; 3], roll_amplitude: 0.0, roll_period: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub distribution: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Focal length (pixels) times stereo baseline (scene units).
    pub focal_baseline: f32,
    /// Depth range of the foreground layers.
    pub depth_range: (f32, f32),
    pub background_depth: f32,
    pub layers: usize,
    pub texture: TextureStats,
    pub haze: Haze,
    pub motion: MotionProfile,
    pub frames: usize,
}

impl DomainSpec {
    pub fn focal(&self) -> f64 {
        self.width as f64
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn baseline(&self) -> f64 {
        self.focal_baseline as f64 / self.focal()
    }

    pub fn validate(&self) -> Result<()> {
        let (near, far) = self.depth_range;
        let ok = self.height > 0
            && self.width > 0
            && self.focal_baseline > 0.0
            && near > 0.0
            && far >= near
            && self.background_depth >= far
            && self.haze.distance > 0.0
            && self.texture.freq_band.0 > 0.0
            && self.texture.freq_band.1 >= self.texture.freq_band.0
            && self.motion.period.iter().all(|&p| p > 0.0)
            && self.motion.roll_period > 0.0
            && self.motion.amplitude[2] < 0.5 * near;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("domain `{}` has inconsistent parameters", self.id)))
        }
    }
}

/// Ground truth attached to a sample; never passed to training.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Depth on the grid of the reconstructed view (right image or target).
    pub depth: DepthMap,
    /// Stereo only, same grid as `depth`.
    pub disparity: Option<DisparityMap>,
    /// 1 where the counterpart frame is an exact warp of the source frame.
    pub valid: Plane,
    /// SfM only: maps target camera coordinates into the reference camera.
    pub camera: Option<CameraParams>,
}

/// `frames` is `[left, right]` in stereo mode and `[target, reference]` in
/// SfM mode; the first frame is the disparity network's input.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub mode: Mode,
    pub frames: [Image; 2],
    pub truth: GroundTruth,
    pub domain: String,
    pub distribution: String,
    pub index: usize,
}

impl LabeledSample {
    /// The inputs alone, as seen by the trainer.
    pub fn input(&self) -> ReplaySample {
        ReplaySample { mode: self.mode, frames: self.frames.clone(), source_domain: self.domain.clone() }
    }
}

#[derive(Clone, Debug)]
struct Wave {
    freq: [f64; 2],
    phase: [f64; 3],
    amp: f64,
}

#[derive(Clone, Debug)]
struct Layer {
    z: f64,
    /// [x_min, x_max, y_min, y_max] in scene units; unbounded for the
    /// background.
    rect: Option<[f64; 4]>,
    base: [f64; 3],
    waves: Vec<Wave>,
}

impl Layer {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.rect {
            Some([x0, x1, y0, y1]) => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            None => true,
        }
    }
}

struct Scene {
    /// Sorted near to far; the last entry is the background.
    layers: Vec<Layer>,
    phase: [f64; 4],
}

fn build_scene(spec: &DomainSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (near, far) = (spec.depth_range.0 as f64, spec.depth_range.1 as f64);
    let z_ref = (near * spec.background_depth as f64).sqrt();
    let f = spec.focal();
    let tex = spec.texture;
    let make_layer = |rng: &mut ChaCha8Rng, z: f64, rect: Option<[f64; 4]>| {
        let base = std::array::from_fn(|c| (tex.palette[c] as f64 + rng.gen_range(-0.2..0.2)).clamp(0.05, 0.95));
        let waves = (0..4)
            .map(|_| {
                let s = rng.gen_range(tex.freq_band.0 as f64..=tex.freq_band.1 as f64);
                // Cycles per scene unit so that the screen frequency is `s`
                // at the reference depth.
                let k = s * f / z_ref;
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                Wave {
                    freq: [k * theta.cos(), k * theta.sin()],
                    phase: std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)),
                    amp: rng.gen_range(0.5..1.0),
                }
            })
            .collect();
        Layer { z, rect, base, waves }
    };
    let m = spec.motion;
    let mut layers = Vec::with_capacity(spec.layers + 1);
    for _ in 0..spec.layers {
        let z = rng.gen_range(near..=far);
        // Spread layers over the region the camera sweeps.
        let half_w = 0.5 * z * spec.width as f64 / f;
        let half_h = 0.5 * z * spec.height as f64 / f;
        let span_x = m.amplitude[0] as f64 + half_w;
        let span_y = m.amplitude[1] as f64 + half_h;
        let w = rng.gen_range(0.3..0.8) * half_w;
        let h = rng.gen_range(0.3..0.8) * half_h;
        let cx = rng.gen_range(-span_x..=span_x);
        let cy = rng.gen_range(-span_y..=span_y);
        let rect = Some([cx - w, cx + w, cy - h, cy + h]);
        let layer = make_layer(&mut rng, z, rect);
        layers.push(layer);
    }
    layers.sort_by(|a, b| a.z.total_cmp(&b.z));
    let bg = make_layer(&mut rng, spec.background_depth as f64, None);
    layers.push(bg);
    let phase = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    Scene { layers, phase }
}

/// Camera center and roll at frame `t`.
fn camera_pose(spec: &DomainSpec, scene: &Scene, t: usize) -> ([f64; 3], f64) {
    let m = spec.motion;
    let tt = t as f64;
    let c = std::array::from_fn(|i| {
        m.amplitude[i] as f64 * (std::f64::consts::TAU * tt / m.period[i] as f64 + scene.phase[i]).sin()
    });
    let roll = m.roll_amplitude as f64 * (std::f64::consts::TAU * tt / m.roll_period as f64 + scene.phase[3]).sin();
    (c, roll)
}

fn shade(spec: &DomainSpec, layer: &Layer, x: f64, y: f64) -> [f32; 3] {
    let contrast = spec.texture.contrast as f64;
    let norm: f64 = layer.waves.iter().map(|w| w.amp).sum::<f64>().max(1e-9);
    let h = 1.0 - (-layer.z / spec.haze.distance as f64).exp();
    std::array::from_fn(|c| {
        let s: f64 = layer
            .waves
            .iter()
            .map(|w| w.amp * (std::f64::consts::TAU * (w.freq[0] * x + w.freq[1] * y) + w.phase[c]).sin())
            .sum();
        let tex = (layer.base[c] + contrast * s / norm).clamp(0.0, 1.0);
        ((1.0 - h) * tex + h * spec.haze.color[c] as f64) as f32
    })
}

struct View {
    image: Image,
    layer: Vec<usize>,
    depth: Vec<f32>,
}

/// Analytic rendering from a camera at `center` with roll `roll`.
fn render_view(spec: &DomainSpec, scene: &Scene, center: [f64; 3], roll: f64) -> View {
    let (h, w) = (spec.height, spec.width);
    let f = spec.focal();
    let (cx, cy) = spec.principal_point();
    let (s, c) = roll.sin_cos();
    let mut data = vec![0.0f32; 3 * h * w];
    let mut layer = vec![0usize; h * w];
    let mut depth = vec![0.0f32; h * w];
    for v in 0..h {
        for u in 0..w {
            let dx = (u as f64 - cx) / f;
            let dy = (v as f64 - cy) / f;
            let (rx, ry) = (c * dx - s * dy, s * dx + c * dy);
            let i = v * w + u;
            for (k, l) in scene.layers.iter().enumerate() {
                let zc = l.z - center[2];
                let (px, py) = (center[0] + zc * rx, center[1] + zc * ry);
                if l.contains(px, py) {
                    let rgb = shade(spec, l, px, py);
                    for ch in 0..3 {
                        data[ch * h * w + i] = rgb[ch];
                    }
                    layer[i] = k;
                    depth[i] = zc as f32;
                    break;
                }
            }
        }
    }
    View { image: Image::new(3, h, w, data).expect("consistent view"), layer, depth }
}

fn same_layer(layer_map: &[usize], w: usize, support: &[(usize, usize); 4], k: usize) -> bool {
    support.iter().all(|&(x, y)| layer_map[y * w + x] == k)
}

/// Rectified stereo pair at frame `idx`. The left view is rendered directly;
/// the right view resamples the left one at `x + d` wherever every
/// interpolation tap lies on the layer the right camera sees (valid
/// pixels), and is rendered directly elsewhere.
pub fn render_stereo(spec: &DomainSpec, idx: usize) -> Result<LabeledSample> {
    spec.validate()?;
    let scene = build_scene(spec);
    let (center, roll) = camera_pose(spec, &scene, idx);
    let b = spec.baseline();
    let right_center = [center[0] + b * roll.cos(), center[1] + b * roll.sin(), center[2]];
    let left = render_view(spec, &scene, center, roll);
    let right = render_view(spec, &scene, right_center, roll);
    let (h, w) = (spec.height, spec.width);
    let mut out = right.image.clone();
    let mut valid = vec![0.0f32; h * w];
    let mut disp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = spec.focal_baseline / right.depth[i];
            disp[i] = d;
            let xs = stereo_source_x(x, d);
            if let Some(support) = sample_support(xs, y as f32, w, h) {
                if same_layer(&left.layer, w, &support, right.layer[i]) {
                    let (rgb, _) = bilinear_sample(&left.image, xs, y as f32);
                    for (ch, v) in rgb.into_iter().enumerate() {
                        out.set(ch, y, x, v);
                    }
                    valid[i] = 1.0;
                }
            }
        }
    }
    Ok(LabeledSample {
        mode: Mode::Stereo,
        frames: [left.image, out],
        truth: GroundTruth {
            depth: DepthMap(Plane::new(h, w, right.depth)?),
            disparity: Some(DisparityMap(Plane::new(h, w, disp)?)),
            valid: Plane::new(h, w, valid)?,
            camera: None,
        },
        domain: spec.id.clone(),
        distribution: spec.distribution.clone(),
        index: idx,
    })
}

/// Relative camera taking frame-`t` camera coordinates into frame `t-1`.
fn relative_camera(spec: &DomainSpec, scene: &Scene, t: usize) -> CameraParams {
    let (c0, r0) = camera_pose(spec, scene, t - 1);
    let (c1, r1) = camera_pose(spec, scene, t);
    let d = [c1[0] - c0[0], c1[1] - c0[1], c1[2] - c0[2]];
    let (s, c) = r0.sin_cos();
    let trans = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let f = spec.focal() as f32;
    let (cx, cy) = spec.principal_point();
    CameraParams {
        fx: f,
        fy: f,
        cx: cx as f32,
        cy: cy as f32,
        rotation: [0.0, 0.0, (r1 - r0) as f32],
        translation: trans.map(|v| v as f32),
    }
}

/// Frames `t-1` (reference) and `t` (target). The target resamples the
/// reference through the ground-truth depth and relative camera wherever
/// every tap lies on the layer the target camera sees, and is rendered
/// directly elsewhere.
pub fn render_sequence(spec: &DomainSpec, t: usize) -> Result<LabeledSample> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::invalid("sequence samples need t >= 1"));
    }
    let scene = build_scene(spec);
    let (c0, r0) = camera_pose(spec, &scene, t - 1);
    let (c1, r1) = camera_pose(spec, &scene, t);
    let reference = render_view(spec, &scene, c0, r0);
    let target = render_view(spec, &scene, c1, r1);
    let cam = relative_camera(spec, &scene, t);
    let (h, w) = (spec.height, spec.width);
    let still = c0 == c1 && r0 == r1;
    let mut out = target.image.clone();
    let mut valid = vec![0.0f32; h * w];
    let arr: [f32; CAM_PARAMS] = cam.to_array();
    let projector = Projector::new(&arr);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let p = projector.project(x, y, target.depth[i]);
            if !p.front {
                continue;
            }
            if let Some(support) = sample_support(p.u, p.v, w, h) {
                if same_layer(&reference.layer, w, &support, target.layer[i]) {
                    valid[i] = 1.0;
                    if !still {
                        let (rgb, _) = bilinear_sample(&reference.image, p.u, p.v);
                        for (ch, v) in rgb.into_iter().enumerate() {
                            out.set(ch, y, x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(LabeledSample {
        mode: Mode::Sfm,
        frames: [out, reference.image],
        truth: GroundTruth {
            depth: DepthMap(Plane::new(h, w, target.depth)?),
            disparity: None,
            valid: Plane::new(h, w, valid)?,
            camera: Some(cam),
        },
        domain: spec.id.clone(),
        distribution: spec.distribution.clone(),
        index: t,
    })
}

/// Sample `index` of a domain in either mode. SfM index `i` renders frames
/// `i` and `i + 1` so that both modes address `0..frames`.
pub fn render(spec: &DomainSpec, mode: Mode, index: usize) -> Result<LabeledSample> {
    match mode {
        Mode::Stereo => render_stereo(spec, index),
        Mode::Sfm => {
            let mut s = render_sequence(spec, index + 1)?;
            s.index = index;
            Ok(s)
        }
    }
}
