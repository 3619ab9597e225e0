//! Finite-difference checks of every differentiable op and every loss on
//! small random instances. Instances that would straddle a kink (abs and
//! relu at zero, bilinear taps at integer sample positions, mask changes)
//! within the finite-difference step are built away from it or rejected by
//! an independent projection oracle.

use lifelong_depth::losses::{combined_loss, photometric_l1, smoothness, ssim_loss, LossWeights};
use lifelong_depth::models::{camera_from_raw, DisparityNet, PoseNet};
use lifelong_depth::regularizer::{reg_loss, snapshot, total_loss};
use lifelong_depth::tensor::gradcheck::{check_directional, Check, FD_STEP};
use lifelong_depth::tensor::{Activation, ParamSet, Tape, Tensor, Var};
use lifelong_depth::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct OpResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

type Case = fn(&mut ChaCha8Rng) -> Check;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values in [-1, -margin] ∪ [margin, 1].
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, uniform(rng, n, -1.0, 1.0))
}

/// Direction components of magnitude in [0.5, 1] with random signs.
fn dir(rng: &mut ChaCha8Rng, x: &Tensor) -> Vec<f32> {
    away_from_zero(rng, x.numel(), 0.5)
}

fn run<F>(inputs: Vec<Tensor>, dirs: Vec<Vec<f32>>, f: F) -> Check
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_directional(&inputs, &dirs, FD_STEP, f).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>, b_range: Option<(f32, f32)>) -> Check {
    let shape = [2, 3, 4];
    let a = rand_t(rng, &shape);
    let b = match b_range {
        Some((lo, hi)) => {
            let mag = uniform(rng, 24, lo, hi);
            t(&shape, mag.into_iter().map(|m| if rng.gen_bool(0.5) { m } else { -m }).collect())
        }
        None => rand_t(rng, &shape),
    };
    let dirs = vec![dir(rng, &a), dir(rng, &b)];
    run(vec![a, b], dirs, move |tp, v| f(tp, v[0], v[1]))
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, f: fn(&mut Tape, Var) -> Var) -> Check {
    let d = dir(rng, &x);
    run(vec![x], vec![d], move |tp, v| Ok(f(tp, v[0])))
}

fn case_add(rng: &mut ChaCha8Rng) -> Check {
    binary(rng, |t, a, b| t.add(a, b), None)
}

fn case_sub(rng: &mut ChaCha8Rng) -> Check {
    binary(rng, |t, a, b| t.sub(a, b), None)
}

fn case_mul(rng: &mut ChaCha8Rng) -> Check {
    binary(rng, |t, a, b| t.mul(a, b), None)
}

fn case_div(rng: &mut ChaCha8Rng) -> Check {
    binary(rng, |t, a, b| t.div(a, b), Some((0.5, 1.0)))
}

fn case_scalar_broadcast(rng: &mut ChaCha8Rng) -> Check {
    let a = rand_t(rng, &[3, 4]);
    let s = t(&[1], away_from_zero(rng, 1, 0.5));
    let dirs = vec![dir(rng, &a), dir(rng, &s)];
    run(vec![a, s], dirs, |tp, v| {
        let m = tp.mul(v[0], v[1])?;
        let d = tp.div(m, v[1])?;
        let e = tp.add(d, v[1])?;
        let p = tp.mul(e, v[1])?;
        tp.sub(p, v[1])
    })
}

fn case_affine(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[5, 3]);
    unary(rng, x, |t, v| t.affine(v, -1.7, 0.3))
}

fn case_scale(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[5, 3]);
    unary(rng, x, |t, v| t.scale(v, 2.5))
}

fn case_add_scalar(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[5, 3]);
    unary(rng, x, |t, v| {
        let y = t.add_scalar(v, 0.75);
        t.square(y)
    })
}

fn case_abs(rng: &mut ChaCha8Rng) -> Check {
    let x = t(&[20], away_from_zero(rng, 20, 0.01));
    unary(rng, x, |t, v| t.abs(v))
}

fn case_exp(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[20]);
    unary(rng, x, |t, v| t.exp(v))
}

fn case_square(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[20]);
    unary(rng, x, |t, v| t.square(v))
}

fn case_sqrt(rng: &mut ChaCha8Rng) -> Check {
    let x = t(&[20], uniform(rng, 20, 0.1, 1.0));
    unary(rng, x, |t, v| t.sqrt(v))
}

fn case_relu(rng: &mut ChaCha8Rng) -> Check {
    let x = t(&[20], away_from_zero(rng, 20, 0.01));
    unary(rng, x, |t, v| t.activation(Activation::Relu, v))
}

fn case_elu(rng: &mut ChaCha8Rng) -> Check {
    let x = t(&[20], away_from_zero(rng, 20, 0.01));
    unary(rng, x, |t, v| t.activation(Activation::Elu, v))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[20]);
    unary(rng, x, |t, v| t.activation(Activation::Sigmoid, v))
}

fn case_softplus(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[20]);
    unary(rng, x, |t, v| t.activation(Activation::Softplus, v))
}

fn conv_case(rng: &mut ChaCha8Rng, stride: usize, pad: usize) -> Check {
    let x = rand_t(rng, &[1, 2, 5, 5]);
    let k = rand_t(rng, &[3, 2, 3, 3]);
    let dirs = vec![dir(rng, &x), dir(rng, &k)];
    run(vec![x, k], dirs, move |tp, v| tp.conv2d(v[0], v[1], stride, pad))
}

fn case_conv_s1(rng: &mut ChaCha8Rng) -> Check {
    conv_case(rng, 1, 1)
}

fn case_conv_s2(rng: &mut ChaCha8Rng) -> Check {
    conv_case(rng, 2, 1)
}

fn case_conv_1x1(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[2, 3, 1, 1]);
    let k = rand_t(rng, &[4, 3, 1, 1]);
    let dirs = vec![dir(rng, &x), dir(rng, &k)];
    run(vec![x, k], dirs, |tp, v| tp.conv2d(v[0], v[1], 1, 0))
}

fn case_bias_add(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[2, 3, 2, 2]);
    let b = rand_t(rng, &[3]);
    let dirs = vec![dir(rng, &x), dir(rng, &b)];
    run(vec![x, b], dirs, |tp, v| tp.bias_add(v[0], v[1]))
}

fn case_resize_up(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[1, 2, 3, 4]);
    unary(rng, x, |t, v| t.resize_bilinear(v, 6, 8).unwrap())
}

fn case_resize_down(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[1, 2, 6, 7]);
    unary(rng, x, |t, v| t.resize_bilinear(v, 3, 4).unwrap())
}

fn case_concat(rng: &mut ChaCha8Rng) -> Check {
    let a = rand_t(rng, &[2, 1, 2, 3]);
    let b = rand_t(rng, &[2, 2, 2, 3]);
    let dirs = vec![dir(rng, &a), dir(rng, &b)];
    run(vec![a, b], dirs, |tp, v| {
        let c = tp.concat_channels(&[v[0], v[1], v[0]])?;
        Ok(tp.square(c))
    })
}

fn case_narrow(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[2, 3, 4, 5]);
    let axis = rng.gen_range(0..4);
    let len = [2, 3, 4, 5][axis];
    let start = rng.gen_range(0..len - 1);
    let take = rng.gen_range(1..=len - start);
    let d = dir(rng, &x);
    run(vec![x], vec![d], move |tp, v| {
        let n = tp.narrow(v[0], axis, start, take)?;
        Ok(tp.square(n))
    })
}

fn case_box_filter(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[1, 2, 4, 5]);
    unary(rng, x, |t, v| t.box_filter3(v).unwrap())
}

fn case_global_avg_pool(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[2, 3, 3, 4]);
    unary(rng, x, |t, v| t.global_avg_pool(v).unwrap())
}

fn case_sum(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[3, 4]);
    unary(rng, x, |t, v| {
        let s = t.square(v);
        t.sum(s)
    })
}

fn case_mean(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[3, 4]);
    unary(rng, x, |t, v| {
        let s = t.exp(v);
        t.mean(s)
    })
}

fn case_masked_mean(rng: &mut ChaCha8Rng) -> Check {
    let x = rand_t(rng, &[1, 2, 3, 3]);
    let mut mask: Vec<f32> = (0..9).map(|_| rng.gen_range(0..2) as f32).collect();
    mask[rng.gen_range(0..9)] = 1.0;
    let d = dir(rng, &x);
    run(vec![x], vec![d], move |tp, v| {
        let s = tp.square(v[0]);
        tp.masked_mean(s, &mask)
    })
}

/// Stereo warp with every sample position at least 0.1 px from an integer
/// and from the image border (or well outside it).
fn case_warp_stereo(rng: &mut ChaCha8Rng) -> Check {
    let (h, w) = (3, 6);
    let img = rand_t(rng, &[1, 2, h, w]);
    let mut disp = Vec::with_capacity(h * w);
    for _ in 0..h {
        for x in 0..w {
            let d = if rng.gen_bool(0.85) {
                let cell = rng.gen_range(0..w - 1) as f32;
                cell + rng.gen_range(0.1..0.9) - x as f32
            } else if rng.gen_bool(0.5) {
                -(x as f32) - rng.gen_range(0.2..1.0)
            } else {
                (w - 1 - x) as f32 + rng.gen_range(0.2..1.0)
            };
            disp.push(d);
        }
    }
    let disp = t(&[1, 1, h, w], disp);
    let dirs = vec![dir(rng, &img), dir(rng, &disp)];
    run(vec![img, disp], dirs, |tp, v| Ok(tp.warp_stereo(v[0], v[1])?.0))
}

fn rodrigues(r: [f64; 3]) -> [[f64; 3]; 3] {
    let th = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if th < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [r[0] / th, r[1] / th, r[2] / th];
    let (s, c) = th.sin_cos();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            let cross = match (i, j) {
                (0, 1) => -k[2],
                (0, 2) => k[1],
                (1, 0) => k[2],
                (1, 2) => -k[0],
                (2, 0) => -k[1],
                (2, 1) => k[0],
                _ => 0.0,
            };
            m[i][j] = c * id + s * cross + (1.0 - c) * k[i] * k[j];
        }
    }
    m
}

/// Tap cell of every target pixel (None outside), computed independently.
fn sfm_cells(depth: &[f32], cam: &[f32], h: usize, w: usize) -> Option<Vec<Option<(i64, i64)>>> {
    let c: Vec<f64> = cam.iter().map(|&v| v as f64).collect();
    let r = rodrigues([c[4], c[5], c[6]]);
    let mut cells = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let z = depth[y * w + x] as f64;
            let p = [z * (x as f64 - c[2]) / c[0], z * (y as f64 - c[3]) / c[1], z];
            let q: Vec<f64> = (0..3).map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + c[7 + i]).collect();
            if q[2] < 0.1 {
                return None;
            }
            let u = c[0] * q[0] / q[2] + c[2];
            let v = c[1] * q[1] / q[2] + c[3];
            let margin = 2e-3;
            let near_int = |a: f64| (a - a.round()).abs() < margin;
            if near_int(u) || near_int(v) {
                return None;
            }
            let inside = u > 0.0 && u < (w - 1) as f64 && v > 0.0 && v < (h - 1) as f64;
            cells.push(inside.then(|| (u.floor() as i64, v.floor() as i64)));
        }
    }
    Some(cells)
}

fn case_warp_sfm(rng: &mut ChaCha8Rng) -> Check {
    let (h, w) = (4, 5);
    loop {
        let img = rand_t(rng, &[1, 2, h, w]);
        let depth = t(&[1, 1, h, w], uniform(rng, h * w, 1.0, 3.0));
        let mut cam = vec![rng.gen_range(4.0..7.0), rng.gen_range(4.0..7.0)];
        cam.push(w as f32 / 2.0 + rng.gen_range(-0.5..0.5));
        cam.push(h as f32 / 2.0 + rng.gen_range(-0.5..0.5));
        cam.extend(uniform(rng, 3, -0.05, 0.05));
        cam.extend(uniform(rng, 3, -0.2, 0.2));
        let cam = t(&[1, 10, 1, 1], cam);
        let dirs = vec![dir(rng, &img), dir(rng, &depth), dir(rng, &cam)];
        // The tap cells must not change anywhere on the segment x ± h·v.
        let shifted = |x: &Tensor, d: &[f32], s: f32| -> Vec<f32> {
            x.data().iter().zip(d).map(|(a, b)| a + s * FD_STEP as f32 * b).collect()
        };
        let cells: Vec<_> = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&s| sfm_cells(&shifted(&depth, &dirs[1], s), &shifted(&cam, &dirs[2], s), h, w))
            .collect();
        if cells.iter().any(Option::is_none) || cells[0] != cells[1] || cells[1] != cells[2] {
            continue;
        }
        if cells[1].as_ref().unwrap().iter().all(Option::is_none) {
            continue;
        }
        return run(vec![img, depth, cam], dirs, |tp, v| Ok(tp.warp_sfm(v[0], v[1], v[2])?.0));
    }
}

fn case_camera_from_raw(rng: &mut ChaCha8Rng) -> Check {
    let raw = rand_t(rng, &[2, 10, 1, 1]);
    unary(rng, raw, |t, v| camera_from_raw(t, v, 8, 12).unwrap())
}

/// Image pair in [0, 1] whose pixelwise difference is at least 0.05.
fn image_pair(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let pred = uniform(rng, n, 0.05, 0.95);
    let target = pred
        .iter()
        .map(|&p| {
            let off = rng.gen_range(0.05..0.5);
            if p + off <= 1.0 && (p - off < 0.0 || rng.gen_bool(0.5)) {
                p + off
            } else {
                p - off
            }
        })
        .collect();
    (t(shape, pred), t(shape, target))
}

/// Positive disparity `a(x) + b(y)` whose neighbour differences are at
/// least 0.05 in magnitude, so the smoothness abs terms stay on one side.
fn stepped_disparity(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let walk = |rng: &mut ChaCha8Rng, n: usize| {
        let mut v = vec![0.0f32];
        for _ in 1..n {
            let step = rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            v.push(v.last().unwrap() + step);
        }
        v
    };
    let (a, b) = (walk(rng, w), walk(rng, h));
    let raw: Vec<f32> = (0..h).flat_map(|y| a.iter().map(|&ax| ax + b[y]).collect::<Vec<_>>()).collect();
    let lo = raw.iter().cloned().fold(f32::INFINITY, f32::min);
    t(&[1, 1, h, w], raw.into_iter().map(|v| v - lo + 0.5).collect())
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut m: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
    m[0] = 1.0;
    m
}

fn case_photometric(rng: &mut ChaCha8Rng) -> Check {
    let (p, q) = image_pair(rng, &[1, 3, 8, 8]);
    let mask = random_mask(rng, 64);
    let dirs = vec![dir(rng, &p), dir(rng, &q)];
    run(vec![p, q], dirs, move |tp, v| photometric_l1(tp, v[0], v[1], &mask))
}

fn case_ssim(rng: &mut ChaCha8Rng) -> Check {
    let p = t(&[1, 3, 8, 8], uniform(rng, 192, 0.0, 1.0));
    let q = t(&[1, 3, 8, 8], uniform(rng, 192, 0.0, 1.0));
    let mask = random_mask(rng, 64);
    let dirs = vec![dir(rng, &p), dir(rng, &q)];
    run(vec![p, q], dirs, move |tp, v| ssim_loss(tp, v[0], v[1], &mask))
}

fn case_smoothness(rng: &mut ChaCha8Rng) -> Check {
    let d = stepped_disparity(rng, 8, 8);
    let img = t(&[1, 3, 8, 8], uniform(rng, 192, 0.0, 1.0));
    let dv = dir(rng, &d);
    run(vec![d], vec![dv], move |tp, v| smoothness(tp, v[0], &img))
}

fn case_combined(rng: &mut ChaCha8Rng) -> Check {
    let (p, q) = image_pair(rng, &[1, 3, 8, 8]);
    let d = stepped_disparity(rng, 8, 8);
    let img = t(&[1, 3, 8, 8], uniform(rng, 192, 0.0, 1.0));
    let mask = random_mask(rng, 64);
    let dirs = vec![dir(rng, &p), Vec::new(), dir(rng, &d)];
    run(vec![p, q, d], dirs, move |tp, v| {
        Ok(combined_loss(tp, v[0], v[1], v[2], &img, &mask, &LossWeights::default())?.total)
    })
}

fn case_stereo_photometric_disparity(rng: &mut ChaCha8Rng) -> Check {
    // Photometric error of a warped image as a function of disparity, with
    // every tap cell and residual sign fixed over the step.
    let (h, w) = (2, 6);
    let img = t(&[1, 1, h, w], uniform(rng, h * w, 0.0, 1.0));
    let disp: Vec<f32> = (0..h * w)
        .map(|i| {
            let x = i % w;
            let cell = rng.gen_range(0..w - 1) as f32;
            cell + rng.gen_range(0.1..0.9) - x as f32
        })
        .collect();
    let disp = t(&[1, 1, h, w], disp);
    let target = t(&[1, 1, h, w], vec![2.0; h * w]);
    let dv = dir(rng, &disp);
    run(vec![img, disp, target], vec![Vec::new(), dv, Vec::new()], |tp, v| {
        let (recon, mask) = tp.warp_stereo(v[0], v[1])?;
        photometric_l1(tp, recon, v[2], &mask)
    })
}

fn case_reg_loss(rng: &mut ChaCha8Rng) -> Check {
    let mut prev = ParamSet::new();
    prev.push("a", rand_t(rng, &[3, 2]));
    prev.push("b", rand_t(rng, &[4]));
    let snap = snapshot(&prev);
    let theta: Vec<Tensor> = prev
        .iter()
        .map(|(_, p)| {
            let off = away_from_zero(rng, p.numel(), 0.01);
            t(p.shape(), p.data().iter().zip(off).map(|(a, o)| a + 0.5 * o).collect())
        })
        .collect();
    let dirs = theta.iter().map(|x| dir(rng, x)).collect();
    run(theta, dirs, move |tp, v| reg_loss(tp, v, &snap))
}

fn case_total_loss(rng: &mut ChaCha8Rng) -> Check {
    let task = rand_t(rng, &[1]);
    let reg = rand_t(rng, &[1]);
    let dist: f64 = rng.gen_range(0.0..10.0);
    let dirs = vec![dir(rng, &task), dir(rng, &reg)];
    run(vec![task, reg], dirs, move |tp, v| {
        let r = tp.square(v[1]);
        total_loss(tp, v[0], dist, r, 0.1)
    })
}

fn case_disparity_net(rng: &mut ChaCha8Rng) -> Check {
    let net = DisparityNet::new(8, 8, 3, rng.gen()).unwrap();
    let image = t(&[1, 3, 8, 8], uniform(rng, 192, 0.0, 1.0));
    let mut inputs: Vec<Tensor> = net.params.iter().map(|(_, p)| p.clone()).collect();
    let mut dirs: Vec<Vec<f32>> = inputs.iter().map(|x| dir(rng, x)).collect();
    inputs.push(image);
    dirs.push(Vec::new());
    run(inputs, dirs, move |tp, v| {
        let (params, img) = v.split_at(v.len() - 1);
        net.forward(tp, params, img[0])
    })
}

fn case_pose_net(rng: &mut ChaCha8Rng) -> Check {
    let mut net = PoseNet::new(8, 8, 3, rng.gen()).unwrap();
    // A nonzero head so every layer receives gradient.
    let head = net.params.len() - 2;
    for v in net.params.get_mut(head).data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let a = t(&[1, 3, 8, 8], uniform(rng, 192, 0.0, 1.0));
    let b = t(&[1, 3, 8, 8], uniform(rng, 192, 0.0, 1.0));
    let mut inputs: Vec<Tensor> = net.params.iter().map(|(_, p)| p.clone()).collect();
    let mut dirs: Vec<Vec<f32>> = inputs.iter().map(|x| dir(rng, x)).collect();
    inputs.extend([a, b]);
    dirs.extend([Vec::new(), Vec::new()]);
    run(inputs, dirs, move |tp, v| {
        let (params, imgs) = v.split_at(v.len() - 2);
        net.forward(tp, params, imgs[0], imgs[1])
    })
}

pub const CASES: [(&str, Case); 40] = [
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("div", case_div),
    ("scalar_broadcast", case_scalar_broadcast),
    ("affine", case_affine),
    ("scale", case_scale),
    ("add_scalar", case_add_scalar),
    ("abs", case_abs),
    ("exp", case_exp),
    ("square", case_square),
    ("sqrt", case_sqrt),
    ("relu", case_relu),
    ("elu", case_elu),
    ("sigmoid", case_sigmoid),
    ("softplus", case_softplus),
    ("conv2d_stride1", case_conv_s1),
    ("conv2d_stride2", case_conv_s2),
    ("conv2d_1x1", case_conv_1x1),
    ("bias_add", case_bias_add),
    ("resize_up", case_resize_up),
    ("resize_down", case_resize_down),
    ("concat_channels", case_concat),
    ("narrow", case_narrow),
    ("box_filter3", case_box_filter),
    ("global_avg_pool", case_global_avg_pool),
    ("sum", case_sum),
    ("mean", case_mean),
    ("masked_mean", case_masked_mean),
    ("warp_stereo", case_warp_stereo),
    ("warp_sfm", case_warp_sfm),
    ("camera_from_raw", case_camera_from_raw),
    ("photometric_l1", case_photometric),
    ("ssim_loss", case_ssim),
    ("smoothness", case_smoothness),
    ("combined_loss", case_combined),
    ("stereo_photometric_wrt_disparity", case_stereo_photometric_disparity),
    ("reg_loss", case_reg_loss),
    ("total_loss", case_total_loss),
    ("disparity_net", case_disparity_net),
];

pub const SLOW_CASES: [(&str, Case); 1] = [("pose_net", case_pose_net)];

/// Runs `trials` seeded instances of every case.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<OpResult> {
    CASES
        .iter()
        .chain(SLOW_CASES.iter())
        .enumerate()
        .map(|(k, &(name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32));
            let max_rel_err = (0..trials).map(|_| case(&mut rng).rel_err).fold(0.0, f64::max);
            OpResult { name, trials, max_rel_err }
        })
        .collect()
}
