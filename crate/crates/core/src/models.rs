//! Trainable networks: a small encoder-decoder for disparity and a pose
//! regressor with learned intrinsics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{DisparityMap, Image, Plane};
use crate::tensor::{Activation, ParamSet, Tape, Tensor, Var};
use crate::warp::{CameraParams, CAM_PARAMS};

pub const POSE_SCALE: f32 = 0.01;

#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
    ksize: usize,
    stride: usize,
}

fn conv(name: &'static str, cin: usize, cout: usize, ksize: usize, stride: usize) -> ConvSpec {
    ConvSpec { name, cin, cout, ksize, stride }
}

/// Kaiming-uniform weights and zero biases for every layer, drawn in order
/// from one seeded stream.
fn init_params(specs: &[ConvSpec], rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for s in specs {
        let fan_in = s.cin * s.ksize * s.ksize;
        let bound = (6.0 / fan_in as f32).sqrt();
        let n = s.cout * fan_in;
        let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        p.push(
            format!("{}.weight", s.name),
            Tensor::new(vec![s.cout, s.cin, s.ksize, s.ksize], w).expect("consistent layer shape"),
        );
        p.push(format!("{}.bias", s.name), Tensor::zeros(&[s.cout]));
    }
    p
}

fn apply(tape: &mut Tape, vars: &[Var], layer: usize, spec: &ConvSpec, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, vars[2 * layer], spec.stride, spec.ksize / 2)?;
    tape.bias_add(y, vars[2 * layer + 1])
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!("network input must be a positive multiple of 8 in each side, got {h}×{w}")));
    }
    Ok(())
}

fn manifest_of(kind: &str, params: &ParamSet) -> String {
    let mut out = format!("# {kind}: {} parameters\n", params.numel());
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("{name}\t{}\t{}\n", dims.join("x"), t.numel()));
    }
    out
}

/// Three stride-2 encoder levels (16/32/64 channels), a mirrored decoder
/// with skip connections, and a sigmoid output scaled into `(d_min, d_max)`.
#[derive(Clone, Debug)]
pub struct DisparityNet {
    pub params: ParamSet,
    pub d_min: f32,
    pub d_max: f32,
    height: usize,
    width: usize,
    channels: usize,
}

impl DisparityNet {
    fn specs(channels: usize) -> [ConvSpec; 7] {
        [
            conv("enc1", channels, 16, 3, 2),
            conv("enc2", 16, 32, 3, 2),
            conv("enc3", 32, 64, 3, 2),
            conv("dec3", 64 + 32, 32, 3, 1),
            conv("dec2", 32 + 16, 16, 3, 1),
            conv("dec1", 16 + channels, 16, 3, 1),
            conv("out", 16, 1, 3, 1),
        ]
    }

    pub fn new(height: usize, width: usize, channels: usize, seed: u64) -> Result<Self> {
        check_size(height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&Self::specs(channels), &mut rng);
        Ok(Self { params, d_min: 0.1, d_max: 0.3 * width as f32, height, width, channels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Disparity `N×1×H×W` for image `N×C×H×W`, with `vars` from
    /// `self.params.register`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.channels && h == self.height && w == self.width => {}
            _ => {
                return Err(Error::shape(format!(
                    "disparity net built for {}×{}×{}, got {shape:?}",
                    self.channels, self.height, self.width
                )))
            }
        }
        let (h, w) = (self.height, self.width);
        let s = Self::specs(self.channels);
        let elu = |tape: &mut Tape, x: Var| tape.activation(Activation::Elu, x);

        let e1 = apply(tape, vars, 0, &s[0], image)?;
        let e1 = elu(tape, e1);
        let e2 = apply(tape, vars, 1, &s[1], e1)?;
        let e2 = elu(tape, e2);
        let e3 = apply(tape, vars, 2, &s[2], e2)?;
        let e3 = elu(tape, e3);

        let u3 = tape.resize_bilinear(e3, h / 4, w / 4)?;
        let c3 = tape.concat_channels(&[u3, e2])?;
        let d3 = apply(tape, vars, 3, &s[3], c3)?;
        let d3 = elu(tape, d3);
        let u2 = tape.resize_bilinear(d3, h / 2, w / 2)?;
        let c2 = tape.concat_channels(&[u2, e1])?;
        let d2 = apply(tape, vars, 4, &s[4], c2)?;
        let d2 = elu(tape, d2);
        let u1 = tape.resize_bilinear(d2, h, w)?;
        let c1 = tape.concat_channels(&[u1, image])?;
        let d1 = apply(tape, vars, 5, &s[5], c1)?;
        let d1 = elu(tape, d1);

        let raw = apply(tape, vars, 6, &s[6], d1)?;
        let sig = tape.activation(Activation::Sigmoid, raw);
        Ok(tape.affine(sig, self.d_max - self.d_min, self.d_min))
    }

    pub fn predict(&self, image: &Image) -> Result<DisparityMap> {
        let mut tape = Tape::new();
        let vars = constants(&mut tape, &self.params);
        let x = tape.constant(image.to_tensor());
        let d = self.forward(&mut tape, &vars, x)?;
        Ok(DisparityMap(Plane::from_tensor(&tape.to_tensor(d))?))
    }

    pub fn manifest(&self) -> String {
        manifest_of("disparity", &self.params)
    }
}

/// Four stride-2 levels over the stacked frame pair, global average pooling
/// and a 1×1 head producing rotation, translation and intrinsics.
#[derive(Clone, Debug)]
pub struct PoseNet {
    pub params: ParamSet,
    height: usize,
    width: usize,
    channels: usize,
}

impl PoseNet {
    fn specs(channels: usize) -> [ConvSpec; 5] {
        [
            conv("pose1", 2 * channels, 16, 3, 2),
            conv("pose2", 16, 32, 3, 2),
            conv("pose3", 32, 64, 3, 2),
            conv("pose4", 64, 64, 3, 2),
            conv("head", 64, CAM_PARAMS, 1, 1),
        ]
    }

    pub fn new(height: usize, width: usize, channels: usize, seed: u64) -> Result<Self> {
        check_size(height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&Self::specs(channels), &mut rng);
        // A zero head starts every pair at the identity motion and the
        // nominal intrinsics.
        let head = params.len() - 2;
        params.get_mut(head).data_mut().fill(0.0);
        Ok(Self { params, height, width, channels })
    }

    /// Camera tensor `N×10×1×1` laid out as
    /// `[fx, fy, cx, cy, rx, ry, rz, tx, ty, tz]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], target: Var, reference: Var) -> Result<Var> {
        if tape.shape(target) != tape.shape(reference) {
            return Err(Error::shape(format!(
                "pose frames differ: {:?} vs {:?}",
                tape.shape(target),
                tape.shape(reference)
            )));
        }
        let shape = tape.shape(target).to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.channels && h == self.height && w == self.width => {}
            _ => {
                return Err(Error::shape(format!(
                    "pose net built for {}×{}×{}, got {shape:?}",
                    self.channels, self.height, self.width
                )))
            }
        }
        let s = Self::specs(self.channels);
        let mut x = tape.concat_channels(&[target, reference])?;
        for (i, spec) in s[..4].iter().enumerate() {
            x = apply(tape, vars, i, spec, x)?;
            x = tape.activation(Activation::Elu, x);
        }
        let pooled = tape.global_avg_pool(x)?;
        let raw = apply(tape, vars, 4, &s[4], pooled)?;
        camera_from_raw(tape, raw, self.height, self.width)
    }

    pub fn predict(&self, target: &Image, reference: &Image) -> Result<CameraParams> {
        let mut tape = Tape::new();
        let vars = constants(&mut tape, &self.params);
        let t = tape.constant(target.to_tensor());
        let r = tape.constant(reference.to_tensor());
        let cam = self.forward(&mut tape, &vars, t, r)?;
        let v: [f32; CAM_PARAMS] = tape.value(cam)[..CAM_PARAMS].try_into().expect("ten values");
        CameraParams::from_array(&v)
    }

    pub fn manifest(&self) -> String {
        manifest_of("pose", &self.params)
    }
}

/// Maps raw head outputs `N×10×1×1` (rotation 0..3, translation 3..6,
/// intrinsics 6..10) to camera parameters. At zero the camera is the
/// identity with `fx = fy = W`, `cx = W/2`, `cy = H/2`.
pub fn camera_from_raw(tape: &mut Tape, raw: Var, height: usize, width: usize) -> Result<Var> {
    let rot = tape.narrow(raw, 1, 0, 3)?;
    let rot = tape.scale(rot, POSE_SCALE);
    let trans = tape.narrow(raw, 1, 3, 3)?;
    let trans = tape.scale(trans, POSE_SCALE);
    let f = tape.narrow(raw, 1, 6, 2)?;
    let f = tape.activation(Activation::Softplus, f);
    let f = tape.scale(f, width as f32 / std::f32::consts::LN_2);
    let cx = tape.narrow(raw, 1, 8, 1)?;
    let cx = tape.activation(Activation::Sigmoid, cx);
    let cx = tape.scale(cx, width as f32);
    let cy = tape.narrow(raw, 1, 9, 1)?;
    let cy = tape.activation(Activation::Sigmoid, cy);
    let cy = tape.scale(cy, height as f32);
    tape.concat_channels(&[f, cx, cy, rot, trans])
}

fn constants(tape: &mut Tape, params: &ParamSet) -> Vec<Var> {
    params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
}

/// Disparity and pose networks for `h×w` RGB input, seeded independently.
pub fn build_default_nets(h: usize, w: usize, seed: u64) -> Result<(DisparityNet, PoseNet)> {
    let disp = DisparityNet::new(h, w, 3, seed)?;
    let pose = PoseNet::new(h, w, 3, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))?;
    Ok((disp, pose))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn shapes_and_range() {
        let (d, _) = build_default_nets(48, 64, 1).unwrap();
        let out = d.predict(&random_image(2, 48, 64)).unwrap();
        assert_eq!((out.plane().height(), out.plane().width()), (48, 64));
        assert!(out.plane().data().iter().all(|&v| v > d.d_min && v < d.d_max && v.is_finite()));
    }

    #[test]
    fn zero_output_layer_gives_midpoint() {
        let mut d = DisparityNet::new(16, 16, 3, 3).unwrap();
        let n = d.params.len();
        d.params.get_mut(n - 2).data_mut().fill(0.0);
        let out = d.predict(&random_image(4, 16, 16)).unwrap();
        let mid = (d.d_min + d.d_max) / 2.0;
        assert!(out.plane().data().iter().all(|&v| (v - mid).abs() < 1e-5));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(build_default_nets(50, 64, 0).is_err());
        assert!(build_default_nets(48, 60, 0).is_err());
        let (d, _) = build_default_nets(48, 64, 0).unwrap();
        assert!(d.predict(&random_image(0, 32, 64)).is_err());
    }

    #[test]
    fn deterministic_and_small() {
        let (a, pa) = build_default_nets(64, 64, 7).unwrap();
        let (b, pb) = build_default_nets(64, 64, 7).unwrap();
        let bits = |p: &ParamSet| p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a.params), bits(&b.params));
        assert_eq!(bits(&pa.params), bits(&pb.params));
        assert!(a.params.numel() + pa.params.numel() < 500_000);
        let out = a.predict(&random_image(1, 64, 64)).unwrap();
        assert!(out.plane().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pose_zero_head_is_identity() {
        let (_, p) = build_default_nets(48, 64, 5).unwrap();
        let cam = p.predict(&random_image(1, 48, 64), &random_image(2, 48, 64)).unwrap();
        assert!((cam.fx - 64.0).abs() < 1e-4 && (cam.fy - 64.0).abs() < 1e-4);
        assert!((cam.cx - 32.0).abs() < 1e-4 && (cam.cy - 24.0).abs() < 1e-4);
        assert_eq!(cam.rotation, [0.0; 3]);
        assert_eq!(cam.translation, [0.0; 3]);
    }

    #[test]
    fn camera_mapping_ranges_and_asymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let raw: Vec<f32> = (0..10).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut tape = Tape::new();
            let r = tape.constant(Tensor::new(vec![1, 10, 1, 1], raw).unwrap());
            let cam = camera_from_raw(&mut tape, r, 48, 64).unwrap();
            let v = tape.value(cam);
            assert!(v[0] > 0.0 && v[1] > 0.0);
            assert!((0.0..=64.0).contains(&v[2]) && (0.0..=48.0).contains(&v[3]));
        }

        let (_, mut p) = build_default_nets(16, 16, 5).unwrap();
        let head = p.params.len() - 2;
        p.params.get_mut(head).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * (i % 7) as f32);
        let (a, b) = (random_image(1, 16, 16), random_image(2, 16, 16));
        assert_ne!(p.predict(&a, &b).unwrap(), p.predict(&b, &a).unwrap());
    }

    #[test]
    fn manifest_lists_layers() {
        let (d, p) = build_default_nets(16, 16, 0).unwrap();
        let m = d.manifest();
        assert!(m.contains("enc1.weight\t16x3x3x3\t432"));
        assert_eq!(m.lines().count(), 1 + d.params.len());
        assert!(p.manifest().contains("head.bias\t10\t10"));
    }
}
