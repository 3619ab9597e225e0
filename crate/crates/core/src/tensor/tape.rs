use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::warp::{self, SfmSaved};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Abs,
    Exp,
    Square,
    Sqrt,
    Act(Activation),
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize, b_scalar: bool },
    Affine { a: usize, scale: f32 },
    Unary { kind: UnaryKind, a: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeom, batch: usize, cols: Vec<f32> },
    BiasAdd { x: usize, bias: usize },
    Resize { x: usize },
    Concat { parts: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Box3 { x: usize },
    GlobalAvg { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    MaskedMean { x: usize, mask: Vec<f32>, count: f64 },
    WarpStereo { img: usize, disp: usize, mask: Vec<f32> },
    WarpSfm { img: usize, depth: usize, cam: usize, saved: Vec<SfmSaved> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations. Backward replays it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` when the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn shape4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("{what} expects N×C×H×W, got {shape:?}"))),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, inputs: &[usize]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node { shape, value: tensor.into_data(), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node { shape, value: tensor.into_data(), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let b_scalar = self.nodes[b.0].value.len() == 1;
        if sa != sb && !b_scalar {
            return Err(Error::shape(format!("elementwise {kind:?}: shapes {sa:?} and {sb:?} differ")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let f = |x: f32, y: f32| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value: Vec<f32> = if b_scalar {
            let y = bv[0];
            av.iter().map(|&x| f(x, y)).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = sa.clone();
        Ok(self.push(shape, value, Op::Binary { kind, a: a.0, b: b.0, b_scalar }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `a · scale + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f32, shift: f32) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| x * scale + shift).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Affine { a: a.0, scale }, &[a.0])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.affine(a, 1.0, s)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f = |x: f32| -> f32 {
            match kind {
                UnaryKind::Abs => x.abs(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Square => x * x,
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Act(Activation::Relu) => x.max(0.0),
                UnaryKind::Act(Activation::Elu) => {
                    if x > 0.0 {
                        x
                    } else {
                        x.exp_m1()
                    }
                }
                UnaryKind::Act(Activation::Sigmoid) => sigmoid(x),
                UnaryKind::Act(Activation::Softplus) => softplus(x),
            }
        };
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Unary { kind, a: a.0 }, &[a.0])
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        self.unary(UnaryKind::Act(kind), a)
    }

    /// Zero-padded 2-D cross-correlation of an N×C×H×W input with an
    /// O×C×k×k kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = shape4(&self.nodes[input.0].shape, "conv2d input")?;
        let (o, kc, kh, kw) = shape4(&self.nodes[kernel.0].shape, "conv2d kernel")?;
        if kc != c {
            return Err(Error::shape(format!("conv2d: kernel expects {kc} channels, input has {c}")));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d: kernel must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (out_h, out_w) = match (
            kernels::conv_out_size(h, kh, stride, padding),
            kernels::conv_out_size(w, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(format!("conv2d: kernel {kh}×{kw} larger than padded input {h}×{w}"))),
        };
        let geom = ConvGeom { channels: c, height: h, width: w, out_channels: o, ksize: kh, stride, pad: padding, out_h, out_w };
        let col_len = geom.col_rows() * geom.out_pixels();
        let mut cols = vec![0.0f32; n * col_len];
        let mut out = vec![0.0f32; n * o * out_h * out_w];
        let in_len = c * h * w;
        let out_len = o * out_h * out_w;
        {
            let iv = &self.nodes[input.0].value;
            let kv = &self.nodes[kernel.0].value;
            for b in 0..n {
                kernels::conv_forward(
                    &iv[b * in_len..(b + 1) * in_len],
                    kv,
                    &geom,
                    &mut cols[b * col_len..(b + 1) * col_len],
                    &mut out[b * out_len..(b + 1) * out_len],
                );
            }
        }
        Ok(self.push(
            vec![n, o, out_h, out_w],
            out,
            Op::Conv2d { input: input.0, kernel: kernel.0, geom, batch: n, cols },
            &[input.0, kernel.0],
        ))
    }

    /// Adds a per-channel bias of shape `[C]` to an N×C×H×W tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = shape4(&self.nodes[x.0].shape, "bias_add")?;
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::shape(format!(
                "bias_add: bias has {} entries for {c} channels",
                self.nodes[bias.0].value.len()
            )));
        }
        let bv = &self.nodes[bias.0].value;
        let mut value = self.nodes[x.0].value.clone();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * h * w;
                for v in &mut value[off..off + h * w] {
                    *v += bv[ch];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, value, Op::BiasAdd { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    /// Bilinear resize, align-corners-false convention.
    pub fn resize_bilinear(&mut self, x: Var, new_h: usize, new_w: usize) -> Result<Var> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::invalid(format!("resize target must be positive, got {new_h}×{new_w}")));
        }
        let (n, c, h, w) = shape4(&self.nodes[x.0].shape, "resize_bilinear")?;
        let ty = kernels::resize_taps(h, new_h);
        let tx = kernels::resize_taps(w, new_w);
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0f32; n * c * new_h * new_w];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * new_h * new_w..(p + 1) * new_h * new_w];
            for (oy, t) in ty.iter().enumerate() {
                for (ox, u) in tx.iter().enumerate() {
                    let top = s[t.i0 * w + u.i0] * (1.0 - u.frac) + s[t.i0 * w + u.i1] * u.frac;
                    let bot = s[t.i1 * w + u.i0] * (1.0 - u.frac) + s[t.i1 * w + u.i1] * u.frac;
                    d[oy * new_w + ox] = top * (1.0 - t.frac) + bot * t.frac;
                }
            }
        }
        Ok(self.push(vec![n, c, new_h, new_w], out, Op::Resize { x: x.0 }, &[x.0]))
    }

    /// Concatenates N×Cᵢ×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = shape4(&self.nodes[first.0].shape, "concat")?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = shape4(&self.nodes[p.0].shape, "concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.nodes[p.0].shape, self.nodes[first.0].shape
                )));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for p in parts {
                let pc = self.nodes[p.0].shape[1];
                let len = pc * h * w;
                out.extend_from_slice(&self.nodes[p.0].value[b * len..(b + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(vec![n, total_c, h, w], out, Op::Concat { parts: ids.clone() }, &ids))
    }

    /// Slice `[start, start+len)` along `axis` (any axis of any rank).
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow axis {axis} [{start}, {}) out of range for {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(new_shape, out, Op::Narrow { x: x.0, axis, start }, &[x.0]))
    }

    /// 3×3 mean filter with reflection padding, same output size.
    pub fn box_filter3(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = shape4(&self.nodes[x.0].shape, "box_filter3")?;
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("box_filter3 needs at least 2×2 planes, got {h}×{w}")));
        }
        let mut out = vec![0.0f32; n * c * h * w];
        kernels::box3_forward(&self.nodes[x.0].value, n * c, h, w, &mut out);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::Box3 { x: x.0 }, &[x.0]))
    }

    /// Mean over H×W, producing N×C×1×1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = shape4(&self.nodes[x.0].shape, "global_avg_pool")?;
        let src = &self.nodes[x.0].value;
        let out = (0..n * c)
            .map(|p| {
                let s: f64 = src[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).sum();
                (s / (h * w) as f64) as f32
            })
            .collect();
        Ok(self.push(vec![n, c, 1, 1], out, Op::GlobalAvg { x: x.0 }, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().map(|&v| v as f64).sum();
        self.push(vec![1], vec![s as f32], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = &self.nodes[x.0].value;
        let s: f64 = vals.iter().map(|&v| v as f64).sum();
        let m = s / vals.len() as f64;
        self.push(vec![1], vec![m as f32], Op::Mean { x: x.0 }, &[x.0])
    }

    /// Mean of `x` over entries where `mask` is 1. The mask either matches
    /// `x` exactly or, for N×C×H×W inputs, is N×1×H×W and broadcast over C.
    pub fn masked_mean(&mut self, x: Var, mask: &[f32]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let numel = self.nodes[x.0].value.len();
        let full_mask = if mask.len() == numel {
            mask.to_vec()
        } else if let [n, c, h, w] = shape[..] {
            if mask.len() != n * h * w {
                return Err(Error::shape(format!("mask of {} entries for tensor {shape:?}", mask.len())));
            }
            let mut m = Vec::with_capacity(numel);
            for b in 0..n {
                for _ in 0..c {
                    m.extend_from_slice(&mask[b * h * w..(b + 1) * h * w]);
                }
            }
            m
        } else {
            return Err(Error::shape(format!("mask of {} entries for tensor {shape:?}", mask.len())));
        };
        let count: f64 = full_mask.iter().map(|&m| m as f64).sum();
        if count <= 0.0 {
            return Err(Error::EmptyMask);
        }
        let s: f64 = self.nodes[x.0]
            .value
            .iter()
            .zip(&full_mask)
            .map(|(&v, &m)| v as f64 * m as f64)
            .sum();
        let value = vec![(s / count) as f32];
        Ok(self.push(vec![1], value, Op::MaskedMean { x: x.0, mask: full_mask, count }, &[x.0]))
    }

    /// Stereo reconstruction `out(x, y) = img(x + disp(x, y), y)`; returns the
    /// reconstruction and its N×1×H×W validity mask.
    pub fn warp_stereo(&mut self, img: Var, disp: Var) -> Result<(Var, Vec<f32>)> {
        let (n, c, h, w) = shape4(&self.nodes[img.0].shape, "warp_stereo image")?;
        let (dn, dc, dh, dw) = shape4(&self.nodes[disp.0].shape, "warp_stereo disparity")?;
        if (dn, dc, dh, dw) != (n, 1, h, w) {
            return Err(Error::shape(format!(
                "warp_stereo: disparity {:?} does not match image {:?}",
                self.nodes[disp.0].shape, self.nodes[img.0].shape
            )));
        }
        let mut out = vec![0.0f32; n * c * h * w];
        let mut mask = vec![0.0f32; n * h * w];
        for b in 0..n {
            warp::stereo_forward(
                &self.nodes[img.0].value[b * c * h * w..(b + 1) * c * h * w],
                c,
                h,
                w,
                &self.nodes[disp.0].value[b * h * w..(b + 1) * h * w],
                &mut out[b * c * h * w..(b + 1) * c * h * w],
                &mut mask[b * h * w..(b + 1) * h * w],
            );
        }
        let shape = self.nodes[img.0].shape.clone();
        let v = self.push(shape, out, Op::WarpStereo { img: img.0, disp: disp.0, mask: mask.clone() }, &[img.0, disp.0]);
        Ok((v, mask))
    }

    /// Rigid reconstruction of the target view from `img` (the reference
    /// frame), per-pixel target depth and camera parameters
    /// `[fx, fy, cx, cy, rx, ry, rz, tx, ty, tz]` per batch item.
    pub fn warp_sfm(&mut self, img: Var, depth: Var, cam: Var) -> Result<(Var, Vec<f32>)> {
        let (n, c, h, w) = shape4(&self.nodes[img.0].shape, "warp_sfm image")?;
        let (dn, dc, dh, dw) = shape4(&self.nodes[depth.0].shape, "warp_sfm depth")?;
        if (dn, dc, dh, dw) != (n, 1, h, w) {
            return Err(Error::shape(format!(
                "warp_sfm: depth {:?} does not match image {:?}",
                self.nodes[depth.0].shape, self.nodes[img.0].shape
            )));
        }
        if self.nodes[cam.0].value.len() != n * warp::CAM_PARAMS {
            return Err(Error::shape(format!(
                "warp_sfm: camera tensor has {} values, expected {}",
                self.nodes[cam.0].value.len(),
                n * warp::CAM_PARAMS
            )));
        }
        if let Some(z) = self.nodes[depth.0].value.iter().find(|&&z| !(z > 0.0)) {
            return Err(Error::invalid(format!("warp_sfm: non-positive depth {z}")));
        }
        let mut out = vec![0.0f32; n * c * h * w];
        let mut mask = vec![0.0f32; n * h * w];
        let mut saved = Vec::with_capacity(n);
        for b in 0..n {
            let cam_v: [f32; warp::CAM_PARAMS] = self.nodes[cam.0].value
                [b * warp::CAM_PARAMS..(b + 1) * warp::CAM_PARAMS]
                .try_into()
                .expect("slice length checked");
            saved.push(warp::sfm_forward(
                &self.nodes[img.0].value[b * c * h * w..(b + 1) * c * h * w],
                c,
                h,
                w,
                &self.nodes[depth.0].value[b * h * w..(b + 1) * h * w],
                &cam_v,
                &mut out[b * c * h * w..(b + 1) * c * h * w],
                &mut mask[b * h * w..(b + 1) * h * w],
            ));
        }
        let shape = self.nodes[img.0].shape.clone();
        let v = self.push(
            shape,
            out,
            Op::WarpSfm { img: img.0, depth: depth.0, cam: cam.0, saved },
            &[img.0, depth.0, cam.0],
        );
        Ok((v, mask))
    }

    /// Reverse pass from a scalar `loss`. Every node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, b_scalar } => {
                let (a, b, b_scalar) = (*a, *b, *b_scalar);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let bat = |i: usize| if b_scalar { bv[0] } else { bv[i] };
                if self.wants(a) {
                    let ga = accumulate(&mut grads[a], av.len());
                    for (i, (dst, &gi)) in ga.iter_mut().zip(g).enumerate() {
                        *dst += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bat(i),
                            BinaryKind::Div => gi / bat(i),
                        };
                    }
                }
                if self.wants(b) {
                    let contrib = |i: usize, gi: f32| -> f32 {
                        match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[i],
                            BinaryKind::Div => {
                                let y = bat(i);
                                -gi * av[i] / (y * y)
                            }
                        }
                    };
                    let gb = accumulate(&mut grads[b], bv.len());
                    if b_scalar {
                        let s: f64 = g.iter().enumerate().map(|(i, &gi)| contrib(i, gi) as f64).sum();
                        gb[0] += s as f32;
                    } else {
                        for (i, (dst, &gi)) in gb.iter_mut().zip(g).enumerate() {
                            *dst += contrib(i, gi);
                        }
                    }
                }
            }
            Op::Affine { a, scale } => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[*a], g.len());
                    for (dst, &gi) in ga.iter_mut().zip(g) {
                        *dst += gi * scale;
                    }
                }
            }
            Op::Unary { kind, a } => {
                if !self.wants(*a) {
                    return;
                }
                let x = &self.nodes[*a].value;
                let y = &node.value;
                let ga = accumulate(&mut grads[*a], g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Exp => y[i],
                        UnaryKind::Square => 2.0 * x[i],
                        UnaryKind::Sqrt => {
                            if y[i] > 0.0 {
                                0.5 / y[i]
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Act(Activation::Relu) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Act(Activation::Elu) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                y[i] + 1.0
                            }
                        }
                        UnaryKind::Act(Activation::Sigmoid) => y[i] * (1.0 - y[i]),
                        UnaryKind::Act(Activation::Softplus) => sigmoid(x[i]),
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::Conv2d { input, kernel, geom, batch, cols } => {
                let (input, kernel) = (*input, *kernel);
                let col_len = geom.col_rows() * geom.out_pixels();
                let out_len = geom.out_channels * geom.out_pixels();
                let in_len = geom.channels * geom.height * geom.width;
                if self.wants(kernel) {
                    let gk = accumulate(&mut grads[kernel], self.nodes[kernel].value.len());
                    for b in 0..*batch {
                        kernels::conv_backward_kernel(
                            &g[b * out_len..(b + 1) * out_len],
                            &cols[b * col_len..(b + 1) * col_len],
                            geom,
                            gk,
                        );
                    }
                }
                if self.wants(input) {
                    let kv = &self.nodes[kernel].value;
                    let mut scratch = vec![0.0f32; col_len];
                    let gi = accumulate(&mut grads[input], batch * in_len);
                    for b in 0..*batch {
                        kernels::conv_backward_input(
                            &g[b * out_len..(b + 1) * out_len],
                            kv,
                            geom,
                            &mut scratch,
                            &mut gi[b * in_len..(b + 1) * in_len],
                        );
                    }
                }
            }
            Op::BiasAdd { x, bias } => {
                let (n, c, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[*x], g.len());
                    for (dst, &gi) in gx.iter_mut().zip(g) {
                        *dst += gi;
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[*bias], c);
                    for b in 0..n {
                        for (ch, dst) in gb.iter_mut().enumerate() {
                            let off = (b * c + ch) * h * w;
                            let s: f64 = g[off..off + h * w].iter().map(|&v| v as f64).sum();
                            *dst += s as f32;
                        }
                    }
                }
            }
            Op::Resize { x } => {
                if !self.wants(*x) {
                    return;
                }
                let src_shape = &self.nodes[*x].shape;
                let (n, c, h, w) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
                let (nh, nw) = (node.shape[2], node.shape[3]);
                let ty = kernels::resize_taps(h, nh);
                let tx = kernels::resize_taps(w, nw);
                let gx = accumulate(&mut grads[*x], n * c * h * w);
                for p in 0..n * c {
                    let go = &g[p * nh * nw..(p + 1) * nh * nw];
                    let gi = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, t) in ty.iter().enumerate() {
                        for (ox, u) in tx.iter().enumerate() {
                            let v = go[oy * nw + ox];
                            let top = v * (1.0 - t.frac);
                            let bot = v * t.frac;
                            gi[t.i0 * w + u.i0] += top * (1.0 - u.frac);
                            gi[t.i0 * w + u.i1] += top * u.frac;
                            gi[t.i1 * w + u.i0] += bot * (1.0 - u.frac);
                            gi[t.i1 * w + u.i1] += bot * u.frac;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let (n, total_c, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                let mut offset_c = 0;
                for &p in parts {
                    let pc = self.nodes[p].shape[1];
                    if self.wants(p) {
                        let gp = accumulate(&mut grads[p], n * pc * h * w);
                        for b in 0..n {
                            let src = &g[(b * total_c + offset_c) * h * w..(b * total_c + offset_c + pc) * h * w];
                            for (dst, &v) in gp[b * pc * h * w..(b + 1) * pc * h * w].iter_mut().zip(src) {
                                *dst += v;
                            }
                        }
                    }
                    offset_c += pc;
                }
            }
            Op::Narrow { x, axis, start } => {
                if !self.wants(*x) {
                    return;
                }
                let shape = &self.nodes[*x].shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let gx = accumulate(&mut grads[*x], shape.iter().product());
                for o in 0..outer {
                    let base = o * shape[*axis] * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (dst, &v) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            Op::Box3 { x } => {
                if self.wants(*x) {
                    let (n, c, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                    let gx = accumulate(&mut grads[*x], g.len());
                    kernels::box3_backward(g, n * c, h, w, gx);
                }
            }
            Op::GlobalAvg { x } => {
                if self.wants(*x) {
                    let shape = &self.nodes[*x].shape;
                    let hw = shape[2] * shape[3];
                    let gx = accumulate(&mut grads[*x], shape.iter().product());
                    for (p, &gp) in g.iter().enumerate() {
                        let v = gp / hw as f32;
                        for dst in &mut gx[p * hw..(p + 1) * hw] {
                            *dst += v;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.nodes[*x].value.len();
                    let gx = accumulate(&mut grads[*x], n);
                    for dst in gx.iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.wants(*x) {
                    let n = self.nodes[*x].value.len();
                    let v = (g[0] as f64 / n as f64) as f32;
                    let gx = accumulate(&mut grads[*x], n);
                    for dst in gx.iter_mut() {
                        *dst += v;
                    }
                }
            }
            Op::MaskedMean { x, mask, count } => {
                if self.wants(*x) {
                    let v = (g[0] as f64 / count) as f32;
                    let gx = accumulate(&mut grads[*x], mask.len());
                    for (dst, &m) in gx.iter_mut().zip(mask) {
                        *dst += v * m;
                    }
                }
            }
            Op::WarpStereo { img, disp, mask } => {
                let (img, disp) = (*img, *disp);
                let (n, c, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                let plane = c * h * w;
                let want_img = self.wants(img);
                let want_disp = self.wants(disp);
                let mut gi = if want_img { grads[img].take().or_else(|| Some(vec![0.0; n * plane])) } else { None };
                let mut gd = if want_disp { grads[disp].take().or_else(|| Some(vec![0.0; n * h * w])) } else { None };
                for b in 0..n {
                    warp::stereo_backward(
                        &self.nodes[img].value[b * plane..(b + 1) * plane],
                        c,
                        h,
                        w,
                        &self.nodes[disp].value[b * h * w..(b + 1) * h * w],
                        &mask[b * h * w..(b + 1) * h * w],
                        &g[b * plane..(b + 1) * plane],
                        gi.as_mut().map(|v| &mut v[b * plane..(b + 1) * plane]),
                        gd.as_mut().map(|v| &mut v[b * h * w..(b + 1) * h * w]),
                    );
                }
                if want_img {
                    grads[img] = gi;
                }
                if want_disp {
                    grads[disp] = gd;
                }
            }
            Op::WarpSfm { img, depth, cam, saved } => {
                let (img, depth, cam) = (*img, *depth, *cam);
                let (n, c, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                let plane = c * h * w;
                let mut gi = if self.wants(img) { Some(grads[img].take().unwrap_or_else(|| vec![0.0; n * plane])) } else { None };
                let mut gd = if self.wants(depth) { Some(grads[depth].take().unwrap_or_else(|| vec![0.0; n * h * w])) } else { None };
                let mut gc = if self.wants(cam) {
                    Some(grads[cam].take().unwrap_or_else(|| vec![0.0; n * warp::CAM_PARAMS]))
                } else {
                    None
                };
                for b in 0..n {
                    warp::sfm_backward(
                        &self.nodes[img].value[b * plane..(b + 1) * plane],
                        c,
                        h,
                        w,
                        &saved[b],
                        &g[b * plane..(b + 1) * plane],
                        gi.as_mut().map(|v| &mut v[b * plane..(b + 1) * plane]),
                        gd.as_mut().map(|v| &mut v[b * h * w..(b + 1) * h * w]),
                        gc.as_mut().map(|v| &mut v[b * warp::CAM_PARAMS..(b + 1) * warp::CAM_PARAMS]),
                    );
                }
                if gi.is_some() {
                    grads[img] = gi;
                }
                if gd.is_some() {
                    grads[depth] = gd;
                }
                if gc.is_some() {
                    grads[cam] = gc;
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]));
        let b = tape.leaf(t(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_self_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3.0]));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sub_self_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[0.3, -1.2, 5.0]));
        let z = tape.sub(x, x).unwrap();
        assert_eq!(tape.value(z), &[0.0, 0.0, 0.0]);
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]));
        let b = tape.leaf(t(&[1.0, 2.0, 3.0]));
        match tape.add(a, b) {
            Err(Error::Shape(msg)) => assert!(msg.contains("[2]") && msg.contains("[3]")),
            other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0, 3.0]));
        let s = tape.leaf(t(&[2.0]));
        let d = tape.div(a, s).unwrap();
        assert_eq!(tape.value(d), &[0.5, 1.0, 1.5]);
        let l = tape.sum(d);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.5, 0.5, 0.5]);
        // d/ds Σ a/s = -Σ a / s² = -6/4
        assert_eq!(grads.get(s).unwrap(), &[-1.5]);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[0.0]));
        let s = tape.activation(Activation::Sigmoid, x);
        assert_eq!(tape.value(s), &[0.5]);

        let neg = tape.leaf(t(&[-1.0]));
        let r = tape.activation(Activation::Relu, neg);
        assert_eq!(tape.value(r), &[0.0]);
        let l = tape.sum(r);
        assert_eq!(tape.backward(l).unwrap().get(neg).unwrap(), &[0.0]);

        let mut tape = Tape::new();
        let z = tape.leaf(t(&[0.0]));
        let e = tape.activation(Activation::Elu, z);
        assert_eq!(tape.value(e), &[0.0]);
        let l = tape.sum(e);
        assert_eq!(tape.backward(l).unwrap().get(z).unwrap(), &[1.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let x = tape.leaf(Tensor::new(vec![1, 1, 3, 3], data.clone()).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn conv_all_ones_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv_output_size_and_channel_check() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 8, 6]));
        let k = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 3]);
        let bad = tape.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, bad, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn resize_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 2.0]).unwrap());
        let y = tape.resize_bilinear(x, 1, 4).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.5, 1.5, 2.0]);

        let data: Vec<f32> = (0..12).map(|v| v as f32 * 0.3).collect();
        let z = tape.leaf(Tensor::new(vec![1, 1, 3, 4], data.clone()).unwrap());
        let same = tape.resize_bilinear(z, 3, 4).unwrap();
        assert_eq!(tape.value(same), data.as_slice());

        let c = tape.leaf(Tensor::full(&[1, 2, 3, 5], 0.7));
        let up = tape.resize_bilinear(c, 7, 9).unwrap();
        assert!(tape.value(up).iter().all(|&v| (v - 0.7).abs() < 1e-7));

        assert!(tape.resize_bilinear(c, 0, 4).is_err());
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0]));
        let m = tape.mean(x);
        assert_eq!(tape.scalar(m), 2.0);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x);
        assert_eq!(tape.backward(m).unwrap().get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn mean_of_weighted_input() {
        let xs = [0.5f32, -1.0, 2.0, 4.0];
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[0.1, 0.2, 0.3, 0.4]));
        let x = tape.constant(t(&xs));
        let p = tape.mul(w, x).unwrap();
        let l = tape.mean(p);
        let grads = tape.backward(l).unwrap();
        let expect: Vec<f32> = xs.iter().map(|v| v / 4.0).collect();
        assert_eq!(grads.get(w).unwrap(), expect.as_slice());
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1.0]));
        let other = tape.leaf(t(&[2.0]));
        let l = tape.sum(other);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(other).unwrap(), &[1.0]);
    }

    #[test]
    fn masked_mean_semantics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 100.0, 3.0, 100.0]));
        let m = tape.masked_mean(x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tape.scalar(m), 2.0);
        assert!(matches!(tape.masked_mean(x, &[0.0; 4]), Err(Error::EmptyMask)));
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = tape.leaf(Tensor::new(vec![1, 3, 2, 4], data.clone()).unwrap());
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 2).unwrap();
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
        let cols = tape.narrow(x, 3, 1, 3).unwrap();
        assert_eq!(tape.shape(cols), &[1, 3, 2, 3]);
        assert_eq!(&tape.value(cols)[..3], &[1.0, 2.0, 3.0]);
    }
}
