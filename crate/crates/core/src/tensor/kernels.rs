//! Raw forward/backward kernels on flat buffers. Shapes are validated by the
//! tape before these are called.

/// Geometry of a 2-D convolution on one batch item.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.ksize * self.ksize
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_out_size(size: usize, ksize: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < ksize || stride == 0 {
        return None;
    }
    Some((padded - ksize) / stride + 1)
}

pub(crate) fn im2col(input: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.out_pixels();
    let k = g.ksize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, grad_input: &mut [f32]) {
    let p = g.out_pixels();
    let k = g.ksize;
    for c in 0..g.channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover the strided m×k, k×n
    // and m×n views; c is a dense row-major m×n block.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution of one batch item. `cols` is filled with the im2col
/// matrix and kept for the backward pass.
pub(crate) fn conv_forward(input: &[f32], kernel: &[f32], g: &ConvGeom, cols: &mut [f32], out: &mut [f32]) {
    im2col(input, g, cols);
    let kk = g.col_rows();
    let p = g.out_pixels();
    gemm(g.out_channels, kk, p, kernel, (kk as isize, 1), cols, (p as isize, 1), 0.0, out);
}

pub(crate) fn conv_backward_kernel(grad_out: &[f32], cols: &[f32], g: &ConvGeom, grad_kernel: &mut [f32]) {
    let kk = g.col_rows();
    let p = g.out_pixels();
    // dW[O×K] += dY[O×P] · colsᵀ[P×K]
    gemm(g.out_channels, p, kk, grad_out, (p as isize, 1), cols, (1, p as isize), 1.0, grad_kernel);
}

pub(crate) fn conv_backward_input(grad_out: &[f32], kernel: &[f32], g: &ConvGeom, scratch: &mut [f32], grad_input: &mut [f32]) {
    let kk = g.col_rows();
    let p = g.out_pixels();
    // dcols[K×P] = Wᵀ[K×O] · dY[O×P]
    gemm(kk, g.out_channels, p, kernel, (1, kk as isize), grad_out, (p as isize, 1), 0.0, scratch);
    col2im_add(scratch, g, grad_input);
}

/// Source taps for align-corners-false bilinear resizing along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub frac: f32,
}

pub(crate) fn resize_taps(in_size: usize, out_size: usize) -> Vec<Taps> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            Taps { i0, i1, frac: (src - i0 as f64) as f32 }
        })
        .collect()
}

/// Reflect-padded index for a window offset; requires `n >= 2`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// 3×3 mean filter with reflection padding over each H×W plane.
pub(crate) fn box3_forward(input: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) {
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for dy in -1..=1isize {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        acc += src[yy * w + reflect(x as isize + dx, w)];
                    }
                }
                dst[y * w + x] = acc / 9.0;
            }
        }
    }
}

pub(crate) fn box3_backward(grad_out: &[f32], planes: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    for p in 0..planes {
        let g = &grad_out[p * h * w..(p + 1) * h * w];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = g[y * w + x] / 9.0;
                for dy in -1..=1isize {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        dst[yy * w + reflect(x as isize + dx, w)] += v;
                    }
                }
            }
        }
    }
}
