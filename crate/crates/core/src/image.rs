//! Dense float image grids.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// C×H×W image with `f32` samples, nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!("image dimensions must be positive, got {channels}×{height}×{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}×{height}×{width} image needs {} samples, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("positive dimensions")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// 1×C×H×W tensor view (copy).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    /// Builds an image from a 1×C×H×W (or C×H×W) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [1, c, h, w] | [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            ref s => Err(Error::shape(format!("expected 1×C×H×W tensor, got {s:?}"))),
        }
    }
}

/// Single-channel H×W grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!("{height}×{width} plane with {} samples", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("consistent plane")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [1, 1, h, w] | [1, h, w] | [h, w] => Self::new(h, w, t.data().to_vec()),
            ref s => Err(Error::shape(format!("expected single-channel tensor, got {s:?}"))),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Horizontal correspondence offsets in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap(pub Plane);

/// Per-pixel depth along the optical axis, in scene units.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(pub Plane);

impl DisparityMap {
    pub fn plane(&self) -> &Plane {
        &self.0
    }
}

impl DepthMap {
    pub fn plane(&self) -> &Plane {
        &self.0
    }
}

/// Which unsupervised formulation supplies the training signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Stereo,
    Sfm,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Stereo => "stereo",
            Mode::Sfm => "sfm",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stereo" => Ok(Mode::Stereo),
            "sfm" => Ok(Mode::Sfm),
            _ => Err(Error::invalid(format!("unknown mode `{s}` (expected stereo or sfm)"))),
        }
    }
}
