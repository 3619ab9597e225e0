//! Python bindings: detector, replay buffer, regularizer, warps, metrics,
//! synthetic worlds, a small autodiff entry point and the run commands.
//!
//! Images cross the boundary as `(channels, height, width, data)` with the
//! data flattened channel-major; planes as `(height, width, data)`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lifelong_depth::detector::{self, DetectorConfig};
use lifelong_depth::eval::{self as ev, Align};
use lifelong_depth::image::{DepthMap, DisparityMap, Image, Mode, Plane};
use lifelong_depth::losses::{self, LossWeights};
use lifelong_depth::regularizer;
use lifelong_depth::replay::{self, ReplaySample, Source};
use lifelong_depth::runner;
use lifelong_depth::tensor::{Activation, ParamSet, Tape, Tensor, Var};
use lifelong_depth::warp::{self, CameraParams};
use lifelong_depth::worlds;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

pub type PyImage = (usize, usize, usize, Vec<f32>);
pub type PyPlane = (usize, usize, Vec<f32>);

fn err(e: lifelong_depth::Error) -> PyErr {
    match e {
        lifelong_depth::Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(i: PyImage) -> PyResult<Image> {
    Image::new(i.0, i.1, i.2, i.3).map_err(err)
}

fn plane(p: PyPlane) -> PyResult<Plane> {
    Plane::new(p.0, p.1, p.2).map_err(err)
}

fn py_image(i: &Image) -> PyImage {
    (i.channels(), i.height(), i.width(), i.data().to_vec())
}

fn py_plane(p: &Plane) -> PyPlane {
    (p.height(), p.width(), p.data().to_vec())
}

fn mode(s: &str) -> PyResult<Mode> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown mode `{s}`")))
}

/// Running loss statistics and the boundary distance.
#[pyclass]
pub struct LossStats {
    inner: detector::LossStats,
}

#[pymethods]
impl LossStats {
    #[new]
    #[pyo3(signature = (alpha=0.1, warmup=10, var_init=1e-4, var_floor=1e-8))]
    pub fn new(alpha: f64, warmup: u64, var_init: f64, var_floor: f64) -> Self {
        Self { inner: detector::LossStats::new(DetectorConfig { alpha, warmup, var_init, var_floor }) }
    }

    /// Statistics already past warmup.
    #[staticmethod]
    #[pyo3(signature = (mu, var, alpha=0.1))]
    pub fn with_moments(mu: f64, var: f64, alpha: f64) -> Self {
        Self { inner: detector::LossStats::with_moments(mu, var, alpha) }
    }

    pub fn mahalanobis(&self, loss: f64) -> f64 {
        self.inner.mahalanobis(loss)
    }

    pub fn log_new_task_prob(&self, loss: f64) -> f64 {
        self.inner.log_new_task_prob(loss)
    }

    pub fn update(&mut self, loss: f64) -> PyResult<()> {
        self.inner.update(loss).map_err(err)
    }

    /// Returns `(distance, boundary)` for `loss`, then folds it in.
    pub fn observe(&mut self, loss: f64) -> PyResult<(f64, bool)> {
        let o = self.inner.observe(loss).map_err(err)?;
        Ok((o.distance, o.boundary))
    }

    #[getter]
    pub fn mu(&self) -> f64 {
        self.inner.mu
    }

    #[getter]
    pub fn var(&self) -> f64 {
        self.inner.var
    }

    #[getter]
    pub fn count(&self) -> u64 {
        self.inner.count
    }
}

#[pyfunction]
pub fn is_boundary(distance: f64) -> bool {
    detector::is_boundary(distance)
}

/// Replay memory holding pairs of frames.
#[pyclass]
pub struct ReplayBuffer {
    inner: replay::ReplayBuffer,
}

#[pymethods]
impl ReplayBuffer {
    #[new]
    #[pyo3(signature = (capacity=replay::DEFAULT_CAPACITY, seed=0))]
    pub fn new(capacity: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: replay::ReplayBuffer::new(capacity, seed).map_err(err)? })
    }

    #[pyo3(signature = (frame0, frame1, distance, step, domain=String::new(), mode="stereo"))]
    pub fn maybe_store(&mut self, frame0: PyImage, frame1: PyImage, distance: f64, step: u64, domain: String, mode: &str) -> PyResult<bool> {
        let sample = ReplaySample { mode: self::mode(mode)?, frames: [image(frame0)?, image(frame1)?], source_domain: domain };
        Ok(self.inner.maybe_store(sample, distance, step))
    }

    /// `(frame0, frame1, domain)` of a uniformly drawn item.
    pub fn draw(&mut self) -> PyResult<(PyImage, PyImage, String)> {
        let s = self.inner.draw().map_err(err)?;
        Ok((py_image(&s.frames[0]), py_image(&s.frames[1]), s.source_domain.clone()))
    }

    /// `"online"` or `"replay"`.
    pub fn choose_source(&mut self) -> &'static str {
        match self.inner.choose_source() {
            Source::Online => "online",
            Source::Replay => "replay",
        }
    }

    /// Admission records `(id, step, distance, domain)`.
    pub fn entries(&self) -> Vec<(u64, u64, f64, String)> {
        self.inner.entries().iter().map(|e| (e.id, e.step, e.distance, e.sample.source_domain.clone())).collect()
    }

    pub fn dump(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.dump(&dir).map_err(err)
    }

    #[getter]
    pub fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn params(values: Vec<f32>) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("theta", Tensor::from_vec(values));
    p
}

/// `sum |theta_prev|·|theta - theta_prev|` and its gradient w.r.t. `theta`.
#[pyfunction]
pub fn reg_loss(theta: Vec<f32>, theta_prev: Vec<f32>) -> PyResult<(f32, Vec<f32>)> {
    let snap = regularizer::snapshot(&params(theta_prev));
    let p = params(theta);
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let r = regularizer::reg_loss(&mut tape, &vars, &snap).map_err(err)?;
    let g = tape.backward(r).map_err(err)?;
    Ok((tape.scalar(r), g.get(vars[0]).map(<[f32]>::to_vec).unwrap_or_default()))
}

/// `task + gamma·distance·reg`.
#[pyfunction]
#[pyo3(signature = (task, distance, reg, gamma=0.01))]
pub fn total_loss(task: f32, distance: f64, reg: f32, gamma: f64) -> PyResult<f32> {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::scalar(task));
    let r = tape.constant(Tensor::scalar(reg));
    let v = regularizer::total_loss(&mut tape, t, distance, r, gamma).map_err(err)?;
    Ok(tape.scalar(v))
}

/// Reconstruction of the right view and its validity mask.
#[pyfunction]
pub fn warp_stereo(left: PyImage, disparity: PyPlane) -> PyResult<(PyImage, PyPlane)> {
    let r = warp::warp_stereo(&image(left)?, &DisparityMap(plane(disparity)?)).map_err(err)?;
    Ok((py_image(&r.reconstructed), py_plane(&r.valid_mask)))
}

/// `camera` is `[fx, fy, cx, cy, rx, ry, rz, tx, ty, tz]`.
#[pyfunction]
pub fn warp_sfm(reference: PyImage, depth: PyPlane, camera: Vec<f32>) -> PyResult<(PyImage, PyPlane)> {
    let cam = CameraParams::from_array(&camera).map_err(err)?;
    let r = warp::warp_sfm(&image(reference)?, &DepthMap(plane(depth)?), &cam).map_err(err)?;
    Ok((py_image(&r.reconstructed), py_plane(&r.valid_mask)))
}

/// Weighted photometric + SSIM + smoothness loss of a reconstruction.
#[pyfunction]
#[pyo3(signature = (pred, target, disparity, image_for_disparity, mask, beta_p=0.15, beta_ss=0.85, beta_s=0.1))]
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    pred: PyImage,
    target: PyImage,
    disparity: PyPlane,
    image_for_disparity: PyImage,
    mask: PyPlane,
    beta_p: f32,
    beta_ss: f32,
    beta_s: f32,
) -> PyResult<f32> {
    losses::combined_loss_value(
        &image(pred)?,
        &image(target)?,
        &DisparityMap(plane(disparity)?),
        &image(image_for_disparity)?,
        &plane(mask)?,
        &LossWeights { beta_p, beta_ss, beta_s },
    )
    .map_err(err)
}

/// Depth metrics keyed by name; `align` is `"none"` or `"median"`.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask=None, align="none"))]
pub fn compute_metrics(pred: PyPlane, gt: PyPlane, mask: Option<PyPlane>, align: &str) -> PyResult<BTreeMap<&'static str, f64>> {
    let align = match align {
        "none" => Align::None,
        "median" => Align::Median,
        other => return Err(PyValueError::new_err(format!("unknown alignment `{other}`"))),
    };
    let mask = match mask {
        Some(m) => plane(m)?,
        None => Plane::filled(pred.0, pred.1, 1.0),
    };
    let m = ev::compute_metrics(&DepthMap(plane(pred)?), &DepthMap(plane(gt)?), &mask, align).map_err(err)?;
    Ok(ev::MetricSet::NAMES.into_iter().zip(m.values()).collect())
}

/// Run configuration; keys as in the config file format.
#[pyclass]
pub struct RunConfig {
    inner: runner::RunConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    pub fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => runner::RunConfig::parse(t).map_err(err)?,
            None => runner::RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: runner::RunConfig::load(&path).map_err(err)? })
    }

    pub fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        if self.inner.set(key, value).map_err(err)? {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("unknown config key `{key}`")))
        }
    }

    pub fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key `{key}`")))
    }

    pub fn manifest(&self) -> String {
        self.inner.manifest()
    }
}

/// Renders sample `index` of domain `domain` (position in the benchmark)
/// as a dict with `frames`, `depth`, `disparity`, `valid`, `camera`,
/// `domain` and `distribution`.
#[pyfunction]
#[pyo3(signature = (config, domain, index, mode=None))]
fn render(py: Python<'_>, config: &RunConfig, domain: usize, index: usize, mode: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg = &config.inner;
    let bench = worlds::make_benchmark(&cfg.benchmark(), cfg.world_seed).map_err(err)?;
    let spec = bench
        .domains
        .get(domain)
        .ok_or_else(|| PyValueError::new_err(format!("domain {domain} outside 0..{}", bench.domains.len())))?;
    let m = match mode {
        Some(s) => self::mode(s)?,
        None => cfg.mode,
    };
    let s = worlds::render(spec, m, index).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("frames", (py_image(&s.frames[0]), py_image(&s.frames[1])))?;
    d.set_item("depth", py_plane(s.truth.depth.plane()))?;
    d.set_item("disparity", s.truth.disparity.as_ref().map(|x| py_plane(x.plane())))?;
    d.set_item("valid", py_plane(&s.truth.valid))?;
    d.set_item("camera", s.truth.camera.map(|c| c.to_array().to_vec()))?;
    d.set_item("domain", s.domain)?;
    d.set_item("distribution", s.distribution)?;
    Ok(d.into_any().unbind())
}

/// Number of domains in the configured benchmark.
#[pyfunction]
pub fn domain_count(config: &RunConfig) -> PyResult<usize> {
    let cfg = &config.inner;
    Ok(worlds::make_benchmark(&cfg.benchmark(), cfg.world_seed).map_err(err)?.domains.len())
}

/// Applies `op` to `inputs` (each `(shape, data)`) and returns the output
/// `(shape, data)` with the gradients of the summed output per input.
#[pyfunction]
#[pyo3(signature = (op, inputs, stride=1, padding=0))]
#[allow(clippy::type_complexity)]
pub fn value_and_grad(op: &str, inputs: Vec<(Vec<usize>, Vec<f32>)>, stride: usize, padding: usize) -> PyResult<((Vec<usize>, Vec<f32>), Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(inputs.len());
    for (shape, data) in inputs {
        vars.push(tape.leaf(Tensor::new(shape, data).map_err(err)?));
    }
    let arity = |n: usize| -> PyResult<()> {
        if vars.len() == n {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("`{op}` takes {n} inputs, got {}", vars.len())))
        }
    };
    let out: Var = match op {
        "add" | "sub" | "mul" | "div" => {
            arity(2)?;
            let (a, b) = (vars[0], vars[1]);
            match op {
                "add" => tape.add(a, b),
                "sub" => tape.sub(a, b),
                "mul" => tape.mul(a, b),
                _ => tape.div(a, b),
            }
            .map_err(err)?
        }
        "conv2d" => {
            arity(2)?;
            tape.conv2d(vars[0], vars[1], stride, padding).map_err(err)?
        }
        "warp_stereo" => {
            arity(2)?;
            tape.warp_stereo(vars[0], vars[1]).map_err(err)?.0
        }
        "warp_sfm" => {
            arity(3)?;
            tape.warp_sfm(vars[0], vars[1], vars[2]).map_err(err)?.0
        }
        unary => {
            arity(1)?;
            let a = vars[0];
            match unary {
                "abs" => tape.abs(a),
                "exp" => tape.exp(a),
                "square" => tape.square(a),
                "sqrt" => tape.sqrt(a),
                "relu" => tape.activation(Activation::Relu, a),
                "elu" => tape.activation(Activation::Elu, a),
                "sigmoid" => tape.activation(Activation::Sigmoid, a),
                "softplus" => tape.activation(Activation::Softplus, a),
                "box_filter3" => tape.box_filter3(a).map_err(err)?,
                "sum" => tape.sum(a),
                "mean" => tape.mean(a),
                other => return Err(PyValueError::new_err(format!("unknown op `{other}`"))),
            }
        }
    };
    let value = (tape.shape(out).to_vec(), tape.value(out).to_vec());
    let total = tape.sum(out);
    let g = tape.backward(total).map_err(err)?;
    let grads = vars.iter().map(|&v| g.get(v).map(<[f32]>::to_vec).unwrap_or_default()).collect();
    Ok((value, grads))
}

#[pyfunction]
pub fn pretrain(config: &RunConfig, out: PathBuf) -> PyResult<Vec<f64>> {
    Ok(runner::pretrain(&config.inner, &out).map_err(err)?.losses)
}

/// Returns `(steps, completed)`.
#[pyfunction]
pub fn online(config: &RunConfig, out: PathBuf) -> PyResult<(usize, bool)> {
    let o = runner::online(&config.inner, &out).map_err(err)?;
    Ok((o.steps, o.completed))
}

/// Writes `eval.csv` and `eval_domains.csv`; returns cross-distribution
/// metrics keyed by name.
#[pyfunction]
pub fn evaluate(config: &RunConfig, state_dir: PathBuf, out: PathBuf) -> PyResult<BTreeMap<&'static str, f64>> {
    let row = runner::evaluate(&config.inner, &state_dir, &out).map_err(err)?;
    let m = row.cross_dist.ok_or_else(|| PyRuntimeError::new_err("no cross-distribution evaluation set"))?;
    Ok(ev::MetricSet::NAMES.into_iter().zip(m.values()).collect())
}

#[pyfunction]
pub fn report(runs: Vec<PathBuf>, out: PathBuf) -> PyResult<usize> {
    Ok(runner::report(&runs, &out).map_err(err)?.len())
}

#[pymodule]
fn lifelong_depth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LossStats>()?;
    m.add_class::<ReplayBuffer>()?;
    m.add_class::<RunConfig>()?;
    m.add_function(wrap_pyfunction!(is_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(reg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(warp_stereo, m)?)?;
    m.add_function(wrap_pyfunction!(warp_sfm, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(domain_count, m)?)?;
    m.add_function(wrap_pyfunction!(value_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(online, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
