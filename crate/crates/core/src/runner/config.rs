//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::image::Mode;
use crate::losses::LossWeights;
use crate::replay::DEFAULT_CAPACITY;
use crate::tensor::AdamConfig;
use crate::worlds::BenchmarkConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    FineTune,
    RegOnly,
    ReplayOnly,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FineTune, Method::RegOnly, Method::ReplayOnly, Method::Proposed];

    pub fn key(self) -> &'static str {
        match self {
            Method::FineTune => "ft",
            Method::RegOnly => "reg",
            Method::ReplayOnly => "rep",
            Method::Proposed => "prop",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::FineTune => "FT",
            Method::RegOnly => "Reg.",
            Method::ReplayOnly => "Rep.",
            Method::Proposed => "Prop.",
        }
    }

    pub fn regularizes(self) -> bool {
        matches!(self, Method::RegOnly | Method::Proposed)
    }

    pub fn replays(self) -> bool {
        matches!(self, Method::ReplayOnly | Method::Proposed)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" | "fine_tune" => Ok(Method::FineTune),
            "reg" | "reg_only" => Ok(Method::RegOnly),
            "rep" | "replay_only" => Ok(Method::ReplayOnly),
            "prop" | "proposed" => Ok(Method::Proposed),
            _ => Err(Error::Config(format!("unknown method `{s}` (expected ft, reg, rep or prop)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub method: Method,
    pub seed: u64,
    pub world_seed: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch: usize,
    pub alpha_l: f64,
    pub gamma: f64,
    pub beta_p: f32,
    pub beta_ss: f32,
    pub beta_s: f32,
    pub height: usize,
    pub width: usize,
    pub frames_per_domain: usize,
    pub domains_per_distribution: usize,
    pub eval_fraction: f64,
    pub online_distributions: Vec<String>,
    pub replay_capacity: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub pretrain_epochs: usize,
    pub pretrain_admission: bool,
    pub replay_regularize: bool,
    pub detector_warmup: u64,
    pub var_init: f64,
    pub var_floor: f64,
    pub pretrain_dir: Option<PathBuf>,
    /// Stop after this many online steps (for interruption tests).
    pub stop_after: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Stereo,
            method: Method::Proposed,
            seed: 0,
            world_seed: 1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch: 1,
            alpha_l: 0.1,
            gamma: 1e-2,
            beta_p: 0.15,
            beta_ss: 0.85,
            beta_s: 0.1,
            height: 48,
            width: 64,
            frames_per_domain: 600,
            domains_per_distribution: 6,
            eval_fraction: 0.1,
            online_distributions: vec!["B".to_string()],
            replay_capacity: DEFAULT_CAPACITY,
            eval_every: 200,
            checkpoint_every: 500,
            pretrain_epochs: 2,
            pretrain_admission: true,
            replay_regularize: true,
            detector_warmup: 10,
            var_init: 1e-4,
            var_floor: 1e-8,
            pretrain_dir: None,
            stop_after: None,
        }
    }
}

/// Values that differ from the published setup, with the published value.
const PUBLISHED: [(&str, &str); 2] = [("height", "256"), ("width", "320")];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut unknown = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match cfg.set(k, v) {
                Ok(true) => {}
                Ok(false) => unknown.push(k.to_string()),
                Err(e) => return Err(Error::Config(format!("line {}: {e}", n + 1))),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key; `Ok(false)` if the key is unknown.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "mode" => self.mode = value.parse().map_err(|_| Error::Config(format!("invalid mode `{value}`")))?,
            "method" => self.method = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            "world_seed" => self.world_seed = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "alpha_l" => self.alpha_l = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "beta_p" => self.beta_p = p(key, value)?,
            "beta_ss" => self.beta_ss = p(key, value)?,
            "beta_s" => self.beta_s = p(key, value)?,
            "height" => self.height = p(key, value)?,
            "width" => self.width = p(key, value)?,
            "frames_per_domain" => self.frames_per_domain = p(key, value)?,
            "domains_per_distribution" => self.domains_per_distribution = p(key, value)?,
            "eval_fraction" => self.eval_fraction = p(key, value)?,
            "online_distributions" => {
                self.online_distributions = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "replay_capacity" => self.replay_capacity = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = p(key, value)?,
            "pretrain_admission" => self.pretrain_admission = p(key, value)?,
            "replay_regularize" => self.replay_regularize = p(key, value)?,
            "detector_warmup" => self.detector_warmup = p(key, value)?,
            "var_init" => self.var_init = p(key, value)?,
            "var_floor" => self.var_floor = p(key, value)?,
            "pretrain_dir" => self.pretrain_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "stop_after" => self.stop_after = if value.is_empty() { None } else { Some(p(key, value)?) },
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch != 1 {
            bad.push("batch must be 1");
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            bad.push("height and width must be positive multiples of 8");
        }
        if !(self.lr >= 0.0) || !(self.gamma >= 0.0) || !(self.alpha_l > 0.0 && self.alpha_l <= 1.0) {
            bad.push("lr and gamma must be non-negative and alpha_l in (0, 1]");
        }
        if self.replay_capacity == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            bad.push("replay_capacity, eval_every and checkpoint_every must be positive");
        }
        if !(self.var_floor > 0.0) {
            bad.push("var_floor must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Regularization weight after applying the method's switches.
    pub fn effective_gamma(&self) -> f64 {
        if self.method.regularizes() {
            self.gamma
        } else {
            0.0
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { beta_p: self.beta_p, beta_ss: self.beta_ss, beta_s: self.beta_s }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig { alpha: self.alpha_l, warmup: self.detector_warmup, var_init: self.var_init, var_floor: self.var_floor }
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            height: self.height,
            width: self.width,
            frames_per_domain: self.frames_per_domain,
            domains_per_distribution: self.domains_per_distribution,
            eval_fraction: self.eval_fraction,
            online_distributions: self.online_distributions.clone(),
        }
    }

    /// Every key with its value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("method", self.method.to_string()),
            ("seed", self.seed.to_string()),
            ("world_seed", self.world_seed.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("batch", self.batch.to_string()),
            ("alpha_l", self.alpha_l.to_string()),
            ("gamma", self.gamma.to_string()),
            ("beta_p", self.beta_p.to_string()),
            ("beta_ss", self.beta_ss.to_string()),
            ("beta_s", self.beta_s.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("frames_per_domain", self.frames_per_domain.to_string()),
            ("domains_per_distribution", self.domains_per_distribution.to_string()),
            ("eval_fraction", self.eval_fraction.to_string()),
            ("online_distributions", self.online_distributions.join(",")),
            ("replay_capacity", self.replay_capacity.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_admission", self.pretrain_admission.to_string()),
            ("replay_regularize", self.replay_regularize.to_string()),
            ("detector_warmup", self.detector_warmup.to_string()),
            ("var_init", self.var_init.to_string()),
            ("var_floor", self.var_floor.to_string()),
            ("pretrain_dir", self.pretrain_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("stop_after", self.stop_after.map(|s| s.to_string()).unwrap_or_default()),
        ]
    }

    /// Config echo for results directories. Values that differ from the
    /// defaults or from the published setup are annotated.
    pub fn manifest(&self) -> String {
        let defaults = RunConfig::default().entries();
        let mut out = String::new();
        for ((k, v), (_, d)) in self.entries().into_iter().zip(defaults) {
            out.push_str(&format!("{k} = {v}"));
            if let Some((_, published)) = PUBLISHED.iter().find(|(pk, _)| *pk == k) {
                out.push_str(&format!("  # deviation: published value {published}"));
            } else if v != d && !matches!(k, "mode" | "method" | "seed" | "pretrain_dir" | "stop_after") {
                out.push_str(&format!("  # deviation: default {d}"));
            }
            out.push('\n');
        }
        out
    }
}
