use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DomainSpec, Haze, MotionProfile, TextureStats};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub height: usize,
    pub width: usize,
    pub frames_per_domain: usize,
    pub domains_per_distribution: usize,
    pub eval_fraction: f64,
    /// Distributions whose held-back domains form the online stream.
    pub online_distributions: Vec<String>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 64,
            frames_per_domain: 600,
            domains_per_distribution: 6,
            eval_fraction: 0.1,
            online_distributions: vec!["B".to_string()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Online,
}

/// `count` consecutive samples of domain `domain` starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub domain: usize,
    pub start: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamPlan {
    pub phase: Phase,
    pub blocks: Vec<Block>,
}

impl StreamPlan {
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(domain, sample index)` at position `step` of the stream.
    pub fn locate(&self, step: usize) -> Option<(usize, usize)> {
        let mut rest = step;
        for b in &self.blocks {
            if rest < b.count {
                return Some((b.domain, b.start + rest));
            }
            rest -= b.count;
        }
        None
    }

    /// Every `(domain, sample index)` in order.
    pub fn items(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().flat_map(|b| (b.start..b.start + b.count).map(move |i| (b.domain, i))).collect()
    }

    /// Stream positions at which a new block begins.
    pub fn transitions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut at = 0;
        for b in &self.blocks {
            out.push(at);
            at += b.count;
        }
        out
    }
}

/// Held-out samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub domain: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub domains: Vec<DomainSpec>,
    pub pretrain: StreamPlan,
    pub online: StreamPlan,
    pub eval: Vec<EvalSet>,
}

impl Benchmark {
    pub fn domain_index(&self, id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.id == id)
    }

    pub fn distributions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in &self.domains {
            if !out.contains(&d.distribution) {
                out.push(d.distribution.clone());
            }
        }
        out
    }
}

struct Family {
    name: &'static str,
    depth_range: (f32, f32),
    background: (f32, f32),
    texture: TextureStats,
    haze: Haze,
    /// Translation amplitude per axis, in units of the near depth.
    sweep: [f32; 3],
}

fn families() -> [Family; 2] {
    [
        Family {
            name: "A",
            depth_range: (2.0, 6.5),
            background: (7.0, 8.0),
            texture: TextureStats { freq_band: (0.06, 0.16), contrast: 0.35, palette: [0.6, 0.45, 0.35] },
            haze: Haze { color: [0.55, 0.5, 0.45], distance: 12.0 },
            sweep: [0.4, 0.15, 0.025],
        },
        Family {
            name: "B",
            depth_range: (10.0, 50.0),
            background: (70.0, 80.0),
            texture: TextureStats { freq_band: (0.02, 0.06), contrast: 0.25, palette: [0.35, 0.5, 0.4] },
            haze: Haze { color: [0.7, 0.8, 0.95], distance: 60.0 },
            sweep: [0.4, 0.15, 0.025],
        },
    ]
}

/// Two distributions of `domains_per_distribution` domains each. The first
/// half of each distribution's domains feeds pretraining; the second half of
/// the online distributions forms the online stream, one contiguous block
/// per domain. The last `eval_fraction` of every domain is held out, with a
/// one-sample gap so that sequence pairs never share a frame with training.
pub fn make_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    let n = config.domains_per_distribution;
    if n < 2 || config.frames_per_domain < 4 {
        return Err(Error::invalid("benchmark needs at least 2 domains per distribution and 4 frames per domain"));
    }
    if !(0.0..1.0).contains(&config.eval_fraction) {
        return Err(Error::invalid(format!("eval fraction {} outside [0, 1)", config.eval_fraction)));
    }
    let frames = config.frames_per_domain;
    let eval_count = ((frames as f64 * config.eval_fraction).ceil() as usize).max(1);
    if eval_count + 2 > frames {
        return Err(Error::invalid("eval fraction leaves no training frames"));
    }
    let train_count = frames - eval_count - 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut domains = Vec::new();
    for fam in families() {
        for k in 0..n {
            let near = fam.depth_range.0;
            let period = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| rng.gen_range(lo..hi);
            let motion = MotionProfile {
                amplitude: std::array::from_fn(|i| fam.sweep[i] * near * rng.gen_range(0.8..1.2)),
                period: [period(&mut rng, 50.0, 90.0), period(&mut rng, 70.0, 110.0), period(&mut rng, 80.0, 120.0)],
                roll_amplitude: rng.gen_range(0.02..0.05),
                roll_period: period(&mut rng, 100.0, 160.0),
            };
            let mut texture = fam.texture;
            for c in &mut texture.palette {
                *c = (*c + rng.gen_range(-0.1..0.1)).clamp(0.1, 0.9);
            }
            domains.push(DomainSpec {
                id: format!("{}{k}", fam.name),
                distribution: fam.name.to_string(),
                seed: rng.gen(),
                height: config.height,
                width: config.width,
                focal_baseline: 0.5 * config.width as f32,
                depth_range: fam.depth_range,
                background_depth: rng.gen_range(fam.background.0..=fam.background.1),
                layers: rng.gen_range(3..=6),
                texture,
                haze: fam.haze,
                motion,
                frames,
            });
        }
    }
    for d in &domains {
        d.validate()?;
    }

    let half = n / 2;
    let mut pretrain = Vec::new();
    let mut online = Vec::new();
    for (i, d) in domains.iter().enumerate() {
        let block = Block { domain: i, start: 0, count: train_count };
        if i % n < half {
            pretrain.push(block);
        } else if config.online_distributions.contains(&d.distribution) {
            online.push(block);
        }
    }
    if online.is_empty() {
        return Err(Error::invalid(format!(
            "online distributions {:?} match no domain",
            config.online_distributions
        )));
    }
    let eval = (0..domains.len())
        .map(|domain| EvalSet { domain, indices: (frames - eval_count..frames).collect() })
        .collect();
    Ok(Benchmark {
        config: config.clone(),
        domains,
        pretrain: StreamPlan { phase: Phase::Pretrain, blocks: pretrain },
        online: StreamPlan { phase: Phase::Online, blocks: online },
        eval,
    })
}
