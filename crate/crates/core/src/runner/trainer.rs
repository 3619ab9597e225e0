//! One optimization step: source choice, task loss, boundary detection,
//! importance-weighted regularization, Adam, and replay admission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::detector::{is_boundary, LossStats};
use crate::error::{Error, Result};
use crate::image::{Image, Mode};
use crate::losses::{combined_loss, LossWeights};
use crate::models::{DisparityNet, PoseNet};
use crate::regularizer::{reg_loss, snapshot, total_loss, ImportanceSnapshot};
use crate::replay::{Entry, ReplayBuffer, ReplaySample, RngState, Source};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Adam, AdamConfig, ParamSet, Tape, Tensor, Var};

use super::config::RunConfig;

/// Switches that distinguish the methods and phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPolicy {
    pub gamma: f64,
    /// Draw from the buffer with probability one half.
    pub replay: bool,
    /// Store online samples whose distance exceeds one.
    pub admit: bool,
    /// Replay steps also pay the penalty, weighted by the last online distance.
    pub replay_regularize: bool,
}

/// Trace of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub source: Source,
    pub domain: String,
    pub loss: f64,
    pub reg: f64,
    pub total: f64,
    pub mu: f64,
    pub var: f64,
    pub distance: f64,
    pub boundary: bool,
    pub stored: bool,
    pub buffer_len: usize,
}

pub const TRACE_HEADER: [&str; 12] =
    ["step", "source", "domain", "loss", "reg", "total", "mu", "var", "distance", "boundary", "stored", "buffer"];

impl StepRecord {
    pub fn csv_fields(&self) -> [String; 12] {
        [
            self.step.to_string(),
            match self.source {
                Source::Online => "online".into(),
                Source::Replay => "replay".into(),
            },
            self.domain.clone(),
            self.loss.to_string(),
            self.reg.to_string(),
            self.total.to_string(),
            self.mu.to_string(),
            self.var.to_string(),
            self.distance.to_string(),
            (self.boundary as u8).to_string(),
            (self.stored as u8).to_string(),
            self.buffer_len.to_string(),
        ]
    }
}

/// Self-supervised loss of one input pair, averaged over both warping
/// directions in SfM mode.
pub fn task_loss(
    tape: &mut Tape,
    disp: &DisparityNet,
    disp_vars: &[Var],
    pose: Option<(&PoseNet, &[Var])>,
    sample: &ReplaySample,
    weights: &LossWeights,
) -> Result<Var> {
    let a = sample.frames[0].to_tensor();
    let b = sample.frames[1].to_tensor();
    match sample.mode {
        Mode::Stereo => {
            let left = tape.constant(a.clone());
            let right = tape.constant(b);
            let d = disp.forward(tape, disp_vars, left)?;
            let (recon, mask) = tape.warp_stereo(left, d)?;
            let mask = nonempty(mask);
            Ok(combined_loss(tape, recon, right, d, &a, &mask, weights)?.total)
        }
        Mode::Sfm => {
            let (pose, pose_vars) = pose.ok_or_else(|| Error::invalid("SfM loss needs a pose network"))?;
            let ta = tape.constant(a.clone());
            let tb = tape.constant(b.clone());
            let fwd = sfm_direction(tape, disp, disp_vars, pose, pose_vars, (ta, &a), tb, weights)?;
            let bwd = sfm_direction(tape, disp, disp_vars, pose, pose_vars, (tb, &b), ta, weights)?;
            let sum = tape.add(fwd, bwd)?;
            Ok(tape.scale(sum, 0.5))
        }
    }
}

/// Reconstructs `target` from `reference` through the target's depth.
#[allow(clippy::too_many_arguments)]
fn sfm_direction(
    tape: &mut Tape,
    disp: &DisparityNet,
    disp_vars: &[Var],
    pose: &PoseNet,
    pose_vars: &[Var],
    target: (Var, &Tensor),
    reference: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let d = disp.forward(tape, disp_vars, target.0)?;
    let ones = tape.constant(Tensor::full(tape.shape(d), 1.0));
    let depth = tape.div(ones, d)?;
    let cam = pose.forward(tape, pose_vars, target.0, reference)?;
    let (recon, mask) = tape.warp_sfm(reference, depth, cam)?;
    let mask = nonempty(mask);
    Ok(combined_loss(tape, recon, target.0, d, target.1, &mask, weights)?.total)
}

/// Falls back to the full image when no pixel projects inside the source.
fn nonempty(mut mask: Vec<f32>) -> Vec<f32> {
    if mask.iter().all(|&m| m == 0.0) {
        mask.fill(1.0);
    }
    mask
}

pub struct Trainer {
    pub mode: Mode,
    pub disp: DisparityNet,
    pub pose: PoseNet,
    pub disp_adam: Adam,
    pub pose_adam: Adam,
    disp_snap: ImportanceSnapshot,
    pose_snap: ImportanceSnapshot,
    pub stats: LossStats,
    pub buffer: ReplayBuffer,
    pub policy: StepPolicy,
    pub weights: LossWeights,
    /// Distance of the most recent online step.
    pub last_distance: f64,
    /// Steps taken so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, disp: DisparityNet, pose: PoseNet, policy: StepPolicy, buffer: ReplayBuffer) -> Self {
        let adam = cfg.adam();
        Self {
            mode: cfg.mode,
            disp_adam: Adam::new(adam, &disp.params),
            pose_adam: Adam::new(adam, &pose.params),
            disp_snap: snapshot(&disp.params),
            pose_snap: snapshot(&pose.params),
            disp,
            pose,
            stats: LossStats::new(cfg.detector()),
            buffer,
            policy,
            weights: cfg.loss_weights(),
            last_distance: 0.0,
            step: 0,
        }
    }

    fn trains_pose(&self) -> bool {
        self.mode == Mode::Sfm
    }

    /// Task loss of `sample` under the current weights, without training.
    pub fn evaluate_loss(&self, sample: &ReplaySample) -> Result<f64> {
        let mut tape = Tape::new();
        let dv = self.disp.params.register(&mut tape);
        let pv = self.pose.params.register(&mut tape);
        let pose = self.trains_pose().then_some((&self.pose, pv.as_slice()));
        let l = task_loss(&mut tape, &self.disp, &dv, pose, sample, &self.weights)?;
        Ok(tape.scalar(l) as f64)
    }

    /// One step with `online` as the stream's current sample. The stream
    /// advances whether or not the step trains on it.
    pub fn step(&mut self, online: &ReplaySample) -> Result<StepRecord> {
        if online.mode != self.mode {
            return Err(Error::invalid(format!("{} sample fed to a {} trainer", online.mode, self.mode)));
        }
        let source = if self.policy.replay { self.buffer.choose_source() } else { Source::Online };
        let replayed;
        let sample = match source {
            Source::Online => online,
            Source::Replay => {
                replayed = self.buffer.draw()?.clone();
                &replayed
            }
        };

        let mut tape = Tape::new();
        let dv = self.disp.params.register(&mut tape);
        let pv = if self.trains_pose() { self.pose.params.register(&mut tape) } else { Vec::new() };
        let pose = self.trains_pose().then_some((&self.pose, pv.as_slice()));
        let task = task_loss(&mut tape, &self.disp, &dv, pose, sample, &self.weights)?;
        let loss = tape.scalar(task) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("task loss {loss} at step {}", self.step)));
        }

        let distance = match source {
            Source::Online => {
                let d = self.stats.mahalanobis(loss);
                self.stats.update(loss)?;
                self.last_distance = d;
                d
            }
            Source::Replay => self.last_distance,
        };
        let weight_distance = match source {
            Source::Replay if !self.policy.replay_regularize => 0.0,
            _ => distance,
        };
        let mut reg_value = 0.0;
        let total = if self.policy.gamma * weight_distance > 0.0 {
            let mut reg = reg_loss(&mut tape, &dv, &self.disp_snap)?;
            if self.trains_pose() {
                let r = reg_loss(&mut tape, &pv, &self.pose_snap)?;
                reg = tape.add(reg, r)?;
            }
            reg_value = tape.scalar(reg) as f64;
            total_loss(&mut tape, task, weight_distance, reg, self.policy.gamma)?
        } else {
            task
        };
        let total_value = tape.scalar(total) as f64;

        let grads = tape.backward(total)?;
        self.disp.params.absorb_grads(&dv, &grads)?;
        // The anchor for the next step is this step's pre-update value.
        self.disp_snap.refresh(&self.disp.params)?;
        self.disp_adam.step(&mut self.disp.params)?;
        if self.trains_pose() {
            self.pose.params.absorb_grads(&pv, &grads)?;
            self.pose_snap.refresh(&self.pose.params)?;
            self.pose_adam.step(&mut self.pose.params)?;
        }

        let stored = source == Source::Online
            && self.policy.admit
            && self.buffer.maybe_store(online.clone(), distance, self.step);
        let record = StepRecord {
            step: self.step,
            source,
            domain: sample.source_domain.clone(),
            loss,
            reg: reg_value,
            total: total_value,
            mu: self.stats.mu,
            var: self.stats.var,
            distance,
            boundary: source == Source::Online && is_boundary(distance),
            stored,
            buffer_len: self.buffer.len(),
        };
        self.step += 1;
        Ok(record)
    }

    /// Starts a new phase from the current weights: fresh loss statistics,
    /// step counter and regularization anchors. Optimizer moments carry over.
    pub fn begin_phase(&mut self, cfg: &RunConfig, policy: StepPolicy) -> Result<()> {
        self.stats = LossStats::new(cfg.detector());
        self.step = 0;
        self.last_distance = 0.0;
        self.policy = policy;
        self.disp_snap = snapshot(&self.disp.params);
        self.pose_snap = snapshot(&self.pose.params);
        self.disp_adam = with_config(&self.disp_adam, cfg.adam())?;
        self.pose_adam = with_config(&self.pose_adam, cfg.adam())?;
        if !policy.replay && !policy.admit {
            self.buffer = ReplayBuffer::new(self.buffer.capacity(), 0)?;
        }
        Ok(())
    }

    /// Writes the complete training state to `dir` (`state.bin`, `state.txt`).
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut ck = Checkpoint::new();
        ck.add_params("disp.", &self.disp.params);
        ck.add_params("pose.", &self.pose.params);
        ck.add_optimizer("disp", &self.disp_adam);
        ck.add_optimizer("pose", &self.pose_adam);
        add_snapshot(&mut ck, "snap.disp.", &self.disp_snap);
        add_snapshot(&mut ck, "snap.pose.", &self.pose_snap);
        let mut text = String::new();
        let mut kv = |k: &str, v: String| text.push_str(&format!("{k} = {v}\n"));
        kv("mode", self.mode.to_string());
        kv("step", self.step.to_string());
        kv("mu", self.stats.mu.to_string());
        kv("var", self.stats.var.to_string());
        kv("count", self.stats.count.to_string());
        kv("last_distance", self.last_distance.to_string());
        write_buffer(&mut ck, &mut text, &self.buffer);
        ck.save(&dir.join("state.bin"))?;
        fs::write(dir.join("state.txt"), text)?;
        Ok(())
    }

    /// Restores everything written by [`Trainer::save_state`] into a trainer
    /// built with the same configuration.
    pub fn load_state(&mut self, dir: &Path) -> Result<()> {
        let ck = Checkpoint::load(&dir.join("state.bin"))?;
        let kv = parse_kv(&fs::read_to_string(dir.join("state.txt"))?)?;
        let mode: Mode = get(&kv, "mode")?;
        if mode != self.mode {
            return Err(Error::Config(format!("state was saved in {mode} mode, run is {}", self.mode)));
        }
        ck.load_params("disp.", &mut self.disp.params)?;
        ck.load_params("pose.", &mut self.pose.params)?;
        self.disp_adam = optimizer(&ck, "disp", &self.disp.params)?;
        self.pose_adam = optimizer(&ck, "pose", &self.pose.params)?;
        self.disp_snap = load_snapshot(&ck, "snap.disp.", &self.disp.params)?;
        self.pose_snap = load_snapshot(&ck, "snap.pose.", &self.pose.params)?;
        self.step = get(&kv, "step")?;
        self.stats.mu = get(&kv, "mu")?;
        self.stats.var = get(&kv, "var")?;
        self.stats.count = get(&kv, "count")?;
        self.last_distance = get(&kv, "last_distance")?;
        self.buffer = read_buffer(&ck, &kv, self.buffer.capacity())?;
        Ok(())
    }
}

fn add_snapshot(ck: &mut Checkpoint, prefix: &str, snap: &ImportanceSnapshot) {
    for (name, v) in snap.names().iter().zip(snap.theta_prev()) {
        ck.add_tensor(format!("{prefix}{name}"), Tensor::from_vec(v.clone()));
    }
}

fn load_snapshot(ck: &Checkpoint, prefix: &str, like: &ParamSet) -> Result<ImportanceSnapshot> {
    let mut p = like.clone();
    for (name, t) in p.iter_mut() {
        let key = format!("{prefix}{name}");
        let src = ck.tensor(&key).ok_or_else(|| Error::Format(format!("state lacks `{key}`")))?;
        if src.numel() != t.numel() {
            return Err(Error::Format(format!("state `{key}` has {} values, expected {}", src.numel(), t.numel())));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(snapshot(&p))
}

fn optimizer(ck: &Checkpoint, name: &str, params: &ParamSet) -> Result<Adam> {
    let adam = ck.optimizer(name).ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer `{name}`")))?;
    let expected: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    if adam.names().iter().map(String::as_str).ne(expected) {
        return Err(Error::Format(format!("optimizer `{name}` does not match the network layout")));
    }
    Ok(adam.clone())
}

/// Replaces the optimizers' hyperparameters while keeping their moments.
pub fn with_config(adam: &Adam, config: AdamConfig) -> Result<Adam> {
    Adam::from_parts(
        config,
        adam.step_count(),
        adam.names().to_vec(),
        adam.first_moment().to_vec(),
        adam.second_moment().to_vec(),
    )
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad seed hex `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Buffer images go into the checkpoint, records into the text state.
pub(crate) fn write_buffer(ck: &mut Checkpoint, text: &mut String, buffer: &ReplayBuffer) {
    let rng = buffer.rng_state();
    text.push_str(&format!("replay_capacity = {}\n", buffer.capacity()));
    text.push_str(&format!("replay_next_id = {}\n", buffer.next_id()));
    text.push_str(&format!("replay_seed = {}\n", hex(&rng.seed)));
    text.push_str(&format!("replay_stream = {}\n", rng.stream));
    text.push_str(&format!("replay_word_pos = {}\n", rng.word_pos));
    text.push_str(&format!("replay_len = {}\n", buffer.len()));
    for (k, e) in buffer.entries().iter().enumerate() {
        text.push_str(&format!(
            "replay.{k} = {} {} {} {} {}\n",
            e.id, e.step, e.distance, e.sample.mode, e.sample.source_domain
        ));
        for (j, f) in e.sample.frames.iter().enumerate() {
            ck.add_tensor(format!("replay.{k}.{j}"), f.to_tensor());
        }
    }
}

pub(crate) fn read_buffer(ck: &Checkpoint, kv: &BTreeMap<String, String>, capacity: usize) -> Result<ReplayBuffer> {
    let saved_capacity: usize = get(kv, "replay_capacity")?;
    if saved_capacity != capacity {
        return Err(Error::Config(format!("saved replay capacity {saved_capacity} differs from configured {capacity}")));
    }
    let len: usize = get(kv, "replay_len")?;
    let mut items = Vec::with_capacity(len);
    for k in 0..len {
        let key = format!("replay.{k}");
        let rec = kv.get(&key).ok_or_else(|| Error::Format(format!("state lacks `{key}`")))?;
        let f: Vec<&str> = rec.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("bad replay record `{rec}`")));
        }
        let num = |s: &str| Error::Format(format!("bad replay field `{s}`"));
        let frame = |j: usize| -> Result<Image> {
            let t = ck.tensor(&format!("{key}.{j}")).ok_or_else(|| Error::Format(format!("state lacks `{key}.{j}`")))?;
            Image::from_tensor(t)
        };
        items.push(Entry {
            id: f[0].parse().map_err(|_| num(f[0]))?,
            step: f[1].parse().map_err(|_| num(f[1]))?,
            distance: f[2].parse().map_err(|_| num(f[2]))?,
            sample: ReplaySample { mode: f[3].parse()?, frames: [frame(0)?, frame(1)?], source_domain: f[4].to_string() },
        });
    }
    let state = RngState {
        seed: unhex(kv.get("replay_seed").map(String::as_str).unwrap_or(""))?,
        stream: get(kv, "replay_stream")?,
        word_pos: get(kv, "replay_word_pos")?,
    };
    ReplayBuffer::restore(capacity, items, get(kv, "replay_next_id")?, state)
}

pub(crate) fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad state line `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub(crate) fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = kv.get(key).ok_or_else(|| Error::Format(format!("state lacks `{key}`")))?;
    v.parse().map_err(|_| Error::Format(format!("bad value `{v}` for `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_default_nets;
    use crate::worlds::{make_benchmark, render, BenchmarkConfig};

    fn setup(mode: Mode, policy: StepPolicy) -> (Trainer, Vec<ReplaySample>) {
        let cfg = RunConfig { mode, height: 16, width: 24, lr: 1e-3, ..RunConfig::default() };
        let bc = BenchmarkConfig { height: 16, width: 24, frames_per_domain: 30, ..BenchmarkConfig::default() };
        let bench = make_benchmark(&bc, 3).unwrap();
        let samples = (0..12).map(|i| render(&bench.domains[i % 12], mode, i).unwrap().input()).collect();
        let (d, p) = build_default_nets(16, 24, 9).unwrap();
        (Trainer::new(&cfg, d, p, policy, ReplayBuffer::new(8, 4).unwrap()), samples)
    }

    const PROP: StepPolicy = StepPolicy { gamma: 1e-2, replay: true, admit: true, replay_regularize: true };

    #[test]
    fn replay_only_after_admission() {
        let (mut t, s) = setup(Mode::Stereo, PROP);
        for (i, x) in s.iter().enumerate() {
            let r = t.step(x).unwrap();
            assert_eq!(r.step, i as u64);
            if t.buffer.is_empty() {
                assert_eq!(r.source, Source::Online);
            }
            if r.stored {
                assert!(r.distance > 1.0 && r.source == Source::Online);
            }
            if r.source == Source::Replay {
                assert!(!r.stored && !r.boundary);
            }
        }
        assert!(t.buffer.entries().iter().all(|e| e.distance > 1.0));
    }

    #[test]
    fn fine_tune_never_touches_buffer() {
        let policy = StepPolicy { gamma: 0.0, replay: false, admit: false, replay_regularize: true };
        let (mut t, s) = setup(Mode::Stereo, policy);
        for x in &s {
            let r = t.step(x).unwrap();
            assert_eq!((r.source, r.stored, r.reg), (Source::Online, false, 0.0));
        }
        assert!(t.buffer.is_empty());
    }

    #[test]
    fn sfm_trains_pose() {
        let (mut t, s) = setup(Mode::Sfm, PROP);
        let before = t.pose.params.clone();
        for x in &s[..3] {
            t.step(x).unwrap();
        }
        let moved = t.pose.params.iter().zip(before.iter()).any(|((_, a), (_, b))| a.data() != b.data());
        assert!(moved);
        assert!(t.step(&setup(Mode::Stereo, PROP).1[0]).is_err());
    }

    #[test]
    fn save_and_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (mut a, s) = setup(Mode::Stereo, PROP);
        for x in &s[..6] {
            a.step(x).unwrap();
        }
        a.save_state(dir.path()).unwrap();
        let (mut b, _) = setup(Mode::Stereo, PROP);
        b.load_state(dir.path()).unwrap();
        for x in &s[6..] {
            let ra = a.step(x).unwrap();
            let rb = b.step(x).unwrap();
            assert_eq!(ra, rb);
        }
        for ((_, x), (_, y)) in a.disp.params.iter().zip(b.disp.params.iter()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.buffer.entries(), b.buffer.entries());
    }
}
