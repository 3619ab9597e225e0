//! The four run phases behind the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Method, RunConfig};
use super::tables::{self, CATEGORIES, DOMAIN_HEADER};
use super::trainer::{get, parse_kv, StepPolicy, StepRecord, Trainer, TRACE_HEADER};
use crate::error::{Error, Result};
use crate::eval::{normalize_curves, Evaluator, MetricSet, ProtocolReport, ProtocolRow};
use crate::models::build_default_nets;
use crate::replay::{ReplayBuffer, ReplaySample};
use crate::tensor::checkpoint::Checkpoint;
use crate::worlds::{make_benchmark, render, Benchmark};

const INIT_STREAM: u64 = 0x11;
const SHUFFLE_STREAM: u64 = 0x22;
const REPLAY_STREAM: u64 = 0x33;

/// Independent seed for one concern of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    make_benchmark(&cfg.benchmark(), cfg.world_seed)
}

fn new_trainer(cfg: &RunConfig, policy: StepPolicy) -> Result<Trainer> {
    let (disp, pose) = build_default_nets(cfg.height, cfg.width, derive_seed(cfg.seed, INIT_STREAM))?;
    let buffer = ReplayBuffer::new(cfg.replay_capacity, derive_seed(cfg.seed, REPLAY_STREAM))?;
    Ok(Trainer::new(cfg, disp, pose, policy, buffer))
}

fn write_manifest(dir: &Path, phase: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.txt"), format!("phase = {phase}\n{}", cfg.manifest()))?;
    Ok(())
}

fn trace_rows(records: &[StepRecord]) -> impl Iterator<Item = [String; 12]> + '_ {
    records.iter().map(StepRecord::csv_fields)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub losses: Vec<f64>,
    pub stored: usize,
}

/// Shuffled multi-epoch training over the pretraining domains. Writes
/// `manifest.txt`, `networks.txt`, `trace.csv`, the state (`state.bin`,
/// `state.txt`) and the replay buffer dump (`buffer/`) to `out`.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainOutcome> {
    let bench = benchmark(cfg)?;
    write_manifest(out, "pretrain", cfg)?;
    let policy = StepPolicy { gamma: 0.0, replay: false, admit: cfg.pretrain_admission, replay_regularize: false };
    let mut trainer = new_trainer(cfg, policy)?;
    fs::write(out.join("networks.txt"), format!("{}{}", trainer.disp.manifest(), trainer.pose.manifest()))?;

    let samples: Vec<ReplaySample> = bench
        .pretrain
        .items()
        .into_iter()
        .map(|(d, i)| render(&bench.domains[d], cfg.mode, i).map(|s| s.input()))
        .collect::<Result<_>>()?;
    info!("pretraining on {} samples for {} epochs", samples.len(), cfg.pretrain_epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let trace = out.join("trace.csv");
    if trace.exists() {
        fs::remove_file(&trace)?;
    }
    let mut losses = Vec::new();
    let mut stored = 0;
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut records = Vec::with_capacity(order.len());
        for &k in &order {
            let r = trainer.step(&samples[k])?;
            losses.push(r.loss);
            stored += r.stored as usize;
            records.push(r);
        }
        let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64;
        info!("epoch {epoch}: mean loss {mean:.5}, buffer {}", trainer.buffer.len());
        tables::append(&trace, &TRACE_HEADER, trace_rows(&records))?;
    }
    trainer.save_state(out)?;
    trainer.buffer.dump(&out.join("buffer"))?;
    Ok(PretrainOutcome { losses, stored })
}

#[derive(Clone, Debug)]
pub struct OnlineOutcome {
    pub report: ProtocolReport,
    /// False when the run stopped early through `stop_after`.
    pub completed: bool,
    pub steps: usize,
}

/// Online domains whose blocks began before `step` steps were taken.
fn trained_online(bench: &Benchmark, step: usize) -> Vec<usize> {
    bench
        .online
        .transitions()
        .into_iter()
        .zip(&bench.online.blocks)
        .filter(|(start, _)| *start < step)
        .map(|(_, b)| b.domain)
        .collect()
}

fn evaluation_due(cfg: &RunConfig, bench: &Benchmark, done: usize) -> bool {
    done == 0 || done % cfg.eval_every == 0 || done == bench.online.len() || bench.online.transitions().contains(&done)
}

/// Single pass over the online stream starting from the pretraining state in
/// `cfg.pretrain_dir`. Writes `manifest.txt`, `trace.csv`, `report.csv`,
/// `domains.csv`, periodic state in `resume/` and the final state and buffer
/// dump in `final/`.
/// If `out/resume` holds a state the run continues from it.
pub fn online(cfg: &RunConfig, out: &Path) -> Result<OnlineOutcome> {
    let pre = cfg
        .pretrain_dir
        .as_ref()
        .ok_or_else(|| Error::Config("online training needs `pretrain_dir` (or --pretrained)".into()))?;
    let bench = benchmark(cfg)?;
    let evaluator = Evaluator::new(&bench, cfg.mode)?;
    let policy = StepPolicy {
        gamma: cfg.effective_gamma(),
        replay: cfg.method.replays(),
        admit: cfg.method.replays(),
        replay_regularize: cfg.replay_regularize,
    };
    let mut trainer = new_trainer(cfg, policy)?;
    let (trace, report_path, domains_path) = (out.join("trace.csv"), out.join("report.csv"), out.join("domains.csv"));
    let resume_dir = out.join("resume");

    let start = if resume_dir.join("state.txt").exists() {
        trainer.load_state(&resume_dir)?;
        let s = trainer.step;
        info!("resuming {} at step {s}", out.display());
        tables::truncate_steps(&trace, |x| x < s)?;
        tables::truncate_steps(&report_path, |x| x <= s)?;
        tables::truncate_steps(&domains_path, |x| x <= s)?;
        s as usize
    } else {
        trainer.load_state(pre)?;
        trainer.begin_phase(cfg, policy)?;
        write_manifest(out, "online", cfg)?;
        for p in [&trace, &report_path, &domains_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        0
    };
    let header = tables::report_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let record_eval = |row: &ProtocolRow| -> Result<()> {
        tables::append(&report_path, &header, [tables::report_record(row)])?;
        tables::append(&domains_path, &DOMAIN_HEADER, tables::domain_records(row))
    };
    if start == 0 {
        record_eval(&evaluator.evaluate(&trainer.disp, 0, &[])?)?;
    }

    let total = bench.online.len();
    let mut pending = Vec::new();
    let mut done = start;
    while done < total {
        if cfg.stop_after == Some(done) {
            tables::append(&trace, &TRACE_HEADER, trace_rows(&pending))?;
            return Ok(OnlineOutcome { report: tables::read_report(&report_path)?, completed: false, steps: done });
        }
        let (d, i) = bench.online.locate(done).expect("step inside the plan");
        let sample = render(&bench.domains[d], cfg.mode, i)?.input();
        pending.push(trainer.step(&sample)?);
        done += 1;
        if evaluation_due(cfg, &bench, done) {
            let row = evaluator.evaluate(&trainer.disp, done, &trained_online(&bench, done))?;
            info!(
                "step {done}: current AbsRel {:.4}, cross AbsRel {:.4}",
                row.current_dist.map_or(f64::NAN, |m| m.abs_rel),
                row.cross_dist.map_or(f64::NAN, |m| m.abs_rel)
            );
            record_eval(&row)?;
        }
        if done % cfg.checkpoint_every == 0 || done == total {
            tables::append(&trace, &TRACE_HEADER, trace_rows(&pending))?;
            pending.clear();
            trainer.save_state(&resume_dir)?;
        }
    }
    trainer.save_state(&out.join("final"))?;
    trainer.buffer.dump(&out.join("final").join("buffer"))?;
    Ok(OnlineOutcome { report: tables::read_report(&report_path)?, completed: true, steps: done })
}

/// Evaluates the disparity network stored in `state_dir` on every held-out
/// set, as if all online domains had been trained. Writes `eval.csv` and
/// `eval_domains.csv` to `out`.
pub fn evaluate(cfg: &RunConfig, state_dir: &Path, out: &Path) -> Result<ProtocolRow> {
    let bench = benchmark(cfg)?;
    let (mut disp, _) = build_default_nets(cfg.height, cfg.width, 0)?;
    let ck = Checkpoint::load(&state_dir.join("state.bin"))?;
    ck.load_params("disp.", &mut disp.params)?;
    let evaluator = Evaluator::new(&bench, cfg.mode)?;
    let step = fs::read_to_string(state_dir.join("state.txt"))
        .ok()
        .and_then(|t| parse_kv(&t).ok())
        .and_then(|kv| get::<usize>(&kv, "step").ok())
        .unwrap_or(0);
    let row = evaluator.evaluate(&disp, step, &trained_online(&bench, bench.online.len()))?;
    fs::create_dir_all(out)?;
    tables::write_report(&ProtocolReport { rows: vec![row.clone()] }, &out.join("eval.csv"), &out.join("eval_domains.csv"))?;
    Ok(row)
}

/// One finished online run as read back by [`report`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub method: Method,
    pub seed: u64,
    pub report: ProtocolReport,
}

pub fn read_run(dir: &Path) -> Result<RunSummary> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut kv = BTreeMap::new();
    for line in manifest.lines() {
        if let Some((k, v)) = line.split('#').next().unwrap_or("").split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let method: String = get(&kv, "method")?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        method: method.parse()?,
        seed: get(&kv, "seed")?,
        report: tables::read_report(&dir.join("report.csv"))?,
    })
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn final_metrics(run: &RunSummary, category: usize) -> Option<MetricSet> {
    let row = run.report.rows.last()?;
    [row.current_dist, row.cross_dist, row.online_adapt, row.cross_domain][category]
}

/// Aggregates finished runs: `summary.csv` (method, category, metric, mean,
/// sd, n over seeds at the final evaluation; sd empty for a single seed),
/// `summary.md` and, when fine tuning runs are present, `curves.csv`
/// normalized by the fine tuning run of the same seed.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<Vec<RunSummary>> {
    if runs.is_empty() {
        return Err(Error::invalid("report needs at least one run directory"));
    }
    let mut summaries = runs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    summaries.sort_by(|a, b| (a.method as u8, a.seed, &a.dir).cmp(&(b.method as u8, b.seed, &b.dir)));
    fs::create_dir_all(out)?;

    let mut rows = Vec::new();
    let mut md = String::from("| Method |");
    for c in CATEGORIES {
        md.push_str(&format!(" {c} AbsRel | {c} RMSE |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(2 * CATEGORIES.len()));
    md.push('\n');
    for method in Method::ALL {
        let group: Vec<&RunSummary> = summaries.iter().filter(|s| s.method == method).collect();
        if group.is_empty() {
            continue;
        }
        md.push_str(&format!("| {} |", method.label()));
        for (ci, c) in CATEGORIES.iter().enumerate() {
            let sets: Vec<MetricSet> = group.iter().filter_map(|r| final_metrics(r, ci)).collect();
            for (mi, m) in MetricSet::NAMES.iter().enumerate() {
                if sets.is_empty() {
                    continue;
                }
                let vals: Vec<f64> = sets.iter().map(|s| s.values()[mi]).collect();
                let (mean, sd) = mean_sd(&vals);
                rows.push(vec![
                    method.key().to_string(),
                    c.to_string(),
                    m.to_string(),
                    format!("{mean:.6}"),
                    if vals.len() > 1 { format!("{sd:.6}") } else { String::new() },
                    vals.len().to_string(),
                ]);
            }
            let cell = |mi: usize| {
                if sets.is_empty() {
                    return "n/a".to_string();
                }
                let (mean, sd) = mean_sd(&sets.iter().map(|s| s.values()[mi]).collect::<Vec<_>>());
                if sets.len() > 1 {
                    format!("{mean:.4} ± {sd:.4}")
                } else {
                    format!("{mean:.4}")
                }
            };
            md.push_str(&format!(" {} | {} |", cell(1), cell(0)));
        }
        md.push('\n');
    }
    let summary = out.join("summary.csv");
    if summary.exists() {
        fs::remove_file(&summary)?;
    }
    tables::append(&summary, &["method", "category", "metric", "mean", "sd", "n"], rows)?;
    fs::write(out.join("summary.md"), md)?;

    let curves = out.join("curves.csv");
    if curves.exists() {
        fs::remove_file(&curves)?;
    }
    let mut curve_rows = Vec::new();
    for run in &summaries {
        let Some(base) = summaries.iter().find(|b| b.method == Method::FineTune && b.seed == run.seed) else {
            warn!("no fine-tuning run with seed {}; curves for {} omitted", run.seed, run.dir.display());
            continue;
        };
        for p in normalize_curves(&run.report, &base.report)? {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            curve_rows.push(vec![
                run.method.key().to_string(),
                run.seed.to_string(),
                p.step.to_string(),
                opt(p.current_rmse),
                opt(p.cross_rmse),
            ]);
        }
    }
    if !curve_rows.is_empty() {
        tables::append(&curves, &["method", "seed", "step", "current_rmse_norm", "cross_rmse_norm"], curve_rows)?;
    }
    Ok(summaries)
}
