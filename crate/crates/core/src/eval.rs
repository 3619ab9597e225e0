//! Depth metrics and the four-way evaluation bookkeeping: current
//! distribution, cross distribution, online adaptation and cross domain.

use crate::error::{Error, Result};
use crate::image::{DepthMap, Mode, Plane};
use crate::models::DisparityNet;
use crate::worlds::{render, Benchmark, LabeledSample};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSet {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub log_rmse: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 7] = ["rmse", "abs_rel", "sq_rel", "log_rmse", "delta_1", "delta_2", "delta_3"];

    pub fn values(&self) -> [f64; 7] {
        [self.rmse, self.abs_rel, self.sq_rel, self.log_rmse, self.delta_1, self.delta_2, self.delta_3]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self { rmse: v[0], abs_rel: v[1], sq_rel: v[2], log_rmse: v[3], delta_1: v[4], delta_2: v[5], delta_3: v[6] }
    }

    /// Unweighted field-wise mean; `None` for an empty slice.
    pub fn mean(sets: &[MetricSet]) -> Option<MetricSet> {
        if sets.is_empty() {
            return None;
        }
        let mut acc = [0.0f64; 7];
        for s in sets {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        Some(MetricSet::from_values(acc.map(|a| a / sets.len() as f64)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Align {
    None,
    /// Scale the prediction by `median(gt) / median(pred)` over the mask.
    Median,
}

impl Align {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Stereo => Align::None,
            Mode::Sfm => Align::Median,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Depth metrics over pixels where `mask` is set. Log RMSE is the root mean
/// square of natural-log differences.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: &Plane, align: Align) -> Result<MetricSet> {
    let (p, g) = (pred.plane(), gt.plane());
    if p.height() != g.height() || p.width() != g.width() || mask.height() != g.height() || mask.width() != g.width() {
        return Err(Error::shape("prediction, ground truth and mask must share a grid"));
    }
    let idx: Vec<usize> = (0..g.data().len()).filter(|&i| mask.data()[i] > 0.5).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut pv: Vec<f64> = idx.iter().map(|&i| p.data()[i] as f64).collect();
    let gv: Vec<f64> = idx.iter().map(|&i| g.data()[i] as f64).collect();
    if let Some(bad) = gv.iter().chain(&pv).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("depths must be positive and finite on the mask, found {bad}")));
    }
    if align == Align::Median {
        let s = median(gv.clone()) / median(pv.clone());
        pv.iter_mut().for_each(|v| *v *= s);
    }
    let n = idx.len() as f64;
    let (mut se, mut ar, mut sr, mut le) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&d, &t) in pv.iter().zip(&gv) {
        let e = d - t;
        se += e * e;
        ar += e.abs() / t;
        sr += e * e / t;
        let l = d.ln() - t.ln();
        le += l * l;
        let ratio = (t / d).max(d / t);
        for (k, th) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *th {
                hits[k] += 1;
            }
        }
    }
    Ok(MetricSet {
        rmse: (se / n).sqrt(),
        abs_rel: ar / n,
        sq_rel: sr / n,
        log_rmse: (le / n).sqrt(),
        delta_1: hits[0] as f64 / n,
        delta_2: hits[1] as f64 / n,
        delta_3: hits[2] as f64 / n,
    })
}

/// Depth from the disparity network: `focal_baseline / d` in stereo mode,
/// `1 / d` (scale-free) in SfM mode.
pub fn predict_depth(net: &DisparityNet, sample: &LabeledSample, focal_baseline: f32) -> Result<DepthMap> {
    let disp = net.predict(&sample.frames[0])?;
    let k = match sample.mode {
        Mode::Stereo => focal_baseline,
        Mode::Sfm => 1.0,
    };
    let data = disp.plane().data().iter().map(|&d| k / d).collect();
    Ok(DepthMap(Plane::new(disp.plane().height(), disp.plane().width(), data)?))
}

/// Metrics of one domain at one evaluation event.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRecord {
    pub domain: String,
    pub distribution: String,
    pub metrics: MetricSet,
}

/// One evaluation event.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolRow {
    pub step: usize,
    /// Domain of the most recent online sample, if any.
    pub current_domain: Option<String>,
    pub current_dist: Option<MetricSet>,
    pub cross_dist: Option<MetricSet>,
    pub online_adapt: Option<MetricSet>,
    pub cross_domain: Option<MetricSet>,
    /// Domains counted in `cross_domain`, in order.
    pub previous_domains: Vec<String>,
    pub per_domain: Vec<DomainRecord>,
}

impl ProtocolRow {
    /// Cross-domain aggregate recomputed from the per-domain records.
    pub fn recompute_cross_domain(&self) -> Option<MetricSet> {
        let sets: Vec<MetricSet> = self
            .previous_domains
            .iter()
            .filter_map(|d| self.per_domain.iter().find(|r| &r.domain == d).map(|r| r.metrics))
            .collect();
        MetricSet::mean(&sets)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProtocolReport {
    pub rows: Vec<ProtocolRow>,
}

/// Held-out samples of every domain, rendered once.
pub struct Evaluator {
    mode: Mode,
    domains: Vec<(String, String, f32)>,
    samples: Vec<Vec<LabeledSample>>,
    /// Distribution currently trained online.
    current_distribution: String,
    /// Pretraining domains, in benchmark order.
    pretrain_domains: Vec<usize>,
}

impl Evaluator {
    pub fn new(bench: &Benchmark, mode: Mode) -> Result<Self> {
        let mut samples = vec![Vec::new(); bench.domains.len()];
        for set in &bench.eval {
            for &i in &set.indices {
                samples[set.domain].push(render(&bench.domains[set.domain], mode, i)?);
            }
        }
        let current_distribution = bench
            .online
            .blocks
            .first()
            .map(|b| bench.domains[b.domain].distribution.clone())
            .ok_or_else(|| Error::invalid("online plan is empty"))?;
        let mut pretrain_domains: Vec<usize> = bench.pretrain.blocks.iter().map(|b| b.domain).collect();
        pretrain_domains.dedup();
        Ok(Self {
            mode,
            domains: bench.domains.iter().map(|d| (d.id.clone(), d.distribution.clone(), d.focal_baseline)).collect(),
            samples,
            current_distribution,
            pretrain_domains,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Per-frame metrics of every domain.
    pub fn frame_metrics(&self, net: &DisparityNet) -> Result<Vec<Vec<MetricSet>>> {
        let align = Align::for_mode(self.mode);
        self.samples
            .iter()
            .enumerate()
            .map(|(d, list)| {
                list.iter()
                    .map(|s| {
                        let pred = predict_depth(net, s, self.domains[d].2)?;
                        compute_metrics(&pred, &s.truth.depth, &s.truth.valid, align)
                    })
                    .collect()
            })
            .collect()
    }

    /// Evaluates `net` after `step` online steps. `trained_online` lists the
    /// online domains trained so far in order (indices into the benchmark);
    /// the last one is the current domain.
    pub fn evaluate(&self, net: &DisparityNet, step: usize, trained_online: &[usize]) -> Result<ProtocolRow> {
        let frames = self.frame_metrics(net)?;
        Ok(self.assemble(step, &frames, trained_online))
    }

    pub fn assemble(&self, step: usize, frames: &[Vec<MetricSet>], trained_online: &[usize]) -> ProtocolRow {
        let per_domain: Vec<DomainRecord> = frames
            .iter()
            .enumerate()
            .filter_map(|(d, f)| {
                MetricSet::mean(f).map(|m| DomainRecord {
                    domain: self.domains[d].0.clone(),
                    distribution: self.domains[d].1.clone(),
                    metrics: m,
                })
            })
            .collect();
        let pooled = |same: bool| {
            let all: Vec<MetricSet> = frames
                .iter()
                .enumerate()
                .filter(|(d, _)| (self.domains[*d].1 == self.current_distribution) == same)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            MetricSet::mean(&all)
        };
        let current = trained_online.last().copied();
        let online_adapt = current.and_then(|d| MetricSet::mean(&frames[d]));
        let mut previous: Vec<usize> = self
            .pretrain_domains
            .iter()
            .copied()
            .filter(|&d| self.domains[d].1 == self.current_distribution)
            .collect();
        if trained_online.len() > 1 {
            for &d in &trained_online[..trained_online.len() - 1] {
                if !previous.contains(&d) && Some(d) != current {
                    previous.push(d);
                }
            }
        }
        let previous_domains: Vec<String> = previous.iter().map(|&d| self.domains[d].0.clone()).collect();
        let mut row = ProtocolRow {
            step,
            current_domain: current.map(|d| self.domains[d].0.clone()),
            current_dist: pooled(true),
            cross_dist: pooled(false),
            online_adapt,
            cross_domain: None,
            previous_domains,
            per_domain,
        };
        row.cross_domain = row.recompute_cross_domain();
        row
    }
}

/// One point of a normalized evolution curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub current_rmse: Option<f64>,
    pub cross_rmse: Option<f64>,
}

/// Divides a run's current- and cross-distribution RMSE series by the
/// maximum of the baseline's corresponding series.
pub fn normalize_curves(report: &ProtocolReport, baseline: &ProtocolReport) -> Result<Vec<CurvePoint>> {
    let max_of = |f: fn(&ProtocolRow) -> Option<f64>| {
        baseline.rows.iter().filter_map(f).fold(f64::NEG_INFINITY, f64::max)
    };
    let cur_of: fn(&ProtocolRow) -> Option<f64> = |r| r.current_dist.map(|m| m.rmse);
    let cross_of: fn(&ProtocolRow) -> Option<f64> = |r| r.cross_dist.map(|m| m.rmse);
    let (cur_max, cross_max) = (max_of(cur_of), max_of(cross_of));
    if !(cur_max > 0.0) || !(cross_max > 0.0) {
        return Err(Error::invalid("baseline RMSE maximum is not positive"));
    }
    Ok(report
        .rows
        .iter()
        .map(|r| CurvePoint {
            step: r.step,
            current_rmse: cur_of(r).map(|v| v / cur_max),
            cross_rmse: cross_of(r).map(|v| v / cross_max),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(v: &[f32]) -> DepthMap {
        DepthMap(Plane::new(1, v.len(), v.to_vec()).unwrap())
    }

    fn ones(n: usize) -> Plane {
        Plane::filled(1, n, 1.0)
    }

    #[test]
    fn perfect_prediction() {
        let g = dm(&[1.0, 2.0, 5.0]);
        let m = compute_metrics(&g, &g, &ones(3), Align::None).unwrap();
        assert_eq!((m.rmse, m.abs_rel, m.sq_rel, m.log_rmse), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta_1, m.delta_2, m.delta_3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_case() {
        let m = compute_metrics(&dm(&[1.0, 2.0]), &dm(&[1.0, 4.0]), &ones(2), Align::None).unwrap();
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-12);
        assert!((m.abs_rel - 0.25).abs() < 1e-12);
        assert!((m.sq_rel - 0.5).abs() < 1e-12);
        let l = (0.5f64).ln();
        assert!((m.log_rmse - (l * l / 2.0).sqrt()).abs() < 1e-12);
        assert_eq!(m.delta_1, 0.5);
    }

    #[test]
    fn ratio_cases() {
        let g = [1.0f32, 3.0, 7.5];
        let p12: Vec<f32> = g.iter().map(|v| 1.2 * v).collect();
        let m = compute_metrics(&dm(&p12), &dm(&g), &ones(3), Align::None).unwrap();
        assert_eq!(m.delta_1, 1.0);
        assert!((m.abs_rel - 0.2).abs() < 1e-6);
        let p2: Vec<f32> = g.iter().map(|v| 2.0 * v).collect();
        let m = compute_metrics(&dm(&p2), &dm(&g), &ones(3), Align::None).unwrap();
        assert_eq!((m.delta_1, m.delta_2, m.delta_3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn scaled_truth_abs_rel() {
        let g = [0.5f32, 2.0, 4.0, 8.0];
        for k in [0.25f32, 0.5, 1.0, 1.5, 2.0, 4.0] {
            let p: Vec<f32> = g.iter().map(|v| k * v).collect();
            let m = compute_metrics(&dm(&p), &dm(&g), &ones(4), Align::None).unwrap();
            assert_eq!(m.abs_rel, (k as f64 - 1.0).abs());
        }
    }

    #[test]
    fn median_alignment_is_scale_invariant() {
        let g = [1.0f32, 2.0, 3.5, 6.0, 9.0];
        let p = [1.3f32, 1.7, 4.0, 5.0, 11.0];
        let base = compute_metrics(&dm(&p), &dm(&g), &ones(5), Align::Median).unwrap();
        for c in [0.5f32, 2.0, 8.0] {
            let ps: Vec<f32> = p.iter().map(|v| c * v).collect();
            let m = compute_metrics(&dm(&ps), &dm(&g), &ones(5), Align::Median).unwrap();
            assert_eq!(m, base);
        }
    }

    #[test]
    fn mask_and_errors() {
        let g = dm(&[1.0, 2.0]);
        let p = dm(&[1.0, 100.0]);
        let mask = Plane::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(compute_metrics(&p, &g, &mask, Align::None).unwrap().rmse, 0.0);
        assert!(matches!(compute_metrics(&p, &g, &Plane::filled(1, 2, 0.0), Align::None), Err(Error::EmptyMask)));
        assert!(compute_metrics(&dm(&[1.0]), &g, &mask, Align::None).is_err());
    }

    #[test]
    fn metric_invariants() {
        let g = [1.0f32, 2.0, 3.0, 4.0, 10.0];
        let p = [0.3f32, 2.6, 2.9, 9.0, 10.5];
        let m = compute_metrics(&dm(&p), &dm(&g), &ones(5), Align::None).unwrap();
        assert!(m.rmse >= 0.0 && m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.log_rmse >= 0.0);
        assert!(m.delta_1 <= m.delta_2 && m.delta_2 <= m.delta_3 && m.delta_3 <= 1.0);
    }

    fn ms(v: f64) -> MetricSet {
        MetricSet::from_values([v; 7])
    }

    #[test]
    fn cross_domain_average() {
        let row = ProtocolRow {
            step: 0,
            current_domain: None,
            current_dist: None,
            cross_dist: None,
            online_adapt: None,
            cross_domain: None,
            previous_domains: vec!["x".into(), "y".into()],
            per_domain: vec![
                DomainRecord { domain: "x".into(), distribution: "B".into(), metrics: ms(0.1) },
                DomainRecord { domain: "y".into(), distribution: "B".into(), metrics: ms(0.3) },
                DomainRecord { domain: "z".into(), distribution: "B".into(), metrics: ms(9.0) },
            ],
        };
        assert!((row.recompute_cross_domain().unwrap().abs_rel - 0.2).abs() < 1e-12);
        let empty = ProtocolRow { previous_domains: vec![], ..row };
        assert_eq!(empty.recompute_cross_domain(), None);
    }

    #[test]
    fn curves() {
        let row = |step, cur: f64, cross: f64| ProtocolRow {
            step,
            current_domain: None,
            current_dist: Some(ms(cur)),
            cross_dist: Some(ms(cross)),
            online_adapt: None,
            cross_domain: None,
            previous_domains: vec![],
            per_domain: vec![],
        };
        let base = ProtocolReport { rows: vec![row(0, 4.0, 2.0), row(1, 3.0, 1.0)] };
        let own = normalize_curves(&base, &base).unwrap();
        assert_eq!(own.iter().map(|c| c.current_rmse.unwrap()).fold(0.0, f64::max), 1.0);
        assert_eq!(own.iter().map(|c| c.cross_rmse.unwrap()).fold(0.0, f64::max), 1.0);
        let other = ProtocolReport { rows: vec![row(0, 2.0, 1.0), row(1, 2.0, 0.5)] };
        let c = normalize_curves(&other, &base).unwrap();
        assert_eq!(c[0].current_rmse, Some(0.5));
        assert_eq!(c[1].current_rmse, Some(0.5));
        let zero = ProtocolReport { rows: vec![row(0, 0.0, 0.0)] };
        assert!(normalize_curves(&base, &zero).is_err());
    }
}
