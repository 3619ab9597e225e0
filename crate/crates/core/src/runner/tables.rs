//! CSV tables written by the runner.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{MetricSet, ProtocolReport, ProtocolRow};
use crate::worlds::io::csv_err;

pub const CATEGORIES: [&str; 4] = ["current_dist", "cross_dist", "online_adapt", "cross_domain"];

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// `step, current_domain, <category>_<metric> for every category and
/// metric, previous_domains`.
pub fn report_header() -> Vec<String> {
    let mut h = vec!["step".to_string(), "current_domain".to_string()];
    for c in CATEGORIES {
        for m in MetricSet::NAMES {
            h.push(format!("{c}_{m}"));
        }
    }
    h.push("previous_domains".to_string());
    h
}

fn categories(row: &ProtocolRow) -> [Option<MetricSet>; 4] {
    [row.current_dist, row.cross_dist, row.online_adapt, row.cross_domain]
}

pub fn report_record(row: &ProtocolRow) -> Vec<String> {
    let mut r = vec![row.step.to_string(), row.current_domain.clone().unwrap_or_default()];
    for m in categories(row) {
        match m {
            Some(m) => r.extend(m.values().map(fmt)),
            None => r.extend(std::iter::repeat(String::new()).take(7)),
        }
    }
    r.push(row.previous_domains.join(";"));
    r
}

pub const DOMAIN_HEADER: [&str; 10] =
    ["step", "domain", "distribution", "rmse", "abs_rel", "sq_rel", "log_rmse", "delta_1", "delta_2", "delta_3"];

pub fn domain_records(row: &ProtocolRow) -> Vec<Vec<String>> {
    row.per_domain
        .iter()
        .map(|d| {
            let mut r = vec![row.step.to_string(), d.domain.clone(), d.distribution.clone()];
            r.extend(d.metrics.values().map(fmt));
            r
        })
        .collect()
}

/// Appends records to `path`, writing `header` first if the file is new.
pub fn append<I, R>(path: &Path, header: &[&str], records: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let new = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if new {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in records {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps the header and the rows whose first field (a step) satisfies `keep`.
pub fn truncate_steps(path: &Path, keep: impl Fn(u64) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rd.headers().map_err(csv_err)?.clone();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let step: u64 = rec.get(0).unwrap_or("").parse().map_err(|_| Error::Format(format!("bad step in {}", path.display())))?;
        if keep(step) {
            rows.push(rec);
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the aggregate columns of a report CSV back. Per-domain records
/// are not part of this table and come back empty.
pub fn read_report(path: &Path) -> Result<ProtocolReport> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != report_header() {
        return Err(Error::Format(format!("{} does not have the report columns", path.display())));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = |f: &str| Error::Format(format!("bad field `{f}` in {}", path.display()));
        let step = rec[0].parse().map_err(|_| bad(&rec[0]))?;
        let mut cats = [None; 4];
        for (c, slot) in cats.iter_mut().enumerate() {
            let fields: Vec<&str> = (0..7).map(|m| &rec[2 + 7 * c + m]).collect();
            if fields.iter().all(|f| f.is_empty()) {
                continue;
            }
            let mut v = [0.0; 7];
            for (x, f) in v.iter_mut().zip(&fields) {
                *x = f.parse().map_err(|_| bad(f))?;
            }
            *slot = Some(MetricSet::from_values(v));
        }
        let prev = &rec[2 + 28];
        rows.push(ProtocolRow {
            step,
            current_domain: (!rec[1].is_empty()).then(|| rec[1].to_string()),
            current_dist: cats[0],
            cross_dist: cats[1],
            online_adapt: cats[2],
            cross_domain: cats[3],
            previous_domains: if prev.is_empty() { Vec::new() } else { prev.split(';').map(str::to_string).collect() },
            per_domain: Vec::new(),
        });
    }
    Ok(ProtocolReport { rows })
}

/// Writes a whole report (aggregate and per-domain tables).
pub fn write_report(report: &ProtocolReport, report_path: &Path, domains_path: &Path) -> Result<()> {
    for p in [report_path, domains_path] {
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    let header = report_header();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    append(report_path, &h, report.rows.iter().map(report_record))?;
    append(domains_path, &DOMAIN_HEADER, report.rows.iter().flat_map(domain_records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::DomainRecord;

    fn row(step: usize) -> ProtocolRow {
        let m = MetricSet::from_values([1.5, 0.25, 0.125, 0.3, 0.9, 0.95, 0.99]);
        ProtocolRow {
            step,
            current_domain: Some("B3".into()),
            current_dist: Some(m),
            cross_dist: Some(m),
            online_adapt: Some(m),
            cross_domain: None,
            previous_domains: vec!["B0".into(), "B1".into()],
            per_domain: vec![DomainRecord { domain: "A0".into(), distribution: "A".into(), metrics: m }],
        }
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (rp, dp) = (dir.path().join("r.csv"), dir.path().join("d.csv"));
        let rep = ProtocolReport { rows: vec![row(0), row(200)] };
        write_report(&rep, &rp, &dp).unwrap();
        let back = read_report(&rp).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].current_dist, rep.rows[1].current_dist);
        assert_eq!(back.rows[1].cross_domain, None);
        assert_eq!(back.rows[0].previous_domains, vec!["B0", "B1"]);
        let d = fs::read_to_string(&dp).unwrap();
        assert_eq!(d.lines().nth(1).unwrap(), "0,A0,A,1.500000,0.250000,0.125000,0.300000,0.900000,0.950000,0.990000");
    }

    #[test]
    fn truncation_keeps_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        append(&p, &["step", "x"], [["0", "a"], ["5", "b"], ["9", "c"]]).unwrap();
        truncate_steps(&p, |s| s < 6).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "step,x\n0,a\n5,b\n");
    }
}
