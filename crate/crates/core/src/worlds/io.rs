//! Frame export: binary PPM (P6, 8-bit) for images, little-endian PFM for
//! single-channel float maps, and a CSV index.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use super::{render, DomainSpec};
use crate::error::{Error, Result};
use crate::image::{Image, Mode, Plane};

/// Writes a 3-channel image as P6 with values clamped to [0, 1].
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape(format!("PPM needs 3 channels, got {}", image.channels())));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn header_tokens<R: BufRead>(r: &mut R, n: usize) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    while tokens.len() < n {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    Ok(tokens)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let t = header_tokens(&mut r, 4)?;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field `{s}`")));
    if t[0] != "P6" || parse(&t[3])? != 255 {
        return Err(Error::Format("only 8-bit P6 pixmaps are supported".into()));
    }
    let (w, h) = (parse(&t[1])?, parse(&t[2])?);
    let mut raw = vec![0u8; 3 * w * h];
    r.read_exact(&mut raw)?;
    let mut img = Image::filled(3, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(c, y, x, raw[(y * w + x) * 3 + c] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Grayscale PFM (`Pf`), negative scale for little-endian, rows stored
/// bottom to top.
pub fn write_pfm(path: &Path, plane: &Plane) -> Result<()> {
    let (h, w) = (plane.height(), plane.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&plane.get(y, x).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Plane> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let t = header_tokens(&mut r, 4)?;
    if t[0] != "Pf" {
        return Err(Error::Format("only grayscale PFM is supported".into()));
    }
    let w: usize = t[1].parse().map_err(|_| Error::Format("bad PFM width".into()))?;
    let h: usize = t[2].parse().map_err(|_| Error::Format("bad PFM height".into()))?;
    let scale: f32 = t[3].parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    let mut raw = vec![0u8; 4 * w * h];
    r.read_exact(&mut raw)?;
    let mut data = vec![0.0f32; w * h];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (k / w, k % w);
        data[(h - 1 - row) * w + x] = v;
    }
    Plane::new(h, w, data)
}

/// One row of the export index.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexRow {
    pub step: usize,
    pub domain: String,
    pub distribution: String,
    pub frame0: PathBuf,
    pub frame1: PathBuf,
    pub truth: PathBuf,
}

/// Renders `indices` of `spec` into `dir` and appends rows to `index.csv`
/// (created with a header if missing). Stereo exports disparity, SfM depth.
pub fn export_samples(dir: &Path, spec: &DomainSpec, mode: Mode, indices: &[usize], first_step: usize) -> Result<Vec<IndexRow>> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let s = render(spec, mode, i)?;
        let stem = format!("{}_{}_{i:05}", spec.id, mode);
        let f0 = PathBuf::from(format!("{stem}_0.ppm"));
        let f1 = PathBuf::from(format!("{stem}_1.ppm"));
        write_ppm(&dir.join(&f0), &s.frames[0])?;
        write_ppm(&dir.join(&f1), &s.frames[1])?;
        let (truth, plane) = match &s.truth.disparity {
            Some(d) => (PathBuf::from(format!("{stem}_disp.pfm")), d.plane()),
            None => (PathBuf::from(format!("{stem}_depth.pfm")), s.truth.depth.plane()),
        };
        write_pfm(&dir.join(&truth), plane)?;
        rows.push(IndexRow {
            step: first_step + k,
            domain: spec.id.clone(),
            distribution: spec.distribution.clone(),
            frame0: f0,
            frame1: f1,
            truth,
        });
    }
    append_index(&dir.join("index.csv"), &rows)?;
    Ok(rows)
}

pub fn append_index(path: &Path, rows: &[IndexRow]) -> Result<()> {
    let new = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if new {
        w.write_record(["step", "domain", "distribution", "frame0", "frame1", "truth"]).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.domain.clone(),
            r.distribution.clone(),
            r.frame0.display().to_string(),
            r.frame1.display().to_string(),
            r.truth.display().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes an image to `path` in the export format; used by buffer dumps.
pub fn write_frame(path: &Path, image: &Image) -> Result<()> {
    write_ppm(path, image)
}
