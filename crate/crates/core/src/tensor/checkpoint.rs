//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "LDEPTHCK"
//! version    u32
//! count      u32      number of tensor records
//! record*    name_len u32, name bytes (UTF-8), rank u32, dims u32×rank,
//!            payload f32×numel
//! opt_count  u32      number of optimizer states
//! optimizer* name_len u32, name bytes, step u64, lr f32, beta1 f32,
//!            beta2 f32, eps f32, count u32, then per parameter two tensor
//!            records named "m/<param>" and "v/<param>"
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Adam, AdamConfig, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LDEPTHCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub optimizers: Vec<(String, Adam)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every parameter of `params` under `prefix` + its name.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            let mut t = t.clone();
            t.clear_grad();
            self.tensors.push((format!("{prefix}{name}"), t));
        }
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn add_optimizer(&mut self, name: impl Into<String>, adam: &Adam) {
        self.optimizers.push((name.into(), adam.clone()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn optimizer(&self, name: &str) -> Option<&Adam> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Overwrites the values of `params` from records named `prefix<name>`.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let key = format!("{prefix}{name}");
            let src = self.tensor(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "checkpoint `{key}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_record(&mut out, name, t.shape(), t.data());
        }
        put_u32(&mut out, self.optimizers.len() as u32);
        for (name, adam) in &self.optimizers {
            put_str(&mut out, name);
            out.extend_from_slice(&adam.step_count().to_le_bytes());
            let c = adam.config;
            for x in [c.lr, c.beta1, c.beta2, c.eps] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            put_u32(&mut out, adam.names().len() as u32);
            for (i, pname) in adam.names().iter().enumerate() {
                let m = &adam.first_moment()[i];
                let v = &adam.second_moment()[i];
                put_record(&mut out, &format!("m/{pname}"), &[m.len()], m);
                put_record(&mut out, &format!("v/{pname}"), &[v.len()], v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.record()?);
        }
        let opt_count = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(opt_count);
        for _ in 0..opt_count {
            let name = r.string()?;
            let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let lr = r.f32()?;
            let beta1 = r.f32()?;
            let beta2 = r.f32()?;
            let eps = r.f32()?;
            let n = r.u32()? as usize;
            let mut names = Vec::with_capacity(n);
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let (mname, mt) = r.record()?;
                let (vname, vt) = r.record()?;
                let pname = mname
                    .strip_prefix("m/")
                    .ok_or_else(|| Error::Format(format!("expected first-moment record, got `{mname}`")))?;
                if vname.strip_prefix("v/") != Some(pname) {
                    return Err(Error::Format(format!("moment records `{mname}` and `{vname}` do not pair")));
                }
                names.push(pname.to_string());
                m.push(mt.into_data());
                v.push(vt.into_data());
            }
            let adam = Adam::from_parts(AdamConfig { lr, beta1, beta2, eps }, step, names, m, v)?;
            optimizers.push((name, adam));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, optimizers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_str(out, name);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
        Ok((name, t))
    }
}
