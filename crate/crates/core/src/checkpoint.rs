//! Checkpoint container: a flat little-endian binary file holding the step
//! counter, a config echo, every parameter tensor by name, and optionally
//! the Adam moments. Round-trips are bit-exact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "DSC1"
//! version u32      currently 1
//! step    u64
//! echo    u32 length + that many UTF-8 bytes (flat key=value config text)
//! count   u32      number of tensors
//! tensor  repeated in ascending name order:
//!         name: u32 length + bytes, ndim: u32, dims: ndim x u64,
//!         data: numel x f64
//! opt     u8 flag; if 1: t: u64, then per tensor in the same order the
//!         first moment (numel x f64) and second moment (numel x f64)
//! ```
//!
//! Trailing bytes are a format error; loaders never guess.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::OptimizerState;

const MAGIC: &[u8; 4] = b"DSC1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_echo: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(opt) = &ck.optimizer {
        for (label, map) in [("first", &opt.m), ("second", &opt.v)] {
            if map.len() != ck.tensors.len() {
                return Err(bad(format!(
                    "{label}-moment map has {} entries, expected {}",
                    map.len(),
                    ck.tensors.len()
                )));
            }
            for (name, t) in &ck.tensors {
                let m = map
                    .get(name)
                    .ok_or_else(|| bad(format!("{label} moments missing {name}")))?;
                if m.len() != t.numel() {
                    return Err(bad(format!(
                        "{label} moments for {name} hold {} values, expected {}",
                        m.len(),
                        t.numel()
                    )));
                }
            }
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.step.to_le_bytes());
    let echo = ck.config_echo.as_bytes();
    buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(echo);
    buf.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &ck.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.t.to_le_bytes());
            for name in ck.tensors.keys() {
                for v in &opt.m[name] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for v in &opt.v[name] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| bad("non-UTF-8 string field"))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic; not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let step = r.u64()?;
    let config_echo = r.string()?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        if let Some(last) = order.last() {
            if *last >= name {
                return Err(bad(format!("tensor names out of order at {name}")));
            }
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel)?;
        tensors.insert(name.clone(), Tensor { shape, data });
        order.push(name);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for name in &order {
                let numel = tensors[name].numel();
                m.insert(name.clone(), r.f64_vec(numel)?);
                v.insert(name.clone(), r.f64_vec(numel)?);
            }
            Some(OptimizerState { t, m, v })
        }
        other => return Err(bad(format!("bad optimizer flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(bad(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        step,
        config_echo,
        tensors,
        optimizer,
    })
}
