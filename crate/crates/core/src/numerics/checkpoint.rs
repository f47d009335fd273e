//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CSASRCKP"
//! version u32
//! step    u64
//! n_meta  u32, then n_meta × (key: str, value: str)
//! n_tens  u32, then n_tens × (name: str, ndim u32, dims u64 × ndim, f64 × prod(dims))
//! str  := len u32, UTF-8 bytes
//! ```
//!
//! Optimizer moments are stored as ordinary tensors under `adam.m/<path>` and
//! `adam.v/<path>`, with update counts in metadata under `adam.t/<path>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::optim::{AdamWState, Moments};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSASRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";
const T_PREFIX: &str = "adam.t/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(step: u64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn insert_optimizer(&mut self, state: &AdamWState) {
        for (name, mom) in &state.moments {
            self.tensors.insert(format!("{M_PREFIX}{name}"), mom.m.clone());
            self.tensors.insert(format!("{V_PREFIX}{name}"), mom.v.clone());
            self.meta.insert(format!("{T_PREFIX}{name}"), mom.t.to_string());
        }
    }

    pub fn optimizer_state(&self) -> Result<AdamWState> {
        let mut state = AdamWState::new();
        for (key, m) in self.tensors.range(M_PREFIX.to_string()..) {
            let Some(name) = key.strip_prefix(M_PREFIX) else { break };
            let v = self
                .tensors
                .get(&format!("{V_PREFIX}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
            let t = self
                .meta
                .get(&format!("{T_PREFIX}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing update count for {name}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad update count for {name}")))?;
            state.moments.insert(
                name.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                    t,
                },
            );
        }
        Ok(state)
    }

    /// Tensors that are not optimizer state.
    pub fn parameters(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(M_PREFIX) && !k.starts_with(V_PREFIX))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = read_u64(r)?;
        let mut ck = Checkpoint::new(step);
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            ck.meta.insert(k, v);
        }
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let ndim = read_u32(r)? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Checkpoint(format!("{name}: bad rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            ck.tensors.insert(name, t);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("string of length {len}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}
