//! Named weight store and the LENS binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LENS"  u32 version (= 1)  u32 tensor_count
//! per tensor:
//!     u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!     u32 dims[rank], f32 data[product(dims)]
//!     zero padding so the next tensor record starts at a file offset that
//!     is a multiple of 8 (no padding after the last tensor)
//! ```
//!
//! Tensors are written in lexicographic name order, so exporting the same
//! weights twice produces identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

pub const LENS_MAGIC: [u8; 4] = *b"LENS";
pub const LENS_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_ELEMENTS: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub version: u32,
    tensors: BTreeMap<String, WeightTensor>,
}

impl Default for ModelWeights {
    fn default() -> Self {
        Self {
            version: LENS_VERSION,
            tensors: BTreeMap::new(),
        }
    }
}

impl ModelWeights {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::WeightFormat(format!(
                "tensor {name}: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        self.tensors.insert(name, WeightTensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightTensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<WeightTensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// FNV-1a hash over tensor names and shapes; identifies the architecture
    /// a weight set belongs to, independent of the values.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &d in &t.shape {
                eat(&(d as u64).to_le_bytes());
            }
        }
        format!("{h:016x}")
    }

    /// Checks the store against the configuration's manifest, reporting every
    /// missing, unexpected and mis-shaped tensor at once.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let manifest: BTreeMap<String, Vec<usize>> = cfg.manifest().into_iter().collect();
        let mut problems = Vec::new();
        for (name, shape) in &manifest {
            match self.tensors.get(name) {
                None => problems.push(format!("missing tensor {name} {shape:?}")),
                Some(t) if &t.shape != shape => problems.push(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )),
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !manifest.contains_key(name) {
                problems.push(format!("unexpected tensor {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(problems))
        }
    }

    /// Randomly initialized weights for `cfg`, reproducible from `seed`.
    /// Convolutions get He-normal weights, linear layers `1/sqrt(fan_in)`
    /// normal weights, biases zero.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::default();
        for (name, shape) in cfg.manifest() {
            let n: usize = shape.iter().product();
            let normal = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            };
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.starts_with("prompt.") {
                normal(1.0, &mut rng)
            } else if name == "attn.liere.rates" {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            } else if name.contains(".alpha_") {
                (0..n).map(|_| rng.random_range(0.1..0.5)).collect()
            } else if shape.len() == 5 {
                let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
                normal((2.0 / fan_in as f64).sqrt(), &mut rng)
            } else {
                normal(1.0 / (shape[1] as f64).sqrt(), &mut rng)
            };
            w.insert(name, shape, data)?;
        }
        Ok(w)
    }

    pub fn write_lens(&self, mut w: impl Write) -> io::Result<()> {
        let mut pos = 0usize;
        let put = |w: &mut dyn Write, b: &[u8], pos: &mut usize| -> io::Result<()> {
            *pos += b.len();
            w.write_all(b)
        };
        put(&mut w, &LENS_MAGIC, &mut pos)?;
        put(&mut w, &self.version.to_le_bytes(), &mut pos)?;
        put(&mut w, &(self.tensors.len() as u32).to_le_bytes(), &mut pos)?;
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            if i > 0 {
                let pad = pos.next_multiple_of(8) - pos;
                put(&mut w, &[0u8; 8][..pad], &mut pos)?;
            }
            let len = u16::try_from(name.len())
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "tensor name too long"))?;
            put(&mut w, &len.to_le_bytes(), &mut pos)?;
            put(&mut w, name.as_bytes(), &mut pos)?;
            put(&mut w, &[DTYPE_F32, t.shape.len() as u8], &mut pos)?;
            for &d in &t.shape {
                put(&mut w, &(d as u32).to_le_bytes(), &mut pos)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            put(&mut w, &buf, &mut pos)?;
        }
        w.flush()
    }

    pub fn to_lens_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_lens(&mut out).expect("writing to memory");
        out
    }

    pub fn read_lens(r: impl Read) -> Result<Self> {
        let mut r = Counting { inner: r, pos: 0 };
        let fmt = |m: String| Error::WeightFormat(m);
        let eof = |e: io::Error| fmt(format!("truncated weight file: {e}"));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if magic != LENS_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = r.u32().map_err(eof)?;
        if version != LENS_VERSION {
            return Err(Error::Version {
                found: version,
                expected: LENS_VERSION,
            });
        }
        let count = r.u32().map_err(eof)?;
        let mut out = Self::default();
        for i in 0..count {
            if i > 0 {
                let pad = r.pos.next_multiple_of(8) - r.pos;
                let mut skip = [0u8; 8];
                r.read_exact(&mut skip[..pad]).map_err(eof)?;
            }
            let len = r.u16().map_err(eof)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
            let mut dr = [0u8; 2];
            r.read_exact(&mut dr).map_err(eof)?;
            if dr[0] != DTYPE_F32 {
                return Err(fmt(format!("tensor {name}: unsupported dtype {}", dr[0])));
            }
            let mut shape = Vec::with_capacity(dr[1] as usize);
            for _ in 0..dr[1] {
                shape.push(r.u32().map_err(eof)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| fmt(format!("tensor {name}: implausible shape {shape:?}")))?;
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(eof)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if out.tensors.contains_key(&name) {
                return Err(fmt(format!("duplicate tensor {name}")));
            }
            out.tensors.insert(name, WeightTensor { shape, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(eof)? != 0 {
            return Err(fmt("trailing bytes after last tensor".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_lens(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }
}

struct Counting<R> {
    inner: R,
    pos: usize,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n;
        Ok(n)
    }
}

impl<R: Read> Counting<R> {
    fn u16(&mut self) -> io::Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> io::Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Reads a LENS file and checks it against `cfg`.
pub fn load_weights(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelWeights> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let w = ModelWeights::read_lens(BufReader::new(file))?;
    w.validate(cfg)?;
    Ok(w)
}
