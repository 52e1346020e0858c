//! Single-file training checkpoints.
//!
//! Layout, all little-endian: the 8-byte magic `SNDFCKPT`, a `u32` format
//! version, a `u32` section count, then per section a `u32` name length,
//! the name, a `u64` payload length and the payload. A CRC-32 of all
//! preceding bytes closes the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sinodiff_autograd::{Adam, AdamConfig, ParamStore, Tensor};

use crate::config::{architecture_diff, RunConfig};
use crate::denoiser::param_shapes;
use crate::error::{Error, Result};
use crate::training::{RngState, Trainer};

pub const MAGIC: &[u8; 8] = b"SNDFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub iteration: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            params: trainer.params.clone(),
            optimizer: trainer.optimizer.clone(),
            iteration: trainer.iteration,
            rng: trainer.rng_state(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer::from_parts(self.params, self.optimizer, self.iteration, self.rng)
    }

    /// Fails with the differing fields when `requested` describes another
    /// network or schedule.
    pub fn check_architecture(&self, requested: &RunConfig) -> Result<()> {
        let diff = architecture_diff(&self.config, requested);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch(diff))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sections = [
            ("config", self.config.to_toml().into_bytes()),
            ("params", encode_params(&self.params)),
            ("adam", encode_adam(&self.optimizer)),
            ("state", encode_state(self.iteration, &self.rng)),
        ];
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, sections.len() as u32);
        for (name, payload) in &sections {
            put_str(&mut out, name);
            put_u64(&mut out, payload.len() as u64);
            out.extend_from_slice(payload);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |reason: String| Error::Integrity {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 20 {
            return Err(bad("file is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch (truncated or modified)".into()));
        }
        let mut r = Reader::new(&body[12..], path);
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let len = r.u64()? as usize;
            sections.insert(name, r.take(len)?);
        }
        r.finish()?;
        let section = |name: &str| {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| bad(format!("missing section `{name}`")))
        };
        let text = std::str::from_utf8(section("config")?)
            .map_err(|_| bad("config section is not UTF-8".into()))?;
        let config = RunConfig::from_toml(text)?;
        let params = decode_params(&mut Reader::new(section("params")?, path))?;
        let optimizer = decode_adam(&mut Reader::new(section("adam")?, path))?;
        let (iteration, rng) = decode_state(&mut Reader::new(section("state")?, path))?;
        let expected = param_shapes(&config.denoiser);
        let mismatched = expected.len() != params.len()
            || expected
                .iter()
                .any(|(n, s)| params.get(n).map(|t| t.shape() != s.as_slice()).unwrap_or(true));
        if mismatched {
            return Err(bad("parameter set does not match the stored config".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            iteration,
            rng,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for d in t.shape() {
            put_u64(&mut out, *d as u64);
        }
        put_f64s(&mut out, t.data());
    }
    out
}

fn encode_adam(adam: &Adam) -> Vec<u8> {
    let c = adam.config;
    let mut out = Vec::new();
    put_f64s(&mut out, &[c.lr, c.beta1, c.beta2, c.eps]);
    put_u64(&mut out, adam.steps());
    let (first, second) = adam.moments();
    put_u32(&mut out, first.len() as u32);
    for (name, m) in first {
        let v = &second[name];
        put_str(&mut out, name);
        put_u64(&mut out, m.len() as u64);
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }
    out
}

fn encode_state(iteration: u64, rng: &RngState) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, iteration);
    out.extend_from_slice(&rng.seed);
    put_u64(&mut out, rng.stream);
    out.extend_from_slice(&rng.word_pos.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Integrity {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("length field {n} runs past the end of its section")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn decode_params(r: &mut Reader) -> Result<ParamStore> {
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let n = n.ok_or_else(|| r.err(format!("shape of `{name}` overflows")))?;
        let data = r.f64s(n)?;
        store.insert(name, Tensor::new(shape, data)?);
    }
    r.finish()?;
    Ok(store)
}

fn decode_adam(r: &mut Reader) -> Result<Adam> {
    let c = r.f64s(4)?;
    let config = AdamConfig {
        lr: c[0],
        beta1: c[1],
        beta2: c[2],
        eps: c[3],
    };
    let step = r.u64()?;
    let count = r.u32()?;
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let n = r.u64()? as usize;
        first.insert(name.clone(), r.f64s(n)?);
        second.insert(name, r.f64s(n)?);
    }
    r.finish()?;
    Ok(Adam::from_state(config, step, first, second))
}

fn decode_state(r: &mut Reader) -> Result<(u64, RngState)> {
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    r.finish()?;
    Ok((
        iteration,
        RngState {
            seed,
            stream,
            word_pos,
        },
    ))
}
