//! Named parameter blocks, seeded initialization and the weight archive.
//!
//! Archive layout: magic `TSFA`, `u64` seed, `u32` block count, then per
//! block a `u32` name length, the UTF-8 name and one TSF1 tensor. Blocks are
//! written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{open_existing, read_tsf1, write_tsf1};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"TSFA";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "block shape {shape:?} with {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Kind of a learned layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Weight `(out, in / groups, k, k)` and bias `(out)`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
    },
    /// Weight `(out, in)` and bias `(out)`.
    Linear { inputs: usize, outputs: usize },
    /// Channel layer norm: `gamma` (ones) and `beta` (zeros).
    Norm { channels: usize },
    /// Per-channel multiplicative scale, initialized to ones.
    Scale { channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups: 1,
            },
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv {
                in_ch: channels,
                out_ch: channels,
                kernel,
                groups: channels,
            },
        }
    }

    pub fn linear(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Linear { inputs, outputs },
        }
    }

    pub fn norm(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Norm { channels },
        }
    }

    pub fn scale(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Scale { channels },
        }
    }

    /// Block names and shapes this layer owns.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>)> {
        let n = &self.name;
        match self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups,
            } => vec![
                (format!("{n}.weight"), vec![out_ch, in_ch / groups, kernel, kernel]),
                (format!("{n}.bias"), vec![out_ch]),
            ],
            LayerKind::Linear { inputs, outputs } => vec![
                (format!("{n}.weight"), vec![outputs, inputs]),
                (format!("{n}.bias"), vec![outputs]),
            ],
            LayerKind::Norm { channels } => vec![
                (format!("{n}.gamma"), vec![channels]),
                (format!("{n}.beta"), vec![channels]),
            ],
            LayerKind::Scale { channels } => vec![(format!("{n}.scale"), vec![channels])],
        }
    }
}

/// All learned weights, keyed by block name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    blocks: BTreeMap<String, ParamBlock>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic initialization: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// (rounded to f32 so archives round-trip exactly), zero biases.
pub fn init_params(specs: &[LayerSpec], seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::empty(seed);
    for spec in specs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
        for (block_name, shape) in spec.blocks() {
            let block = match spec.kind {
                LayerKind::Conv { .. } | LayerKind::Linear { .. } if block_name.ends_with(".weight") => {
                    let fan_in: usize = shape[1..].iter().product();
                    // shrink so f32 rounding cannot leave the interval
                    let bound = (1.0 - 1e-6) / (fan_in.max(1) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| rng.random_range(-bound..=bound) as f32 as f64)
                        .collect();
                    ParamBlock { shape, data }
                }
                LayerKind::Norm { .. } if block_name.ends_with(".gamma") => ParamBlock::filled(shape, 1.0),
                LayerKind::Scale { .. } => ParamBlock::filled(shape, 1.0),
                _ => ParamBlock::zeros(shape),
            };
            store.insert(block_name, block)?;
        }
    }
    Ok(store)
}

impl ParamStore {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            blocks: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: String, block: ParamBlock) -> Result<()> {
        if !block.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter block {name}")));
        }
        if self.blocks.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.blocks.insert(name, block);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamBlock> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamBlock> {
        self.blocks
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn weight(&self, layer: &str) -> Result<&ParamBlock> {
        self.get(&format!("{layer}.weight"))
    }

    pub fn bias(&self, layer: &str) -> Result<&ParamBlock> {
        self.get(&format!("{layer}.bias"))
    }

    /// Set every block owned by `layer` (weight and bias) to zero.
    pub fn zero_layer(&mut self, layer: &str) -> Result<()> {
        let prefix = format!("{layer}.");
        let mut hit = false;
        for (name, block) in self.blocks.iter_mut() {
            if name.starts_with(&prefix) {
                block.data.iter_mut().for_each(|v| *v = 0.0);
                hit = true;
            }
        }
        if hit {
            Ok(())
        } else {
            Err(Error::MissingParam(layer.to_string()))
        }
    }

    /// Check that every block of `specs` is present with the declared shape.
    pub fn check_layout(&self, specs: &[LayerSpec]) -> Result<()> {
        for spec in specs {
            for (name, shape) in spec.blocks() {
                let block = self.get(&name)?;
                if block.shape != shape {
                    return Err(Error::shape(format!(
                        "parameter {name}: expected {shape:?}, found {:?}",
                        block.shape
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_archive(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ARCHIVE_MAGIC);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, block) in &self.blocks {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            write_tsf1(&mut buf, &block.shape, &block.data)?;
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_archive(mut r: impl Read) -> Result<ParamStore> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|e| Error::format("weight archive", format!("truncated header: {e}")))?;
        if &head[..4] != ARCHIVE_MAGIC {
            return Err(Error::format("weight archive", "bad magic"));
        }
        let seed = u64::from_le_bytes(head[4..12].try_into().unwrap());
        let count = u32::from_le_bytes(head[12..16].try_into().unwrap());
        let mut store = ParamStore::empty(seed);
        for _ in 0..count {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)
                .map_err(|e| Error::format("weight archive", format!("truncated name: {e}")))?;
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut name)
                .map_err(|e| Error::format("weight archive", format!("truncated name: {e}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("weight archive", "block name is not UTF-8"))?;
            let (shape, data) = read_tsf1(&mut r)?;
            store.insert(name, ParamBlock { shape, data })?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_archive(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let f = open_existing(path.as_ref())?;
        ParamStore::read_archive(std::io::BufReader::new(f))
    }
}
