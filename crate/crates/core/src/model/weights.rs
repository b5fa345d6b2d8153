//! Parameter storage: seeded initialization and the manifest + blob format.
//!
//! The manifest is TOML:
//!
//! ```toml
//! format = "mixedq-weights"
//! version = 1
//! blob = "weights.bin"
//!
//! [config]
//! depth = 2
//! # ...
//!
//! [[tensor]]
//! name = "embed.w"
//! shape = [16, 32]
//! offset = 0
//! length = 2062
//! ```
//!
//! The blob is the concatenation of raw tensor records; `offset` and
//! `length` locate each record in bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::AffineParams;
use crate::quant::Tensor;
use crate::tensor_io;

const FORMAT: &str = "mixedq-weights";
const FORMAT_VERSION: u32 = 1;

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: AffineParams,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: AffineParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub final_ln: AffineParams,
    pub head: Linear,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Normal samples rounded to `f32` so that saved weights reload bit-exactly.
    fn normal(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Result<Tensor> {
        let dist = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| dist.sample(&mut self.rng) as f32 as f64)
            .collect();
        Tensor::new(data, shape)
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.normal(vec![fan_in, fan_out], 0.0, 1.0 / (fan_in as f64).sqrt())?,
            b: Tensor::zeros(vec![fan_out])?,
        })
    }

    fn norm(&mut self, dim: usize) -> Result<AffineParams> {
        AffineParams::new(
            self.normal(vec![dim], 1.0, 0.1)?,
            self.normal(vec![dim], 0.0, 0.05)?,
        )
    }
}

impl Weights {
    pub fn init(cfg: &ModelConfig) -> Result<Weights> {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let embed = init.linear(cfg.input_dim, d)?;
        let blocks = (0..cfg.depth)
            .map(|_| {
                Ok(Block {
                    ln1: init.norm(d)?,
                    qkv: init.linear(d, 3 * d)?,
                    proj: init.linear(d, d)?,
                    ln2: init.norm(d)?,
                    fc1: init.linear(d, hidden)?,
                    fc2: init.linear(hidden, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = init.norm(d)?;
        let head = init.linear(d, cfg.num_classes)?;
        Ok(Weights {
            embed,
            blocks,
            final_ln,
            head,
        })
    }

    /// Named tensors in manifest order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.embed.w),
            ("embed.b".to_string(), &self.embed.b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gamma"), &b.ln1.gamma),
                (format!("{p}.ln1.beta"), &b.ln1.beta),
                (format!("{p}.qkv.w"), &b.qkv.w),
                (format!("{p}.qkv.b"), &b.qkv.b),
                (format!("{p}.proj.w"), &b.proj.w),
                (format!("{p}.proj.b"), &b.proj.b),
                (format!("{p}.ln2.gamma"), &b.ln2.gamma),
                (format!("{p}.ln2.beta"), &b.ln2.beta),
                (format!("{p}.fc1.w"), &b.fc1.w),
                (format!("{p}.fc1.b"), &b.fc1.b),
                (format!("{p}.fc2.w"), &b.fc2.w),
                (format!("{p}.fc2.b"), &b.fc2.b),
            ]);
        }
        out.extend([
            ("final_ln.gamma".to_string(), &self.final_ln.gamma),
            ("final_ln.beta".to_string(), &self.final_ln.beta),
            ("head.w".to_string(), &self.head.w),
            ("head.b".to_string(), &self.head.b),
        ]);
        out
    }

    /// Rebuilds from tensors in manifest order, checking every shape against `cfg`.
    fn from_ordered(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Weights> {
        let expected = Weights::init_shapes(cfg);
        if tensors.len() != expected.len() {
            return Err(Error::parse(format!(
                "manifest lists {} tensors, config needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((name, t), (want_name, want_shape)) in tensors.iter().zip(&expected) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::parse(format!(
                    "tensor {name} {:?} does not match config entry {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("count checked");
        let linear = |w: Tensor, b: Tensor| Linear { w, b };
        let embed = linear(next(), next());
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(Block {
                ln1: AffineParams::new(next(), next())?,
                qkv: linear(next(), next()),
                proj: linear(next(), next()),
                ln2: AffineParams::new(next(), next())?,
                fc1: linear(next(), next()),
                fc2: linear(next(), next()),
            });
        }
        let final_ln = AffineParams::new(next(), next())?;
        let head = linear(next(), next());
        Ok(Weights {
            embed,
            blocks,
            final_ln,
            head,
        })
    }

    fn init_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        let mut out = vec![
            ("embed.w".to_string(), vec![cfg.input_dim, d]),
            ("embed.b".to_string(), vec![d]),
        ];
        for i in 0..cfg.depth {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gamma"), vec![d]),
                (format!("{p}.ln1.beta"), vec![d]),
                (format!("{p}.qkv.w"), vec![d, 3 * d]),
                (format!("{p}.qkv.b"), vec![3 * d]),
                (format!("{p}.proj.w"), vec![d, d]),
                (format!("{p}.proj.b"), vec![d]),
                (format!("{p}.ln2.gamma"), vec![d]),
                (format!("{p}.ln2.beta"), vec![d]),
                (format!("{p}.fc1.w"), vec![d, h]),
                (format!("{p}.fc1.b"), vec![h]),
                (format!("{p}.fc2.w"), vec![h, d]),
                (format!("{p}.fc2.b"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gamma".to_string(), vec![d]),
            ("final_ln.beta".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, cfg.num_classes]),
            ("head.b".to_string(), vec![cfg.num_classes]),
        ]);
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    config: ModelConfig,
    tensor: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes the manifest at `path` and the blob next to it with extension `.bin`.
pub fn save(cfg: &ModelConfig, weights: &Weights, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in weights.named() {
        let rec = tensor_io::to_bytes(t);
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
            length: rec.len() as u64,
        });
        bytes.extend_from_slice(&rec);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        blob: blob
            .file_name()
            .expect("manifest path has a file name")
            .to_string_lossy()
            .into_owned(),
        config: cfg.clone(),
        tensor: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::parse(e.to_string()))?;
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, Weights)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::parse(format!(
            "unsupported weights format {:?} version {}",
            manifest.format, manifest.version
        )));
    }
    manifest.config.validate()?;
    let blob = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensor.len());
    for e in manifest.tensor {
        let start = usize::try_from(e.offset).map_err(|_| Error::parse("offset overflow"))?;
        let end = start
            .checked_add(usize::try_from(e.length).map_err(|_| Error::parse("length overflow"))?)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::parse(format!("tensor {} lies outside the blob", e.name)))?;
        let (t, used) = tensor_io::decode(&bytes[start..end])?;
        if used != end - start || t.shape() != e.shape.as_slice() {
            return Err(Error::parse(format!(
                "tensor {} record disagrees with its manifest entry",
                e.name
            )));
        }
        tensors.push((e.name, t));
    }
    let weights = Weights::from_ordered(&manifest.config, tensors)?;
    Ok((manifest.config, weights))
}
