//! Pre-norm ViT encoder with a float path and an integer path.
//!
//! Each block is `x + MHSA(LN(x))` followed by `x + MLP(LN(x))`; a final
//! LayerNorm, mean pooling over tokens and a linear head produce logits.
//! Non-linear layers are numbered in forward order: block `b` owns
//! `4b` (LayerNorm), `4b+1` (softmax), `4b+2` (LayerNorm), `4b+3` (GELU), and
//! the final LayerNorm is `4 * depth`.

mod fp;
mod int;
pub mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernels::{calibrate_layernorm, AffineParams, CalibStats, MethodId, OpKind};
use crate::quant::Tensor;
pub use weights::{Block, Linear, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seq_len: usize,
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub bits: u32,
    pub seed: u64,
}

fn default_classes() -> usize {
    10
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 2,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 4.0,
            seq_len: 16,
            input_dim: 16,
            num_classes: default_classes(),
            bits: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.seq_len < 2 {
            return fail(format!("seq_len {} must be >= 2", self.seq_len));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return fail("input_dim and num_classes must be >= 1".into());
        }
        if self.bits != 6 && self.bits != 8 {
            return fail(format!("bits must be 6 or 8, got {}", self.bits));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Number of (softmax, GELU, LayerNorm) layers.
    pub fn layer_counts(&self) -> LayerCounts {
        LayerCounts {
            softmax: self.depth,
            gelu: self.depth,
            layernorm: 2 * self.depth + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCounts {
    pub softmax: usize,
    pub gelu: usize,
    pub layernorm: usize,
}

impl LayerCounts {
    pub fn get(&self, kind: OpKind) -> usize {
        match kind {
            OpKind::Softmax => self.softmax,
            OpKind::Gelu => self.gelu,
            OpKind::LayerNorm => self.layernorm,
        }
    }

    pub fn total(&self) -> usize {
        self.softmax + self.gelu + self.layernorm
    }
}

/// A non-linear layer, rendered `"{index}.{kind}"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub index: usize,
    pub kind: OpKind,
}

impl LayerId {
    pub fn new(index: usize, kind: OpKind) -> Self {
        LayerId { index, kind }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.index, self.kind)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (i, k) = s
            .split_once('.')
            .ok_or_else(|| Error::parse(format!("layer id {s:?} is not \"index.kind\"")))?;
        let index = i
            .parse()
            .map_err(|_| Error::parse(format!("layer id {s:?} has a bad index")))?;
        Ok(LayerId {
            index,
            kind: k.parse()?,
        })
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Non-linear layers of a model with the given depth, in forward order.
pub fn layer_ids(depth: usize) -> Vec<LayerId> {
    let mut out = Vec::with_capacity(4 * depth + 1);
    for b in 0..depth {
        out.extend([
            LayerId::new(4 * b, OpKind::LayerNorm),
            LayerId::new(4 * b + 1, OpKind::Softmax),
            LayerId::new(4 * b + 2, OpKind::LayerNorm),
            LayerId::new(4 * b + 3, OpKind::Gelu),
        ]);
    }
    out.push(LayerId::new(4 * depth, OpKind::LayerNorm));
    out
}

/// Method per non-linear layer, serialized as a JSON object in layer order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AssignmentMap(BTreeMap<LayerId, MethodId>);

impl AssignmentMap {
    pub fn new() -> Self {
        AssignmentMap::default()
    }

    /// Inserts an entry, rejecting methods the layer kind does not support.
    pub fn insert(&mut self, layer: LayerId, method: MethodId) -> Result<()> {
        if !layer.kind.supports(method) {
            return Err(Error::invalid(format!(
                "{layer} cannot use {method}: {} supports {:?}",
                layer.kind,
                layer.kind.methods()
            )));
        }
        self.0.insert(layer, method);
        Ok(())
    }

    /// Every layer uses `method`; GELU layers fall back to `IBert` for `FqVit`.
    pub fn uniform(layers: &[LayerId], method: MethodId) -> Self {
        let map = layers
            .iter()
            .map(|&l| {
                let m = if l.kind.supports(method) {
                    method
                } else {
                    MethodId::IBert
                };
                (l, m)
            })
            .collect();
        AssignmentMap(map)
    }

    pub fn get(&self, layer: LayerId) -> Option<MethodId> {
        self.0.get(&layer).copied()
    }

    pub fn method(&self, layer: LayerId) -> Result<MethodId> {
        self.get(layer)
            .ok_or_else(|| Error::invalid(format!("assignment has no entry for layer {layer}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerId, MethodId)> + '_ {
        self.0.iter().map(|(&l, &m)| (l, m))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks that the map covers exactly `layers`.
    pub fn validate(&self, layers: &[LayerId]) -> Result<()> {
        for l in layers {
            self.method(*l)?;
        }
        if let Some((extra, _)) = self.0.iter().find(|(l, _)| !layers.contains(l)) {
            return Err(Error::invalid(format!(
                "assignment names layer {extra}, which the model does not have"
            )));
        }
        Ok(())
    }

    /// Layers per method, for each kind.
    pub fn histogram(&self) -> BTreeMap<OpKind, BTreeMap<MethodId, usize>> {
        let mut h: BTreeMap<OpKind, BTreeMap<MethodId, usize>> = OpKind::ALL
            .iter()
            .map(|&k| (k, k.methods().iter().map(|&m| (m, 0)).collect()))
            .collect();
        for (l, m) in self.iter() {
            *h.entry(l.kind).or_default().entry(m).or_default() += 1;
        }
        h
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("string keys and values")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("assignment: {e}")))
    }
}

impl Serialize for AssignmentMap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_map(self.0.iter().map(|(l, m)| (l.to_string(), m)))
    }
}

impl<'de> Deserialize<'de> for AssignmentMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, MethodId>::deserialize(d)?;
        let mut map = AssignmentMap::new();
        for (k, m) in raw {
            let id: LayerId = k.parse().map_err(D::Error::custom)?;
            map.insert(id, m).map_err(D::Error::custom)?;
        }
        Ok(map)
    }
}

/// Inputs and outputs of one non-linear layer, one tensor per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: LayerId,
    pub inputs: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
}

/// Per-layer activations in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
}

impl ActivationTrace {
    pub fn get(&self, layer: LayerId) -> Option<&LayerTrace> {
        self.layers.iter().find(|t| t.layer == layer)
    }

    /// Collects per-sample traces (each in layer order) into per-layer batches.
    fn from_samples(ids: &[LayerId], samples: Vec<Vec<(Tensor, Tensor)>>) -> Self {
        let mut layers: Vec<LayerTrace> = ids
            .iter()
            .map(|&layer| LayerTrace {
                layer,
                inputs: Vec::with_capacity(samples.len()),
                outputs: Vec::with_capacity(samples.len()),
            })
            .collect();
        for sample in samples {
            for (lt, (i, o)) in layers.iter_mut().zip(sample) {
                lt.inputs.push(i);
                lt.outputs.push(o);
            }
        }
        ActivationTrace { layers }
    }
}

#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights,
    layers: Vec<LayerId>,
    calib: OnceLock<Vec<CalibStats>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        let calib = OnceLock::new();
        if let Some(c) = self.calib.get() {
            let _ = calib.set(c.clone());
        }
        Model {
            cfg: self.cfg.clone(),
            weights: self.weights.clone(),
            layers: self.layers.clone(),
            calib,
        }
    }
}

impl Model {
    /// Seeded model: normal weights with standard deviation `1/sqrt(fan_in)`.
    pub fn build(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let weights = Weights::init(&cfg)?;
        Ok(Model::assemble(cfg, weights))
    }

    /// Model from explicit weights; shapes must match `cfg`.
    pub fn from_weights(cfg: ModelConfig, weights: Weights) -> Result<Model> {
        cfg.validate()?;
        let expect = Weights::init(&cfg)?;
        for ((n, a), (_, b)) in weights.named().iter().zip(expect.named()) {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "weight {n} has shape {:?}, config needs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if weights.blocks.len() != cfg.depth {
            return Err(Error::invalid("block count does not match depth"));
        }
        Ok(Model::assemble(cfg, weights))
    }

    fn assemble(cfg: ModelConfig, weights: Weights) -> Model {
        let layers = layer_ids(cfg.depth);
        Model {
            cfg,
            weights,
            layers,
            calib: OnceLock::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }

    /// Non-linear layers in forward order.
    pub fn enumerate_nonlinear_layers(&self) -> &[LayerId] {
        &self.layers
    }

    /// Affine parameters of the `n`-th LayerNorm in forward order.
    fn layernorm_params(&self, n: usize) -> &AffineParams {
        let b = n / 2;
        match (self.weights.blocks.get(b), n % 2) {
            (Some(block), 0) => &block.ln1,
            (Some(block), _) => &block.ln2,
            (None, _) => &self.weights.final_ln,
        }
    }

    /// Calibrates the power-of-two-factor LayerNorms from the float activations
    /// of `x`. The first call wins; later calls leave the statistics unchanged
    /// and return `false`.
    pub fn calibrate(&self, x: &Tensor) -> Result<bool> {
        if self.calib.get().is_some() {
            return Ok(false);
        }
        let (_, trace) = self.forward_fp(x)?;
        self.calibrate_from_trace(&trace)
    }

    /// [`Model::calibrate`] from an existing float trace.
    pub fn calibrate_from_trace(&self, trace: &ActivationTrace) -> Result<bool> {
        if self.calib.get().is_some() {
            return Ok(false);
        }
        let d = self.cfg.embed_dim;
        let stats = trace
            .layers
            .iter()
            .filter(|t| t.layer.kind == OpKind::LayerNorm)
            .enumerate()
            .map(|(n, t)| {
                let rows: Vec<f64> = t
                    .inputs
                    .iter()
                    .flat_map(|s| s.data().iter().copied())
                    .collect();
                let shape = vec![rows.len() / d, d];
                calibrate_layernorm(
                    &Tensor::new(rows, shape)?,
                    self.layernorm_params(n),
                    self.cfg.bits,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if stats.len() != self.cfg.layer_counts().layernorm {
            return Err(Error::invalid("trace does not cover every LayerNorm"));
        }
        Ok(self.calib.set(stats).is_ok())
    }

    pub fn calibration(&self) -> Option<&[CalibStats]> {
        self.calib.get().map(Vec::as_slice)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let want = [self.cfg.seq_len, self.cfg.input_dim];
        if x.shape().len() != 3 || x.shape()[1..] != want {
            return Err(Error::invalid(format!(
                "input shape {:?} must be (batch, {}, {})",
                x.shape(),
                want[0],
                want[1]
            )));
        }
        Ok(x.shape()[0])
    }

    /// Float forward pass; returns logits `(batch, classes)` and the trace.
    pub fn forward_fp(&self, x: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        self.check_input(x)?;
        fp::forward(self, x)
    }

    /// Integer forward pass with non-linear layers dispatched per `a`.
    pub fn forward_quant(
        &self,
        x: &Tensor,
        a: &AssignmentMap,
    ) -> Result<(Tensor, ActivationTrace)> {
        self.check_input(x)?;
        a.validate(&self.layers)?;
        int::forward(self, x, a)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights::save(&self.cfg, &self.weights, path)
    }

    pub fn load_weights(path: &Path) -> Result<Model> {
        let (cfg, w) = weights::load(path)?;
        Model::from_weights(cfg, w)
    }
}

/// Splits a `(batch, ...)` tensor into per-sample tensors.
pub(crate) fn samples(x: &Tensor) -> Vec<Tensor> {
    let inner: Vec<usize> = x.shape()[1..].to_vec();
    let n: usize = inner.iter().product();
    x.data()
        .chunks(n)
        .map(|c| Tensor::new(c.to_vec(), inner.clone()).expect("chunk matches shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_numbering() {
        let ids = layer_ids(1);
        let names: Vec<String> = ids.iter().map(|l| l.to_string()).collect();
        assert_eq!(
            names,
            [
                "0.layernorm",
                "1.softmax",
                "2.layernorm",
                "3.gelu",
                "4.layernorm"
            ]
        );
        let ids = layer_ids(12);
        let count = |k| ids.iter().filter(|l| l.kind == k).count();
        assert_eq!(count(OpKind::Softmax), 12);
        assert_eq!(count(OpKind::Gelu), 12);
        assert_eq!(count(OpKind::LayerNorm), 25);
        assert!(ids.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn layer_id_parse() {
        let l: LayerId = "13.softmax".parse().unwrap();
        assert_eq!(l, LayerId::new(13, OpKind::Softmax));
        assert!("softmax".parse::<LayerId>().is_err());
        assert!("x.gelu".parse::<LayerId>().is_err());
        assert!("1.relu".parse::<LayerId>().is_err());
    }

    #[test]
    fn assignment_rules_and_json() {
        let ids = layer_ids(1);
        let mut a = AssignmentMap::uniform(&ids, MethodId::FqVit);
        assert_eq!(a.get(LayerId::new(3, OpKind::Gelu)), Some(MethodId::IBert));
        assert!(a
            .insert(LayerId::new(3, OpKind::Gelu), MethodId::FqVit)
            .is_err());
        a.insert(LayerId::new(1, OpKind::Softmax), MethodId::IVit)
            .unwrap();
        let json = a.to_json();
        assert!(json.find("0.layernorm").unwrap() < json.find("4.layernorm").unwrap());
        assert_eq!(AssignmentMap::from_json(&json).unwrap(), a);
        assert!(AssignmentMap::from_json(r#"{"3.gelu": "fqvit"}"#).is_err());
        a.validate(&ids).unwrap();
        assert!(a.validate(&layer_ids(2)).is_err());
        assert!(a.validate(&ids[..3]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig {
                depth: 0,
                ..Default::default()
            },
            ModelConfig {
                heads: 3,
                ..Default::default()
            },
            ModelConfig {
                seq_len: 1,
                ..Default::default()
            },
            ModelConfig {
                bits: 4,
                ..Default::default()
            },
            ModelConfig {
                mlp_ratio: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
