//! Layer-wise quantization sensitivity and method selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{MethodId, OpKind};
use crate::model::{ActivationTrace, AssignmentMap, LayerCounts, LayerId, Model};
use crate::quant::Tensor;

/// Magnitude substituted for an infinite SQNR (zero noise or zero signal).
pub const SQNR_CAP_DB: f64 = 300.0;

/// Batch-averaged SQNR in dB: `20 log10(mean_i E[x_i^2] / E[(x_i - q_i)^2])`,
/// clamped to `±SQNR_CAP_DB`.
pub fn asqnr(x: &[Tensor], q: &[Tensor]) -> Result<f64> {
    if x.is_empty() || x.len() != q.len() {
        return Err(Error::invalid(format!(
            "asqnr needs equal non-empty batches, got {} and {}",
            x.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in x.iter().zip(q) {
        if a.shape() != b.shape() {
            return Err(Error::invalid(format!(
                "sample shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = a.len() as f64;
        let signal = a.data().iter().map(|v| v * v).sum::<f64>() / n;
        let noise = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            / n;
        total += if noise == 0.0 {
            f64::INFINITY
        } else {
            signal / noise
        };
    }
    let db = 20.0 * (total / x.len() as f64).log10();
    Ok(db.clamp(-SQNR_CAP_DB, SQNR_CAP_DB))
}

/// `asqnr_out - asqnr_in`.
pub fn sqnr_diff(asqnr_out: f64, asqnr_in: f64) -> f64 {
    asqnr_out - asqnr_in
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecisionRule {
    /// Per layer, the method with the smallest `sqnr_diff`.
    #[serde(rename = "sqnr-diff")]
    SqnrDiff,
    /// Per layer, the method with the largest output ASQNR.
    #[serde(rename = "sqnr-output")]
    SqnrOutput,
}

impl DecisionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionRule::SqnrDiff => "sqnr-diff",
            DecisionRule::SqnrOutput => "sqnr-output",
        }
    }
}

impl fmt::Display for DecisionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecisionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sqnr-diff" => Ok(DecisionRule::SqnrDiff),
            "sqnr-output" => Ok(DecisionRule::SqnrOutput),
            _ => Err(Error::parse(format!(
                "unknown decision rule {s:?} (expected sqnr-diff or sqnr-output)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    #[serde(rename = "layer_id")]
    pub layer: LayerId,
    pub op_kind: OpKind,
    pub method: MethodId,
    #[serde(rename = "asqnr_in_db")]
    pub asqnr_in: f64,
    #[serde(rename = "asqnr_out_db")]
    pub asqnr_out: f64,
    #[serde(rename = "sqnr_diff_db")]
    pub sqnr_diff: f64,
}

impl SensitivityRecord {
    pub fn new(layer: LayerId, method: MethodId, asqnr_in: f64, asqnr_out: f64) -> Self {
        SensitivityRecord {
            layer,
            op_kind: layer.kind,
            method,
            asqnr_in,
            asqnr_out,
            sqnr_diff: sqnr_diff(asqnr_out, asqnr_in),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub records: Vec<SensitivityRecord>,
}

impl SensitivityTable {
    /// Layers present in the table, in index order.
    pub fn layers(&self) -> Vec<LayerId> {
        let mut l: Vec<LayerId> = self.records.iter().map(|r| r.layer).collect();
        l.sort();
        l.dedup();
        l
    }

    pub fn get(&self, layer: LayerId, method: MethodId) -> Option<&SensitivityRecord> {
        self.records
            .iter()
            .find(|r| r.layer == layer && r.method == method)
    }

    /// Checks that every listed layer has exactly one record per supported method.
    pub fn check_complete(&self) -> Result<()> {
        let mut seen: BTreeMap<(LayerId, MethodId), usize> = BTreeMap::new();
        for r in &self.records {
            if r.op_kind != r.layer.kind || !r.layer.kind.supports(r.method) {
                return Err(Error::invalid(format!(
                    "record {} / {} / {} is not a valid combination",
                    r.layer, r.op_kind, r.method
                )));
            }
            *seen.entry((r.layer, r.method)).or_default() += 1;
        }
        for l in self.layers() {
            for &m in l.kind.methods() {
                match seen.get(&(l, m)) {
                    Some(1) => {}
                    Some(n) => return Err(Error::invalid(format!("{n} records for {l} / {m}"))),
                    None => return Err(Error::invalid(format!("no record for {l} / {m}"))),
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<SensitivityRecord>, _>>()
            .map_err(|e| Error::parse(format!("sensitivity csv: {e}")))?;
        for rec in &records {
            if (rec.sqnr_diff - sqnr_diff(rec.asqnr_out, rec.asqnr_in)).abs() > 1e-9 {
                return Err(Error::parse(format!(
                    "record {} / {}: sqnr_diff_db is not asqnr_out_db - asqnr_in_db",
                    rec.layer, rec.method
                )));
            }
        }
        Ok(SensitivityTable { records })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite floats")
    }
}

pub(crate) fn concat_traces(traces: Vec<ActivationTrace>) -> ActivationTrace {
    let mut it = traces.into_iter();
    let mut acc = it.next().expect("at least one batch");
    for t in it {
        for (a, b) in acc.layers.iter_mut().zip(t.layers) {
            a.inputs.extend(b.inputs);
            a.outputs.extend(b.outputs);
        }
    }
    acc
}

/// Measures every (layer, method) pair against the float model.
///
/// The first batch also calibrates the model if it is not yet calibrated.
/// The three uniform-method runs execute in parallel.
pub fn analyze(m: &Model, data: &[Tensor]) -> Result<SensitivityTable> {
    if data.is_empty() {
        return Err(Error::invalid("analysis needs at least one batch"));
    }
    let fp: Vec<ActivationTrace> = data
        .iter()
        .map(|x| m.forward_fp(x).map(|(_, t)| t))
        .collect::<Result<_>>()?;
    m.calibrate_from_trace(&fp[0])?;
    let fp = concat_traces(fp);
    let layers = m.enumerate_nonlinear_layers();
    let quant: Vec<(MethodId, ActivationTrace)> = MethodId::ALL
        .par_iter()
        .map(|&method| {
            let a = AssignmentMap::uniform(layers, method);
            let traces = data
                .iter()
                .map(|x| m.forward_quant(x, &a).map(|(_, t)| t))
                .collect::<Result<Vec<_>>>()?;
            Ok((method, concat_traces(traces)))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (li, f) in fp.layers.iter().enumerate() {
        for (method, qt) in &quant {
            if !f.layer.kind.supports(*method) {
                continue;
            }
            let q = &qt.layers[li];
            let a_in = asqnr(&f.inputs, &q.inputs)?;
            let a_out = asqnr(&f.outputs, &q.outputs)?;
            records.push(SensitivityRecord::new(f.layer, *method, a_in, a_out));
        }
    }
    Ok(SensitivityTable { records })
}

/// Picks one method per layer. Ties go to the earlier method in
/// `MethodId` order.
pub fn select_assignment(t: &SensitivityTable, rule: DecisionRule) -> Result<AssignmentMap> {
    t.check_complete()?;
    let mut out = AssignmentMap::new();
    for layer in t.layers() {
        let mut best: Option<(MethodId, f64)> = None;
        for &m in layer.kind.methods() {
            let r = t.get(layer, m).expect("table is complete");
            let better = match (best, rule) {
                (None, _) => true,
                (Some((_, b)), DecisionRule::SqnrDiff) => r.sqnr_diff < b,
                (Some((_, b)), DecisionRule::SqnrOutput) => r.asqnr_out > b,
            };
            if better {
                let key = match rule {
                    DecisionRule::SqnrDiff => r.sqnr_diff,
                    DecisionRule::SqnrOutput => r.asqnr_out,
                };
                best = Some((m, key));
            }
        }
        out.insert(layer, best.expect("every kind has methods").0)?;
    }
    Ok(out)
}

/// `3^softmax * 3^layernorm * 2^gelu`.
pub fn search_space_size(c: LayerCounts) -> BigUint {
    OpKind::ALL.iter().fold(BigUint::from(1u32), |acc, &k| {
        acc * BigUint::from(k.option_count()).pow(c.get(k) as u32)
    })
}

/// Records needed for a complete table: the sum over kinds of options times layers.
pub fn evaluation_count(c: LayerCounts) -> u64 {
    OpKind::ALL
        .iter()
        .map(|&k| (k.option_count() * c.get(k)) as u64)
        .sum()
}
