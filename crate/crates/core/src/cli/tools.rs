use std::fmt;
use std::path::Path;

use num_bigint::BigUint;
use serde::Serialize;

use crate::bench::{run_bench, run_kernel, to_csv, to_text_table, BenchRow, BenchSpec};
use crate::error::{Error, Result};
use crate::kernels::{self, MethodId, OpKind, IVIT_ISQRT_ITERS};
use crate::model::LayerCounts;
use crate::quant::{compute_scale, dequantize, quantize, Tensor};
use crate::sensitivity::{evaluation_count, search_space_size};
use crate::tensor_io;

use super::config::RunConfig;
use super::pipeline::{create_dir, write, Provenance};

#[derive(Debug, Serialize)]
struct BenchReport<'a> {
    provenance: Provenance,
    spec: &'a BenchSpec,
    rows: &'a [BenchRow],
}

/// Runs the sweep; writes `bench.csv`, `bench.txt` and `bench.json`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let rows = run_bench(&cfg.bench)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write(dir, "bench.csv", &to_csv(&rows)?)?;
    write(dir, "bench.txt", &to_text_table(&rows))?;
    let report = BenchReport {
        provenance: Provenance::new(cfg),
        spec: &cfg.bench,
        rows: &rows,
    };
    let mut j = serde_json::to_string_pretty(&report).expect("serializable");
    j.push('\n');
    write(dir, "bench.json", &j)?;
    Ok(rows)
}

/// Kernel names accepted by `kernels`.
pub const KERNEL_NAMES: [&str; 11] = [
    "isqrt",
    "shift_exp",
    "poly_iexp",
    "softmax_ibert",
    "softmax_fqvit",
    "softmax_ivit",
    "gelu_ibert",
    "gelu_ivit",
    "layernorm_ibert",
    "layernorm_fqvit",
    "layernorm_ivit",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSummary {
    pub kernel: String,
    pub count: usize,
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    /// Only for kernels whose reference is bounded away from zero.
    pub max_rel_err: Option<f64>,
    pub mismatches: usize,
}

impl fmt::Display for KernelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kernel == "isqrt" {
            if self.mismatches == 0 {
                return writeln!(f, "isqrt: exact for all inputs ({} checked)", self.count);
            }
            return writeln!(
                f,
                "isqrt: {} of {} inputs differ",
                self.mismatches, self.count
            );
        }
        writeln!(f, "{}: {} values", self.kernel, self.count)?;
        writeln!(f, "max abs error: {:.6e}", self.max_abs_err)?;
        writeln!(f, "mean abs error: {:.6e}", self.mean_abs_err)?;
        if let Some(r) = self.max_rel_err {
            writeln!(f, "max rel error: {:.4}%", 100.0 * r)?;
        }
        Ok(())
    }
}

/// Where `kernels` reads its input.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelInput {
    /// `n` evenly spaced points on `[lo, hi]`; for `isqrt` every integer if `n` is absent.
    Grid {
        lo: f64,
        hi: f64,
        n: Option<usize>,
    },
    File(std::path::PathBuf),
}

fn parse_kernel(name: &str) -> Result<Option<(OpKind, MethodId)>> {
    if !KERNEL_NAMES.contains(&name) {
        return Err(Error::InvalidInput(format!(
            "unknown kernel {name:?}; valid names: {}",
            KERNEL_NAMES.join(", ")
        )));
    }
    Ok(name.split_once('_').and_then(|(k, m)| {
        let kind: OpKind = k.parse().ok()?;
        let method: MethodId = m.parse().ok()?;
        Some((kind, method))
    }))
}

fn grid(lo: f64, hi: f64, n: usize) -> Result<Tensor> {
    if lo.is_nan() || hi.is_nan() || lo > hi || n == 0 || (n == 1 && lo != hi) {
        return Err(Error::invalid(format!(
            "bad grid [{lo}, {hi}] with {n} points"
        )));
    }
    let step = if n > 1 {
        (hi - lo) / (n - 1) as f64
    } else {
        0.0
    };
    Tensor::from_vec((0..n).map(|i| lo + step * i as f64).collect())
}

fn summarize(name: &str, reference: &Tensor, out: &Tensor, relative: bool) -> KernelSummary {
    let n = reference.len();
    let mut max_abs = 0.0f64;
    let mut sum_abs = 0.0;
    let mut max_rel = 0.0f64;
    for (r, o) in reference.data().iter().zip(out.data()) {
        let e = (o - r).abs();
        max_abs = max_abs.max(e);
        sum_abs += e;
        if relative {
            max_rel = max_rel.max(e / r.abs());
        }
    }
    KernelSummary {
        kernel: name.to_string(),
        count: n,
        max_abs_err: max_abs,
        mean_abs_err: sum_abs / n.max(1) as f64,
        max_rel_err: relative.then_some(max_rel),
        mismatches: 0,
    }
}

fn isqrt_check(input: &KernelInput) -> Result<(KernelSummary, Tensor)> {
    let values: Vec<u64> = match input {
        KernelInput::Grid { lo, hi, n: None } => {
            if *lo < 0.0 || lo > hi || *hi > u32::MAX as f64 {
                return Err(Error::invalid(
                    "isqrt grid must satisfy 0 <= lo <= hi < 2^32",
                ));
            }
            (lo.ceil() as u64..=hi.floor() as u64).collect()
        }
        KernelInput::Grid { lo, hi, n: Some(n) } => grid(*lo, *hi, *n)?
            .data()
            .iter()
            .map(|v| v.max(0.0).round() as u64)
            .collect(),
        KernelInput::File(p) => tensor_io::read_tensor(p)?
            .data()
            .iter()
            .map(|v| v.max(0.0).round() as u64)
            .collect(),
    };
    let mut mismatches = 0;
    let mut out = Vec::with_capacity(values.len());
    for &v in &values {
        let r = kernels::isqrt_newton(v, IVIT_ISQRT_ITERS);
        if r.checked_mul(r).is_none_or(|sq| sq > v) || (r + 1) * (r + 1) <= v {
            mismatches += 1;
        }
        out.push(r as f64);
    }
    let summary = KernelSummary {
        kernel: "isqrt".into(),
        count: values.len(),
        max_abs_err: 0.0,
        mean_abs_err: 0.0,
        max_rel_err: None,
        mismatches,
    };
    Ok((summary, Tensor::from_vec(out)?))
}

/// Runs one kernel on `input` quantized at `bits` and compares it with the
/// float function of the dequantized input. Writes the dequantized output to
/// `output` if given.
pub fn cmd_kernels(
    name: &str,
    input: &KernelInput,
    bits: u32,
    output: Option<&Path>,
) -> Result<KernelSummary> {
    let pair = parse_kernel(name)?;
    let (summary, out) = if name == "isqrt" {
        isqrt_check(input)?
    } else {
        let x = match input {
            KernelInput::Grid { lo, hi, n } => grid(*lo, *hi, n.unwrap_or(1001))?,
            KernelInput::File(p) => tensor_io::read_tensor(p)?,
        };
        // Row-wise kernels see a 1-D input as a single row.
        let x = if x.shape().len() == 1 && pair.is_some_and(|(k, _)| k != OpKind::Gelu) {
            let n = x.len();
            x.reshape(vec![1, n])?
        } else {
            x
        };
        run_cell(name, pair, &x, bits)?
    };
    if let Some(p) = output {
        tensor_io::write_tensor(p, &out)?;
    }
    Ok(summary)
}

fn run_cell(
    name: &str,
    pair: Option<(OpKind, MethodId)>,
    x: &Tensor,
    bits: u32,
) -> Result<(KernelSummary, Tensor)> {
    match pair {
        Some((kind, method)) => {
            let (out, reference) = run_kernel(kind, method, x, bits)?;
            Ok((summarize(name, &reference, &out, false), out))
        }
        None => {
            let q = quantize(x, compute_scale(x, bits)?);
            let out = match name {
                "shift_exp" => kernels::shift_exp(&q)?,
                _ => kernels::poly_iexp(&q)?,
            }
            .dequantize();
            let reference = dequantize(&q).map(f64::exp)?;
            Ok((summarize(name, &reference, &out, true), out))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub combinations: BigUint,
    pub evaluations: u64,
}

impl fmt::Display for SearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "search space: {}", self.combinations)?;
        writeln!(f, "evaluations: {}", self.evaluations)
    }
}

pub fn cmd_searchspace(softmax: usize, gelu: usize, layernorm: usize) -> SearchSpace {
    let c = LayerCounts {
        softmax,
        gelu,
        layernorm,
    };
    SearchSpace {
        combinations: search_space_size(c),
        evaluations: evaluation_count(c),
    }
}
