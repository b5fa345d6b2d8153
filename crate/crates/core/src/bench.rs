//! SQNR and latency sweep of every (op, method) kernel over random matrices.
//!
//! Latency is measured on the calling thread with a monotonic clock after
//! [`WARMUP_RUNS`] discarded runs. The reference for each cell is the float
//! non-linearity applied to the dequantized 8-bit input, so the SQNR isolates
//! the approximation error of the kernel itself.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, reference, AffineParams, KernelOutput, MethodId, OpKind, LN_EPS};
use crate::quant::{compute_scale, dequantize, quantize, QTensor, Tensor};
use crate::sensitivity::asqnr;

pub const WARMUP_RUNS: usize = 3;
pub const BENCH_BITS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub sizes: Vec<(usize, usize)>,
    pub value_range: (f64, f64),
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            sizes: vec![(1000, 1000), (100, 100), (10, 10)],
            value_range: (-4.0, 4.0),
            reps: 10,
            seed: 1,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.value_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("value range [{lo}, {hi}] is empty")));
        }
        if self.reps < 3 {
            return Err(Error::invalid(format!(
                "reps must be at least 3, got {}",
                self.reps
            )));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&(r, c)| r == 0 || c == 0) {
            return Err(Error::invalid(
                "sizes must be a non-empty list of non-zero shapes",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub op_kind: OpKind,
    pub method: MethodId,
    pub rows: usize,
    pub cols: usize,
    pub sqnr_db: f64,
    pub latency_mean_ms: f64,
    pub latency_sd_ms: f64,
}

/// Every benchmarked kernel in table order.
pub fn kernels() -> Vec<(OpKind, MethodId)> {
    OpKind::ALL
        .iter()
        .flat_map(|&k| k.methods().iter().map(move |&m| (k, m)))
        .collect()
}

/// Uniform samples in `[lo, hi)`.
pub fn random_matrix(rows: usize, cols: usize, range: (f64, f64), seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(range.0..range.1))
        .collect();
    Tensor::new(data, vec![rows, cols])
}

/// A prepared kernel invocation on one quantized input.
struct Cell {
    kind: OpKind,
    method: MethodId,
    q: QTensor,
    params: AffineParams,
    calib: Option<kernels::CalibStats>,
}

impl Cell {
    fn new(kind: OpKind, method: MethodId, x: &Tensor, bits: u32) -> Result<Cell> {
        let params = AffineParams::identity(x.last_dim())?;
        let (q, calib) = if kind == OpKind::LayerNorm && method == MethodId::FqVit {
            let c = kernels::calibrate_layernorm(x, &params, bits)?;
            (quantize(x, c.in_scale), Some(c))
        } else {
            (quantize(x, compute_scale(x, bits)?), None)
        };
        Ok(Cell {
            kind,
            method,
            q,
            params,
            calib,
        })
    }

    fn run(&self) -> Result<KernelOutput> {
        let axis = self.q.shape().len() - 1;
        match (self.kind, self.method) {
            (OpKind::Softmax, MethodId::IBert) => kernels::softmax_ibert(&self.q, axis),
            (OpKind::Softmax, MethodId::FqVit) => {
                kernels::softmax_fqvit(&self.q, axis, kernels::SOFTMAX_OUT_BITS)
            }
            (OpKind::Softmax, MethodId::IVit) => kernels::softmax_ivit(&self.q, axis),
            (OpKind::Gelu, MethodId::IBert) => kernels::gelu_ibert(&self.q),
            (OpKind::Gelu, MethodId::IVit) => kernels::gelu_ivit(&self.q),
            (OpKind::LayerNorm, MethodId::IBert) => kernels::layernorm_ibert(&self.q, &self.params),
            (OpKind::LayerNorm, MethodId::FqVit) => {
                kernels::layernorm_fqvit(&self.q, &self.params, self.calib.as_ref())
            }
            (OpKind::LayerNorm, MethodId::IVit) => kernels::layernorm_ivit(&self.q, &self.params),
            (k, m) => Err(Error::invalid(format!("{k} has no {m} kernel"))),
        }
    }

    fn reference(&self) -> Result<Tensor> {
        let x = dequantize(&self.q);
        let d = x.last_dim();
        let data: Vec<f64> = match self.kind {
            OpKind::Gelu => x.data().iter().map(|&v| reference::gelu(v)).collect(),
            OpKind::Softmax => x.data().chunks(d).flat_map(reference::softmax).collect(),
            OpKind::LayerNorm => x
                .data()
                .chunks(d)
                .flat_map(|r| {
                    reference::layernorm(
                        r,
                        self.params.gamma.data(),
                        self.params.beta.data(),
                        LN_EPS,
                    )
                })
                .collect(),
        };
        Tensor::new(data, x.shape().to_vec())
    }

    fn sqnr(&self) -> Result<f64> {
        let out = self.run()?.dequantize();
        asqnr(&[self.reference()?], &[out])
    }
}

/// Quantizes `x` at `bits`, runs one kernel along the last axis and returns
/// the dequantized output with the float reference on the dequantized input.
pub fn run_kernel(
    kind: OpKind,
    method: MethodId,
    x: &Tensor,
    bits: u32,
) -> Result<(Tensor, Tensor)> {
    let cell = Cell::new(kind, method, x, bits)?;
    Ok((cell.run()?.dequantize(), cell.reference()?))
}

/// Output SQNR of one kernel on a seeded `rows x cols` input, without timing.
pub fn kernel_sqnr(
    kind: OpKind,
    method: MethodId,
    rows: usize,
    cols: usize,
    range: (f64, f64),
    seed: u64,
) -> Result<f64> {
    let x = random_matrix(rows, cols, range, seed)?;
    Cell::new(kind, method, &x, BENCH_BITS)?.sqnr()
}

fn mean_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &(r, c) in &spec.sizes {
        let x = random_matrix(r, c, spec.value_range, spec.seed)?;
        for (kind, method) in kernels() {
            let cell = Cell::new(kind, method, &x, BENCH_BITS)?;
            let sqnr_db = cell.sqnr()?;
            for _ in 0..WARMUP_RUNS {
                cell.run()?;
            }
            let mut times = Vec::with_capacity(spec.reps);
            for _ in 0..spec.reps {
                let t0 = Instant::now();
                let out = cell.run()?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
                drop(out);
            }
            let (mean, sd) = mean_sd(&times);
            rows.push(BenchRow {
                op_kind: kind,
                method,
                rows: r,
                cols: c,
                sqnr_db,
                latency_mean_ms: mean,
                latency_sd_ms: sd,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One line per kernel, one `SQNR | mean (SD)` column group per size.
pub fn to_text_table(rows: &[BenchRow]) -> String {
    let mut sizes: Vec<(usize, usize)> = Vec::new();
    for r in rows {
        if !sizes.contains(&(r.rows, r.cols)) {
            sizes.push((r.rows, r.cols));
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<20}", "kernel");
    for (r, c) in &sizes {
        let _ = write!(out, " | {:>28}", format!("{r}x{c} SQNR dB / ms (SD)"));
    }
    out.push('\n');
    for (kind, method) in kernels() {
        let label = format!("{} {}", kind.label(), method.label());
        let _ = write!(out, "{label:<20}");
        for &(r, c) in &sizes {
            match rows
                .iter()
                .find(|b| b.op_kind == kind && b.method == method && b.rows == r && b.cols == c)
            {
                Some(b) => {
                    let cell = format!(
                        "{:.2} / {:.3} ({:.3})",
                        b.sqnr_db, b.latency_mean_ms, b.latency_sd_ms
                    );
                    let _ = write!(out, " | {cell:>28}");
                }
                None => {
                    let _ = write!(out, " | {:>28}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchSpec {
        BenchSpec {
            sizes: vec![(8, 16)],
            reps: 3,
            ..BenchSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(BenchSpec::default().validate().is_ok());
        let mut s = small();
        s.reps = 2;
        assert!(s.validate().is_err());
        let mut s = small();
        s.value_range = (1.0, 1.0);
        assert!(s.validate().is_err());
        let mut s = small();
        s.sizes = vec![(0, 4)];
        assert!(s.validate().is_err());
    }

    #[test]
    fn one_row_per_kernel_and_size() {
        let rows = run_bench(&small()).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows
            .iter()
            .all(|r| r.latency_sd_ms >= 0.0 && r.sqnr_db.is_finite()));
        let again = run_bench(&small()).unwrap();
        let sq = |v: &[BenchRow]| v.iter().map(|r| r.sqnr_db).collect::<Vec<_>>();
        assert_eq!(sq(&rows), sq(&again));
        let csv = to_csv(&rows).unwrap();
        assert!(csv.starts_with("op_kind,method,rows,cols,sqnr_db,latency_mean_ms,latency_sd_ms\n"));
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(to_text_table(&rows).lines().count(), 9);
    }

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
