//! Integer forward pass.
//!
//! Activations are quantized per tensor and per sample with a dynamic scale.
//! Linear layers accumulate in 64 bits; every change of scale is a dyadic
//! multiply and rounding shift. The residual stream stays at accumulator
//! width and is only narrowed where a consumer needs `bits`-wide codes.

use rayon::prelude::*;

use super::{samples, ActivationTrace, AssignmentMap, LayerId, Linear, Model};
use crate::error::{Error, Result};
use crate::kernels::{
    gelu_ibert, gelu_ivit, layernorm_fqvit_ptf, layernorm_ibert, layernorm_ivit, ptf_dequantize,
    softmax_fqvit, softmax_ibert, softmax_ivit, AffineParams, Encoding, KernelOutput, MethodId,
};
use crate::quant::{
    compute_scale, dequantize, dyadic_approx, quantize, shift_round, shift_round_i128, QTensor,
    Scale, Tensor,
};

const DYADIC_BITS: u32 = 24;
/// Fractional bits of the shift-sum used for log2-coded attention.
const LOG_SUM_BITS: u32 = 16;

/// Accumulator-width values at a real scale.
#[derive(Debug, Clone)]
struct Wide {
    v: Vec<i64>,
    scale: f64,
    shape: Vec<usize>,
}

/// `round(v * from / to)` by one dyadic multiply per element.
fn rescale(v: &[i64], from: f64, to: f64) -> Result<Vec<i64>> {
    let ratio = from / to;
    if ratio < 2f64.powi(-62) {
        return Ok(vec![0; v.len()]);
    }
    let d = dyadic_approx(ratio, DYADIC_BITS)?;
    Ok(v.iter()
        .map(|&x| {
            let r = shift_round_i128(x as i128 * d.mult as i128, d.shift);
            r.clamp(i64::MIN as i128, i64::MAX as i128) as i64
        })
        .collect())
}

impl Wide {
    fn from_q(q: &QTensor) -> Wide {
        Wide {
            v: q.values().iter().map(|&x| x as i64).collect(),
            scale: q.scale().value(),
            shape: q.shape().to_vec(),
        }
    }

    /// Narrows to `bits`-wide codes at the scale of the current maximum.
    fn requant(&self, bits: u32) -> Result<QTensor> {
        let peak = self.v.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
        let s = Scale::from_alpha(peak as f64 * self.scale, bits)?;
        let codes = rescale(&self.v, self.scale, s.value())?;
        QTensor::from_wide(&codes, s, self.shape.clone())
    }

    /// Sum at the finer of the two scales.
    fn add(&self, other: &Wide) -> Result<Wide> {
        let fine = self.scale.min(other.scale);
        let a = rescale(&self.v, self.scale, fine)?;
        let b = rescale(&other.v, other.scale, fine)?;
        Ok(Wide {
            v: a.iter()
                .zip(&b)
                .map(|(x, y)| x.saturating_add(*y))
                .collect(),
            scale: fine,
            shape: self.shape.clone(),
        })
    }
}

struct QLinear {
    w: QTensor,
    b: Vec<f64>,
}

impl QLinear {
    fn new(l: &Linear, bits: u32) -> Result<QLinear> {
        let s = compute_scale(&l.w, bits)?;
        Ok(QLinear {
            w: quantize(&l.w, s),
            b: l.b.data().to_vec(),
        })
    }

    fn apply(&self, x: &QTensor, rows: usize) -> Result<Wide> {
        let (fin, fout) = (self.w.shape()[0], self.w.shape()[1]);
        let acc_scale = x.scale().value() * self.w.scale().value();
        let w = self.w.values();
        let mut v = Vec::with_capacity(rows * fout);
        for r in 0..rows {
            let start = v.len();
            v.extend(self.b.iter().map(|&b| (b / acc_scale).round() as i64));
            let o = &mut v[start..];
            for (k, &xv) in x.values()[r * fin..(r + 1) * fin].iter().enumerate() {
                if xv == 0 {
                    continue;
                }
                for (oj, &wv) in o.iter_mut().zip(&w[k * fout..(k + 1) * fout]) {
                    *oj += xv as i64 * wv as i64;
                }
            }
        }
        Ok(Wide {
            v,
            scale: acc_scale,
            shape: vec![rows, fout],
        })
    }
}

struct QBlock {
    qkv: QLinear,
    proj: QLinear,
    fc1: QLinear,
    fc2: QLinear,
}

struct QWeights {
    embed: QLinear,
    blocks: Vec<QBlock>,
    head: QLinear,
}

impl QWeights {
    fn new(m: &Model) -> Result<QWeights> {
        let bits = m.config().bits;
        let w = m.weights();
        Ok(QWeights {
            embed: QLinear::new(&w.embed, bits)?,
            blocks: w
                .blocks
                .iter()
                .map(|b| {
                    Ok(QBlock {
                        qkv: QLinear::new(&b.qkv, bits)?,
                        proj: QLinear::new(&b.proj, bits)?,
                        fc1: QLinear::new(&b.fc1, bits)?,
                        fc2: QLinear::new(&b.fc2, bits)?,
                    })
                })
                .collect::<Result<_>>()?,
            head: QLinear::new(&w.head, bits)?,
        })
    }
}

/// Log2 output bits for the softmax at a given activation width.
pub(crate) fn log_softmax_bits(bits: u32) -> u32 {
    if bits >= 8 {
        8
    } else {
        4
    }
}

struct Ctx<'a> {
    m: &'a Model,
    a: &'a AssignmentMap,
    qw: &'a QWeights,
    trace: Vec<(Tensor, Tensor)>,
    layer: usize,
    ln_count: usize,
}

impl Ctx<'_> {
    fn next_layer(&mut self) -> Result<(LayerId, MethodId)> {
        let id = self.m.enumerate_nonlinear_layers()[self.layer];
        self.layer += 1;
        Ok((id, self.a.method(id)?))
    }

    fn record(&mut self, input: Tensor, output: Tensor) {
        self.trace.push((input, output));
    }

    fn layernorm(&mut self, res: &Wide, p: &AffineParams) -> Result<QTensor> {
        let (_, method) = self.next_layer()?;
        let n = self.ln_count;
        self.ln_count += 1;
        let bits = self.m.config().bits;
        let (input, out) = match method {
            MethodId::IBert | MethodId::IVit => {
                let q = res.requant(bits)?;
                let out = if method == MethodId::IBert {
                    layernorm_ibert(&q, p)?
                } else {
                    layernorm_ivit(&q, p)?
                };
                (dequantize(&q), out)
            }
            MethodId::FqVit => {
                let calib = self.m.calibration().ok_or_else(|| {
                    Error::InvalidState(
                        "power-of-two-factor LayerNorm used before calibration".into(),
                    )
                })?;
                let c = &calib[n];
                let d = c.dim();
                let mut codes = Vec::with_capacity(res.v.len());
                for row in res.v.chunks(d) {
                    for (ch, &x) in row.iter().enumerate() {
                        codes.push(rescale(&[x], res.scale, c.channel_scale(ch))?[0]);
                    }
                }
                let ptf = QTensor::from_wide(&codes, c.in_scale, res.shape.clone())?;
                (ptf_dequantize(&ptf, c)?, layernorm_fqvit_ptf(&ptf, p, c)?)
            }
        };
        self.record(input, out.dequantize());
        Ok(out.q)
    }

    fn attention(&mut self, y: &QTensor, blk: &QBlock) -> Result<Wide> {
        let cfg = self.m.config();
        let (t, d, h, dh) = (cfg.seq_len, cfg.embed_dim, cfg.heads, cfg.head_dim());
        let qkv = blk.qkv.apply(y, t)?.requant(cfg.bits)?;
        let s = qkv.scale().value();
        let c = qkv.values();
        let at = |i: usize, part: usize, hd: usize, k: usize| {
            c[i * 3 * d + part * d + hd * dh + k] as i64
        };
        let mut scores = Vec::with_capacity(h * t * t);
        for hd in 0..h {
            for i in 0..t {
                for j in 0..t {
                    scores.push(
                        (0..dh)
                            .map(|k| at(i, 0, hd, k) * at(j, 1, hd, k))
                            .sum::<i64>(),
                    );
                }
            }
        }
        let scores = Wide {
            v: scores,
            scale: s * s / (dh as f64).sqrt(),
            shape: vec![h, t, t],
        }
        .requant(cfg.bits)?;

        let (_, method) = self.next_layer()?;
        let probs: KernelOutput = match method {
            MethodId::IBert => softmax_ibert(&scores, 2)?,
            MethodId::IVit => softmax_ivit(&scores, 2)?,
            MethodId::FqVit => softmax_fqvit(&scores, 2, log_softmax_bits(cfg.bits))?,
        };
        self.record(dequantize(&scores), probs.dequantize());

        let p = probs.q.values();
        let mut ctx = vec![0i64; t * d];
        let ctx_scale = match probs.encoding {
            Encoding::Linear => {
                for hd in 0..h {
                    for i in 0..t {
                        for j in 0..t {
                            let pv = p[(hd * t + i) * t + j] as i64;
                            for k in 0..dh {
                                ctx[i * d + hd * dh + k] += pv * at(j, 2, hd, k);
                            }
                        }
                    }
                }
                probs.scale().value() * s
            }
            Encoding::Log2 { floor_code } => {
                for hd in 0..h {
                    for i in 0..t {
                        for j in 0..t {
                            let code = p[(hd * t + i) * t + j];
                            if code >= floor_code {
                                continue;
                            }
                            for k in 0..dh {
                                let v = at(j, 2, hd, k) << LOG_SUM_BITS;
                                ctx[i * d + hd * dh + k] += shift_round(v, code as u32);
                            }
                        }
                    }
                }
                s / (1u64 << LOG_SUM_BITS) as f64
            }
        };
        let ctx = Wide {
            v: ctx,
            scale: ctx_scale,
            shape: vec![t, d],
        }
        .requant(cfg.bits)?;
        blk.proj.apply(&ctx, t)
    }

    fn mlp(&mut self, y: &QTensor, blk: &QBlock) -> Result<Wide> {
        let cfg = self.m.config();
        let t = cfg.seq_len;
        let pre = blk.fc1.apply(y, t)?.requant(cfg.bits)?;
        let (_, method) = self.next_layer()?;
        let act = match method {
            MethodId::IBert => gelu_ibert(&pre)?,
            MethodId::IVit => gelu_ivit(&pre)?,
            MethodId::FqVit => unreachable!("assignment validation rejects FQ-ViT GELU"),
        };
        self.record(dequantize(&pre), act.dequantize());
        let act = Wide::from_q(&act.q).requant(cfg.bits)?;
        blk.fc2.apply(&act, t)
    }
}

/// Per-layer (input, output) pair of one sample.
type Record = (Tensor, Tensor);

fn sample(
    m: &Model,
    qw: &QWeights,
    a: &AssignmentMap,
    x: &Tensor,
) -> Result<(Vec<f64>, Vec<Record>)> {
    let cfg = m.config();
    let w = m.weights();
    let (t, d) = (cfg.seq_len, cfg.embed_dim);
    let mut cx = Ctx {
        m,
        a,
        qw,
        trace: Vec::with_capacity(m.enumerate_nonlinear_layers().len()),
        layer: 0,
        ln_count: 0,
    };
    let xq = quantize(x, compute_scale(x, cfg.bits)?);
    let mut res = cx.qw.embed.apply(&xq, t)?;
    for (blk, fb) in cx.qw.blocks.iter().zip(&w.blocks) {
        let y = cx.layernorm(&res, &fb.ln1)?;
        let attn = cx.attention(&y, blk)?;
        res = res.add(&attn)?;
        let y = cx.layernorm(&res, &fb.ln2)?;
        let mlp = cx.mlp(&y, blk)?;
        res = res.add(&mlp)?;
    }
    let y = cx.layernorm(&res, &w.final_ln)?;
    let mut pooled = vec![0i64; d];
    for row in y.values().chunks(d) {
        pooled
            .iter_mut()
            .zip(row)
            .for_each(|(p, &v)| *p += v as i64);
    }
    let pooled = Wide {
        v: pooled,
        scale: y.scale().value() / t as f64,
        shape: vec![1, d],
    }
    .requant(cfg.bits)?;
    let logits = cx.qw.head.apply(&pooled, 1)?;
    let out = logits.v.iter().map(|&v| v as f64 * logits.scale).collect();
    Ok((out, cx.trace))
}

pub(super) fn forward(
    m: &Model,
    x: &Tensor,
    a: &AssignmentMap,
) -> Result<(Tensor, ActivationTrace)> {
    let qw = QWeights::new(m)?;
    let results = samples(x)
        .par_iter()
        .map(|s| sample(m, &qw, a, s))
        .collect::<Result<Vec<_>>>()?;
    let b = results.len();
    let classes = m.config().num_classes;
    let mut logits = Vec::with_capacity(b * classes);
    let mut traces = Vec::with_capacity(b);
    for (l, t) in results {
        logits.extend(l);
        traces.push(t);
    }
    Ok((
        Tensor::new(logits, vec![b, classes])?,
        ActivationTrace::from_samples(m.enumerate_nonlinear_layers(), traces),
    ))
}
