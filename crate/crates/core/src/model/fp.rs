use rayon::prelude::*;

use super::{samples, ActivationTrace, Linear, Model};
use crate::error::Result;
use crate::kernels::{reference, AffineParams, LN_EPS};
use crate::quant::Tensor;

fn linear(x: &[f64], rows: usize, l: &Linear) -> Vec<f64> {
    let (fin, fout) = (l.fan_in(), l.fan_out());
    let w = l.w.data();
    let mut out = Vec::with_capacity(rows * fout);
    for r in 0..rows {
        let xr = &x[r * fin..(r + 1) * fin];
        out.extend_from_slice(l.b.data());
        let o = &mut out[r * fout..];
        for (k, &xv) in xr.iter().enumerate() {
            for (oj, &wv) in o.iter_mut().zip(&w[k * fout..(k + 1) * fout]) {
                *oj += xv * wv;
            }
        }
    }
    out
}

fn layernorm(x: &[f64], d: usize, p: &AffineParams) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| reference::layernorm(r, p.gamma.data(), p.beta.data(), LN_EPS))
        .collect()
}

type Record = (Tensor, Tensor);

fn record(trace: &mut Vec<Record>, input: &[f64], output: &[f64], shape: &[usize]) -> Result<()> {
    trace.push((
        Tensor::new(input.to_vec(), shape.to_vec())?,
        Tensor::new(output.to_vec(), shape.to_vec())?,
    ));
    Ok(())
}

fn sample(m: &Model, x: &Tensor) -> Result<(Vec<f64>, Vec<Record>)> {
    let cfg = m.config();
    let w = m.weights();
    let (t, d, h, dh) = (cfg.seq_len, cfg.embed_dim, cfg.heads, cfg.head_dim());
    let hidden = cfg.hidden_dim();
    let mut trace = Vec::with_capacity(m.enumerate_nonlinear_layers().len());
    let mut res = linear(x.data(), t, &w.embed);
    for blk in &w.blocks {
        let y = layernorm(&res, d, &blk.ln1);
        record(&mut trace, &res, &y, &[t, d])?;
        let qkv = linear(&y, t, &blk.qkv);
        let at =
            |i: usize, part: usize, hd: usize, k: usize| qkv[i * 3 * d + part * d + hd * dh + k];
        let inv = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; h * t * t];
        for hd in 0..h {
            for i in 0..t {
                for j in 0..t {
                    let s: f64 = (0..dh).map(|k| at(i, 0, hd, k) * at(j, 1, hd, k)).sum();
                    scores[(hd * t + i) * t + j] = s * inv;
                }
            }
        }
        let probs: Vec<f64> = scores.chunks(t).flat_map(reference::softmax).collect();
        record(&mut trace, &scores, &probs, &[h, t, t])?;
        let mut ctx = vec![0.0; t * d];
        for hd in 0..h {
            for i in 0..t {
                for j in 0..t {
                    let p = probs[(hd * t + i) * t + j];
                    for k in 0..dh {
                        ctx[i * d + hd * dh + k] += p * at(j, 2, hd, k);
                    }
                }
            }
        }
        let out = linear(&ctx, t, &blk.proj);
        res.iter_mut().zip(&out).for_each(|(r, o)| *r += o);

        let y = layernorm(&res, d, &blk.ln2);
        record(&mut trace, &res, &y, &[t, d])?;
        let pre = linear(&y, t, &blk.fc1);
        let act: Vec<f64> = pre.iter().map(|&v| reference::gelu(v)).collect();
        record(&mut trace, &pre, &act, &[t, hidden])?;
        let out = linear(&act, t, &blk.fc2);
        res.iter_mut().zip(&out).for_each(|(r, o)| *r += o);
    }
    let y = layernorm(&res, d, &w.final_ln);
    record(&mut trace, &res, &y, &[t, d])?;
    let mut pooled = vec![0.0; d];
    for row in y.chunks(d) {
        pooled
            .iter_mut()
            .zip(row)
            .for_each(|(p, v)| *p += v / t as f64);
    }
    Ok((linear(&pooled, 1, &w.head), trace))
}

pub(super) fn forward(m: &Model, x: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    let results = samples(x)
        .par_iter()
        .map(|s| sample(m, s))
        .collect::<Result<Vec<_>>>()?;
    let b = results.len();
    let mut logits = Vec::with_capacity(b * m.config().num_classes);
    let mut traces = Vec::with_capacity(b);
    for (l, t) in results {
        logits.extend(l);
        traces.push(t);
    }
    let logits = Tensor::new(logits, vec![b, m.config().num_classes])?;
    Ok((
        logits,
        ActivationTrace::from_samples(m.enumerate_nonlinear_layers(), traces),
    ))
}
