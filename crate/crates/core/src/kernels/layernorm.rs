//! Integer LayerNorm over the last axis.
//!
//! The polynomial and shift-based kernels share one structure: rounded mean,
//! Newton square root of the summed squared deviation, a fixed-point
//! reciprocal, and a dynamic requantization of the affine result. The
//! power-of-two-factor kernel works on per-channel aligned codes with
//! statistics gathered in a calibration pass.

use super::isqrt::{isqrt_newton, IVIT_ISQRT_ITERS};
use super::reference;
use super::{AffineParams, KernelOutput};
use crate::error::{Error, Result};
use crate::quant::{
    compute_scale, div_round_i128, dyadic_approx, quantize, quantize_value, shift_round_i128,
    signed_dyadic, DyadicScale, QTensor, Scale, Tensor,
};

/// Lowest per-channel power-of-two exponent.
pub const PTF_MIN_EXP: i32 = -3;

/// Epsilon of the float LayerNorm used for calibration.
pub const LN_EPS: f64 = 1e-6;

const DYADIC_BITS: u32 = 24;
const GAMMA_BITS: u32 = 16;
/// Fractional bits of the normalized value in the power-of-two-factor kernel.
const NORM_FRAC_BITS: u32 = 16;
/// The normalized value is carried at scale `sqrt(d) / 2^NORM_SHIFT`.
const NORM_SHIFT: i32 = 30;

fn check_dim(q_shape: &[usize], p: &AffineParams) -> Result<usize> {
    let d = *q_shape.last().expect("rank >= 1");
    if d != p.dim() {
        return Err(Error::invalid(format!(
            "feature length {d} does not match affine parameters of length {}",
            p.dim()
        )));
    }
    Ok(d)
}

fn apply_wide(d: DyadicScale, v: i64) -> i64 {
    shift_round_i128(v as i128 * d.mult as i128, d.shift) as i64
}

fn integer_layernorm(
    q: &QTensor,
    p: &AffineParams,
    isqrt_iters: u32,
    numerator: i64,
) -> Result<KernelOutput> {
    let d = check_dim(q.shape(), p)?;
    let bits = q.scale().bits().min(16);
    let gamma_scale = compute_scale(&p.gamma, GAMMA_BITS)?;
    let gamma_q = quantize(&p.gamma, gamma_scale);
    let acc_scale = (d as f64).sqrt() / 2f64.powi(NORM_SHIFT) * gamma_scale.value();
    let beta_q: Vec<i64> = p
        .beta
        .data()
        .iter()
        .map(|&b| (b / acc_scale).round() as i64)
        .collect();

    let mut acc = Vec::with_capacity(q.len());
    for row in q.values().chunks(d) {
        let sum: i64 = row.iter().map(|&v| v as i64).sum();
        let mean = div_round_i128(sum as i128, d as i128) as i64;
        let var: i64 = row
            .iter()
            .map(|&v| {
                let y = v as i64 - mean;
                y * y
            })
            .sum();
        let std = isqrt_newton(var as u64 + 1, isqrt_iters) as i64;
        let factor = numerator / std;
        for ((&v, &g), &b) in row.iter().zip(gamma_q.values()).zip(&beta_q) {
            let norm = ((v as i64 - mean) * factor).div_euclid(2);
            acc.push(norm * g as i64 + b);
        }
    }

    let alpha = acc.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0) as f64 * acc_scale;
    let out_scale = Scale::from_alpha(alpha, bits)?;
    let ratio = dyadic_approx(acc_scale / out_scale.value(), DYADIC_BITS)?;
    let out: Vec<i64> = acc.iter().map(|&v| apply_wide(ratio, v)).collect();
    Ok(KernelOutput::linear(QTensor::from_wide(
        &out,
        out_scale,
        q.shape().to_vec(),
    )?))
}

/// LayerNorm with the full-convergence Newton square root.
pub fn layernorm_ibert(q: &QTensor, p: &AffineParams) -> Result<KernelOutput> {
    integer_layernorm(q, p, 64, 1 << 31)
}

/// LayerNorm with the fixed ten-step shift-form Newton square root.
pub fn layernorm_ivit(q: &QTensor, p: &AffineParams) -> Result<KernelOutput> {
    integer_layernorm(q, p, IVIT_ISQRT_ITERS, (1 << 31) - 1)
}

/// Calibrated quantities of the power-of-two-factor LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    /// Per-channel exponent in `PTF_MIN_EXP..=0`; channel `c` uses step `in_scale * 2^channel_exp[c]`.
    pub channel_exp: Vec<i32>,
    pub in_scale: Scale,
    pub out_scale: Scale,
}

impl CalibStats {
    pub fn dim(&self) -> usize {
        self.channel_exp.len()
    }

    /// Quantization step of channel `c`.
    pub fn channel_scale(&self, c: usize) -> f64 {
        self.in_scale.value() * 2f64.powi(self.channel_exp[c])
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::invalid(format!(
                "calibration covers {} channels, input has {d}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Derives per-channel exponents and the input/output scales from float data
/// whose last axis holds the channels.
pub fn calibrate_layernorm(x: &Tensor, p: &AffineParams, bits: u32) -> Result<CalibStats> {
    let d = check_dim(x.shape(), p)?;
    let mut cmax = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for (m, &v) in cmax.iter_mut().zip(row) {
            *m = m.max(v.abs());
        }
    }
    let gmax = cmax.iter().cloned().fold(0.0, f64::max);
    let channel_exp = cmax
        .iter()
        .map(|&m| {
            if gmax == 0.0 || m == 0.0 {
                return if gmax == 0.0 { 0 } else { PTF_MIN_EXP };
            }
            ((m / gmax).log2().round() as i32).clamp(PTF_MIN_EXP, 0)
        })
        .collect();
    let in_scale = Scale::from_alpha(gmax, bits)?;
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        y.extend(reference::layernorm(
            row,
            p.gamma.data(),
            p.beta.data(),
            LN_EPS,
        ));
    }
    let out_scale = crate::quant::scale_for_slice(&y, bits)?;
    Ok(CalibStats {
        channel_exp,
        in_scale,
        out_scale,
    })
}

/// Quantizes float data to per-channel power-of-two-factor codes.
/// The returned tensor carries `calib.in_scale`; see [`ptf_dequantize`].
pub fn ptf_quantize(x: &Tensor, calib: &CalibStats) -> Result<QTensor> {
    let d = x.last_dim();
    calib.check(d)?;
    let values: Vec<i64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = Scale::with_value(calib.channel_scale(i % d), calib.in_scale.bits())?;
            Ok(quantize_value(v, s))
        })
        .collect::<Result<_>>()?;
    QTensor::from_wide(&values, calib.in_scale, x.shape().to_vec())
}

/// Rescales per-tensor codes to per-channel power-of-two-factor codes.
pub fn ptf_requantize(q: &QTensor, calib: &CalibStats) -> Result<QTensor> {
    let d = q.last_dim();
    calib.check(d)?;
    let ratios = (0..d)
        .map(|c| dyadic_approx(q.scale().value() / calib.channel_scale(c), DYADIC_BITS))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<i64> = q
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| apply_wide(ratios[i % d], v as i64))
        .collect();
    QTensor::from_wide(&values, calib.in_scale, q.shape().to_vec())
}

pub fn ptf_dequantize(q: &QTensor, calib: &CalibStats) -> Result<Tensor> {
    let d = q.last_dim();
    calib.check(d)?;
    let data = q
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 * calib.channel_scale(i % d))
        .collect();
    Tensor::new(data, q.shape().to_vec())
}

/// Power-of-two-factor LayerNorm on a per-tensor quantized input.
///
/// The input is moved to the calibrated per-channel grid first. Without
/// calibration the kernel fails with an invalid-state error.
pub fn layernorm_fqvit(
    q: &QTensor,
    p: &AffineParams,
    calib: Option<&CalibStats>,
) -> Result<KernelOutput> {
    let calib = calib.ok_or_else(|| {
        Error::InvalidState("layernorm_fqvit needs calibration statistics".into())
    })?;
    layernorm_fqvit_ptf(&ptf_requantize(q, calib)?, p, calib)
}

/// Power-of-two-factor LayerNorm on codes already on the calibrated grid.
pub fn layernorm_fqvit_ptf(
    ptf: &QTensor,
    p: &AffineParams,
    calib: &CalibStats,
) -> Result<KernelOutput> {
    let d = check_dim(ptf.shape(), p)?;
    calib.check(d)?;
    let min_exp = calib.channel_exp.iter().copied().min().unwrap_or(0);
    let align: Vec<u32> = calib
        .channel_exp
        .iter()
        .map(|&e| (e - min_exp) as u32)
        .collect();
    let out_scale = calib.out_scale;
    let affine = p
        .gamma
        .data()
        .iter()
        .zip(p.beta.data())
        .map(|(&g, &b)| {
            let m = signed_dyadic(g / out_scale.value(), DYADIC_BITS)?;
            let shift = NORM_FRAC_BITS + m.shift;
            let beta = (b / out_scale.value() * 2f64.powi(shift as i32)).round() as i128;
            Ok((m, shift, beta))
        })
        .collect::<Result<Vec<_>>>()?;

    let dn = d as i128;
    let mut out = Vec::with_capacity(ptf.len());
    for row in ptf.values().chunks(d) {
        let aligned: Vec<i128> = row
            .iter()
            .zip(&align)
            .map(|(&v, &s)| (v as i128) << s)
            .collect();
        let s1: i128 = aligned.iter().sum();
        let s2: i128 = aligned.iter().map(|a| a * a).sum();
        let var = dn * s2 - s1 * s1;
        let var = u64::try_from(var + 1).map_err(|_| {
            Error::Overflow("LayerNorm variance exceeds the 64-bit square-root input".into())
        })?;
        let std = isqrt_newton(var, 64) as i128;
        for (a, (m, shift, beta)) in aligned.iter().zip(&affine) {
            let z = div_round_i128((dn * a - s1) << NORM_FRAC_BITS, std);
            let acc = z * m.mult as i128 + beta;
            out.push(
                shift_round_i128(acc, *shift).clamp(i64::MIN as i128, i64::MAX as i128) as i64,
            );
        }
    }
    Ok(KernelOutput::linear(QTensor::from_wide(
        &out,
        out_scale,
        ptf.shape().to_vec(),
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::dequantize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * d).map(|_| rng.gen_range(-4.0..4.0)).collect();
        Tensor::new(data, vec![rows, d]).unwrap()
    }

    fn q8(t: &Tensor) -> QTensor {
        quantize(t, compute_scale(t, 8).unwrap())
    }

    fn row_moments(y: &Tensor, d: usize) -> Vec<(f64, f64)> {
        y.data()
            .chunks(d)
            .map(|r| {
                let m = r.iter().sum::<f64>() / d as f64;
                let v = r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn unit_moments_all_kernels() {
        let d = 64;
        let x = random(50, d, 3);
        let q = q8(&x);
        let p = AffineParams::identity(d).unwrap();
        let calib = calibrate_layernorm(&dequantize(&q), &p, 8).unwrap();
        let outs = [
            layernorm_ibert(&q, &p).unwrap(),
            layernorm_ivit(&q, &p).unwrap(),
            layernorm_fqvit(&q, &p, Some(&calib)).unwrap(),
        ];
        for out in outs {
            for (m, v) in row_moments(&out.dequantize(), d) {
                assert!(m.abs() <= 0.05, "mean {m}");
                assert!((v - 1.0).abs() <= 0.1, "var {v}");
            }
        }
    }

    #[test]
    fn constant_row_gives_beta() {
        let d = 8;
        let x = Tensor::new(vec![1.25; 2 * d], vec![2, d]).unwrap();
        let q = q8(&x);
        let beta: Vec<f64> = (0..d).map(|i| i as f64 * 0.25 - 1.0).collect();
        let p = AffineParams::new(
            Tensor::from_vec(vec![1.5; d]).unwrap(),
            Tensor::from_vec(beta.clone()).unwrap(),
        )
        .unwrap();
        for out in [
            layernorm_ibert(&q, &p).unwrap(),
            layernorm_ivit(&q, &p).unwrap(),
        ] {
            let ulp = out.scale().value();
            for (i, v) in out.dequantize().data().iter().enumerate() {
                assert!((v - beta[i % d]).abs() <= ulp, "{v} vs {}", beta[i % d]);
            }
        }
    }

    #[test]
    fn ivit_agrees_with_ibert() {
        let d = 96;
        let q = q8(&random(200, d, 11));
        let p = AffineParams::identity(d).unwrap();
        let a = layernorm_ibert(&q, &p).unwrap();
        let b = layernorm_ivit(&q, &p).unwrap();
        assert_eq!(a.scale(), b.scale());
        for (x, y) in a.q.values().iter().zip(b.q.values()) {
            assert!((x - y).abs() <= 1);
        }
    }

    #[test]
    fn channel_exponents() {
        let d = 4;
        let x = Tensor::new(vec![4.0, 1.0, 2.0, 0.0, -4.0, -1.0, -2.0, 0.0], vec![2, d]).unwrap();
        let p = AffineParams::identity(d).unwrap();
        let c = calibrate_layernorm(&x, &p, 8).unwrap();
        assert_eq!(c.channel_exp, vec![0, -2, -1, PTF_MIN_EXP]);
        let same =
            Tensor::new(vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0], vec![2, d]).unwrap();
        assert_eq!(
            calibrate_layernorm(&same, &p, 8).unwrap().channel_exp,
            vec![0; 4]
        );
    }

    #[test]
    fn ptf_round_trip() {
        let d = 4;
        let x = Tensor::new(
            vec![4.0, 1.0, 0.5, 0.1, -3.0, -0.9, -0.25, 0.05],
            vec![2, d],
        )
        .unwrap();
        let p = AffineParams::identity(d).unwrap();
        let c = calibrate_layernorm(&x, &p, 8).unwrap();
        let q = ptf_quantize(&x, &c).unwrap();
        let back = ptf_dequantize(&q, &c).unwrap();
        for (i, (a, b)) in x.data().iter().zip(back.data()).enumerate() {
            let step = c.in_scale.value() * 2f64.powi(c.channel_exp[i % d]);
            assert!((a - b).abs() <= step / 2.0 + 1e-12);
        }
    }

    #[test]
    fn degenerate_ptf_matches_ibert_closely() {
        let d = 32;
        let x = random(40, d, 5);
        let q = q8(&x);
        let p = AffineParams::identity(d).unwrap();
        let calib = calibrate_layernorm(&dequantize(&q), &p, 8).unwrap();
        assert!(calib.channel_exp.iter().all(|&e| e == 0));
        let a = layernorm_ibert(&q, &p).unwrap().dequantize();
        let b = layernorm_fqvit(&q, &p, Some(&calib)).unwrap().dequantize();
        let step = calib.out_scale.value().max(a.max_abs() * 2.0 / 255.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1.5 * step, "{x} {y}");
        }
    }

    #[test]
    fn errors() {
        let q = q8(&random(2, 4, 1));
        let p = AffineParams::identity(5).unwrap();
        assert!(layernorm_ibert(&q, &p).is_err());
        let p = AffineParams::identity(4).unwrap();
        assert!(matches!(
            layernorm_fqvit(&q, &p, None),
            Err(Error::InvalidState(_))
        ));
    }
}
