//! Integer exponentials shared by the softmax and GELU kernels.
//!
//! Inputs are first moved to a Q20 fixed-point grid with one dyadic multiply.
//! Outputs are codes at the power-of-two scale `2^-EXP_FRAC_BITS`.

use super::consts::{EXP2_MANTISSA_M, IEXP_A, IEXP_B, IEXP_C};
use super::KernelOutput;
use crate::error::{Error, Result};
use crate::quant::{dyadic_approx, shift_round, QTensor, Scale};

/// Fractional bits of the exponential output scale.
pub const EXP_FRAC_BITS: u32 = 24;
/// Fractional bits of the internal fixed-point input grid.
pub(crate) const Q: u32 = 20;
const ONE_Q: i64 = 1 << Q;
const DYADIC_BITS: u32 = 24;

fn q20(v: f64) -> i64 {
    (v * ONE_Q as f64).round() as i64
}

fn q24(v: f64) -> i64 {
    (v * (1i64 << EXP_FRAC_BITS) as f64).round() as i64
}

/// Converts codes at `q.scale()` to Q20 fixed point.
pub(crate) fn to_q20(codes: &[i64], scale: Scale) -> Result<Vec<i64>> {
    let d = dyadic_approx(scale.value() * ONE_Q as f64, DYADIC_BITS)?;
    codes.iter().map(|&v| d.apply(v)).collect()
}

/// `v * 2^shift` at the output scale, with `shift` possibly negative.
fn scale_by_pow2(v: i64, shift: i64) -> Result<i64> {
    if shift >= 0 {
        let out = (v as i128) << shift.min(64);
        if out > i32::MAX as i128 {
            return Err(Error::invalid(
                "exponential of a positive input exceeds the 32-bit output range",
            ));
        }
        Ok(out as i64)
    } else {
        Ok(shift_round(v, (-shift).min(127) as u32))
    }
}

/// `e^x` for Q20 `x` via `2^(x * 1.0111b)`, returned at scale `2^-24`.
pub(crate) fn shift_exp_q20(x: i64) -> Result<i64> {
    let t = x + (x >> 1) - (x >> 4);
    let k = t >> Q;
    let r = t - (k << Q);
    let m = q20(EXP2_MANTISSA_M);
    let bend = shift_round(r * r, Q) - r;
    let mantissa = ONE_Q + r + shift_round(m * bend, Q);
    scale_by_pow2(mantissa, k + (EXP_FRAC_BITS - Q) as i64)
}

/// `e^x` for Q20 `x <= 0` by range reduction and the fitted quadratic, at scale `2^-24`.
pub(crate) fn poly_exp_q20(x: i64) -> Result<i64> {
    if x > 0 {
        return Err(Error::invalid(format!(
            "polynomial exponential needs x <= 0, got {}",
            x as f64 / ONE_Q as f64
        )));
    }
    let ln2 = q20(std::f64::consts::LN_2);
    let z = (-x) / ln2;
    let r = x + z * ln2;
    let u = r + q20(IEXP_B);
    let poly = shift_round(q24(IEXP_A) * shift_round(u * u, Q), Q) + q24(IEXP_C);
    Ok(shift_round(poly, z.min(127) as u32))
}

fn run(q: &QTensor, f: fn(i64) -> Result<i64>) -> Result<KernelOutput> {
    let codes: Vec<i64> = q.values().iter().map(|&v| v as i64).collect();
    let out = to_q20(&codes, q.scale())?
        .into_iter()
        .map(f)
        .collect::<Result<Vec<_>>>()?;
    let scale = Scale::pow2(-(EXP_FRAC_BITS as i32), 32)?;
    Ok(KernelOutput::linear(QTensor::from_wide(
        &out,
        scale,
        q.shape().to_vec(),
    )?))
}

/// Shift-based exponential; output scale `2^-24`.
///
/// Intended for max-subtracted (non-positive) inputs. Positive inputs are
/// accepted while the result fits in 32 bits, which covers `x` up to about 4.8.
pub fn shift_exp(q: &QTensor) -> Result<KernelOutput> {
    run(q, shift_exp_q20)
}

/// Second-order polynomial exponential for `x <= 0`; output scale `2^-24`.
pub fn poly_iexp(q: &QTensor) -> Result<KernelOutput> {
    run(q, poly_exp_q20)
}
