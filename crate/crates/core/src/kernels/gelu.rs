use super::consts::{ERF_A, ERF_B};
use super::exp::{shift_exp_q20, to_q20, EXP_FRAC_BITS};
use super::KernelOutput;
use crate::error::Result;
use crate::quant::{shift_round, shift_round_i128, QTensor, Scale};

/// Fractional bits kept from the integer sigmoid.
pub const SIGMOID_FRAC_BITS: u32 = 7;

/// Polynomial-erf GELU.
///
/// The erf polynomial is evaluated on the input codes with integer offsets
/// derived from the scale. The output keeps the full product width: it is
/// narrowed to 32 bits by a right shift only when necessary, and the scale is
/// adjusted accordingly.
pub fn gelu_ibert(q: &QTensor) -> Result<KernelOutput> {
    let s = q.scale().value();
    let s_erf = s / std::f64::consts::SQRT_2;
    let b_int = (ERF_B / s_erf).floor() as i128;
    // erf = y * a * s_erf^2 with a < 0; negate so the scale is positive.
    let erf_scale = -ERF_A * s_erf * s_erf;
    let shift_int = (1.0 / erf_scale).floor() as i128;
    // Saturated erf is exactly -/+ shift_int, so large negative inputs map to 0.
    let c_int = -shift_int;
    let wide: Vec<i128> = q
        .values()
        .iter()
        .map(|&v| {
            let v = v as i128;
            let clipped = v.abs().min(-b_int) + b_int;
            let y = -v.signum() * (clipped * clipped + c_int);
            v * (y + shift_int)
        })
        .collect();
    let peak = wide.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let mut shift = 0u32;
    while (peak >> shift) > i32::MAX as u128 / 2 {
        shift += 1;
    }
    let out: Vec<i64> = wide
        .iter()
        .map(|&v| shift_round_i128(v, shift) as i64)
        .collect();
    let scale = Scale::with_value(s * erf_scale / 2.0 * 2f64.powi(shift as i32), 32)?;
    Ok(KernelOutput::linear(QTensor::from_wide(
        &out,
        scale,
        q.shape().to_vec(),
    )?))
}

/// Shift-based sigmoid GELU, `x * sigmoid(1.1011b * x)`; output at the input scale.
pub fn gelu_ivit(q: &QTensor) -> Result<KernelOutput> {
    let codes: Vec<i64> = q.values().iter().map(|&v| v as i64).collect();
    let xq = to_q20(&codes, q.scale())?;
    let one = 1i64 << EXP_FRAC_BITS;
    let out = codes
        .iter()
        .zip(xq)
        .map(|(&v, x)| {
            let z = x + (x >> 1) + (x >> 3) + (x >> 4);
            // sigmoid(-|z|) = e / (1 + e) with e = exp(-|z|) <= 1.
            let e = shift_exp_q20(-z.abs())?;
            let low = (e << SIGMOID_FRAC_BITS) / (e + one);
            let sigma = if z >= 0 {
                (1 << SIGMOID_FRAC_BITS) - low
            } else {
                low
            };
            Ok(shift_round(v * sigma, SIGMOID_FRAC_BITS))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelOutput::linear(QTensor::from_wide(
        &out,
        q.scale(),
        q.shape().to_vec(),
    )?))
}
