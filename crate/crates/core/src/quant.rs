//! Uniform symmetric quantization, dyadic rescaling and the straight-through
//! gradient rule.
//!
//! A real tensor `R` is mapped to integers with a single per-tensor scale:
//!
//! ```text
//! I = round(clip(R, -alpha, alpha) / S),   S = 2 * alpha / (2^n - 1)
//! ```
//!
//! where `alpha = max |R|`. Rounding is half-away-from-zero, so `|I|` can reach
//! `2^(n-1)` at the clip bound; [`QTensor`] admits that extra code.

use crate::error::{Error, Result};

/// Clip bound used when a tensor is identically zero, so that `S > 0`.
pub const ZERO_ALPHA_EPS: f64 = 1e-8;

/// Largest shift considered when searching for a dyadic multiplier.
const MAX_DYADIC_SHIFT: u32 = 62;

/// Dense row-major tensor of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite element {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { data, shape })
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(data, vec![n])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        Tensor::new(vec![0.0; n], shape)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Tensor {
            data: self.data,
            shape,
        })
    }

    /// Elementwise map. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(
            self.data.iter().map(|&v| f(v)).collect(),
            self.shape.clone(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Length of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank >= 1")
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("shape must have at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!(
            "shape {shape:?} has a zero dimension"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows usize")))
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let n = element_count(shape)?;
    if n != len {
        return Err(Error::invalid(format!(
            "shape {shape:?} implies {n} elements, got {len}"
        )));
    }
    Ok(())
}

/// Quantization step with its clip bound and bit width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    value: f64,
    alpha: f64,
    bits: u32,
}

impl Scale {
    /// `S = 2 alpha / (2^bits - 1)`; a zero `alpha` is replaced by [`ZERO_ALPHA_EPS`].
    pub fn from_alpha(alpha: f64, bits: u32) -> Result<Scale> {
        check_container_bits(bits)?;
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid(format!(
                "clip bound {alpha} must be finite and >= 0"
            )));
        }
        let alpha = if alpha == 0.0 { ZERO_ALPHA_EPS } else { alpha };
        let value = 2.0 * alpha / levels(bits);
        Ok(Scale { value, alpha, bits })
    }

    /// Scale with a prescribed step; the clip bound is derived from it.
    pub fn with_value(value: f64, bits: u32) -> Result<Scale> {
        check_container_bits(bits)?;
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::invalid(format!(
                "scale {value} must be finite and > 0"
            )));
        }
        Ok(Scale {
            value,
            alpha: value * levels(bits) / 2.0,
            bits,
        })
    }

    /// Power-of-two step `2^exp`.
    pub fn pow2(exp: i32, bits: u32) -> Result<Scale> {
        Scale::with_value(2f64.powi(exp), bits)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Largest admissible code magnitude, `2^(bits-1)`.
    pub fn qmax(&self) -> i64 {
        1i64 << (self.bits - 1)
    }
}

fn levels(bits: u32) -> f64 {
    (2f64).powi(bits as i32) - 1.0
}

fn check_container_bits(bits: u32) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(Error::invalid(format!("bit width {bits} outside 2..=32")));
    }
    Ok(())
}

fn check_quant_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::invalid(format!("bit width {bits} outside 2..=16")));
    }
    Ok(())
}

/// Integer tensor with a per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    values: Vec<i32>,
    scale: Scale,
    shape: Vec<usize>,
}

impl QTensor {
    pub fn new(values: Vec<i32>, scale: Scale, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, values.len())?;
        let qmax = scale.qmax();
        if let Some(v) = values.iter().find(|v| (**v as i64).abs() > qmax) {
            return Err(Error::invalid(format!(
                "code {v} exceeds the {}-bit range +/-{qmax}",
                scale.bits
            )));
        }
        Ok(QTensor {
            values,
            scale,
            shape,
        })
    }

    /// Saturates wide values into the scale's code range.
    pub fn from_wide(values: &[i64], scale: Scale, shape: Vec<usize>) -> Result<Self> {
        let qmax = scale.qmax();
        let values = values
            .iter()
            .map(|&v| v.clamp(-qmax, qmax) as i32)
            .collect();
        QTensor::new(values, scale, shape)
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank >= 1")
    }
}

/// Per-tensor scale from the largest magnitude in `t`.
pub fn compute_scale(t: &Tensor, bits: u32) -> Result<Scale> {
    scale_for_slice(t.data(), bits)
}

/// [`compute_scale`] over a raw slice; an empty slice is rejected.
pub fn scale_for_slice(data: &[f64], bits: u32) -> Result<Scale> {
    check_quant_bits(bits)?;
    if data.is_empty() {
        return Err(Error::invalid("cannot derive a scale from an empty tensor"));
    }
    let alpha = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Scale::from_alpha(alpha, bits)
}

pub fn quantize(t: &Tensor, s: Scale) -> QTensor {
    let values = t
        .data()
        .iter()
        .map(|&r| quantize_value(r, s) as i32)
        .collect();
    QTensor {
        values,
        scale: s,
        shape: t.shape().to_vec(),
    }
}

#[inline]
pub(crate) fn quantize_value(r: f64, s: Scale) -> i64 {
    let clipped = r.clamp(-s.alpha, s.alpha);
    // f64::round is half-away-from-zero.
    ((clipped / s.value).round() as i64).clamp(-s.qmax(), s.qmax())
}

pub fn dequantize(q: &QTensor) -> Tensor {
    let s = q.scale.value;
    Tensor {
        data: q.values.iter().map(|&v| v as f64 * s).collect(),
        shape: q.shape.clone(),
    }
}

/// Quantize then dequantize with the tensor's own scale.
pub fn fake_quantize(t: &Tensor, bits: u32) -> Result<Tensor> {
    let s = compute_scale(t, bits)?;
    Ok(dequantize(&quantize(t, s)))
}

/// Straight-through gradient: `upstream` where `-alpha <= r <= alpha`, zero elsewhere.
pub fn ste_grad(upstream: &Tensor, r: &Tensor, s: Scale) -> Result<Tensor> {
    if upstream.shape() != r.shape() {
        return Err(Error::invalid(format!(
            "upstream shape {:?} does not match input shape {:?}",
            upstream.shape(),
            r.shape()
        )));
    }
    let alpha = s.alpha();
    let data = upstream
        .data()
        .iter()
        .zip(r.data())
        .map(|(&g, &x)| {
            if (-alpha..=alpha).contains(&x) {
                g
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(data, r.shape().to_vec())
}

/// `mult * 2^-shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyadicScale {
    pub mult: i64,
    pub shift: u32,
}

impl DyadicScale {
    pub fn to_f64(self) -> f64 {
        self.mult as f64 / 2f64.powi(self.shift as i32)
    }

    /// `round(v * mult / 2^shift)` using a 64-bit product.
    pub fn apply(self, v: i64) -> Result<i64> {
        let prod = v.checked_mul(self.mult).ok_or_else(|| {
            Error::Overflow(format!(
                "{v} * {} overflows the 64-bit accumulator",
                self.mult
            ))
        })?;
        Ok(shift_round(prod, self.shift))
    }
}

/// Approximates `real_scale` by `b * 2^-c` with `b` a signed `precision_bits` integer.
///
/// The largest admissible `c` is chosen, then common factors of two are
/// cancelled, so powers of two come out exact (`0.5 -> (1, 1)`).
pub fn dyadic_approx(real_scale: f64, precision_bits: u32) -> Result<DyadicScale> {
    if !(real_scale.is_finite() && real_scale > 0.0) {
        return Err(Error::invalid(format!(
            "dyadic target {real_scale} must be finite and > 0"
        )));
    }
    if !(8..=31).contains(&precision_bits) {
        return Err(Error::invalid(format!(
            "dyadic precision {precision_bits} outside 8..=31"
        )));
    }
    let limit = ((1i64 << (precision_bits - 1)) - 1) as f64;
    let mut found = None;
    for c in (0..=MAX_DYADIC_SHIFT).rev() {
        let b = (real_scale * 2f64.powi(c as i32)).round();
        if b <= limit {
            if b >= 1.0 {
                found = Some((b as i64, c));
            }
            break;
        }
    }
    let (mut b, mut c) = match found {
        Some(bc) => bc,
        None if real_scale > limit => {
            let b = real_scale.round();
            if b >= i64::MAX as f64 {
                return Err(Error::Overflow(format!(
                    "dyadic target {real_scale} too large"
                )));
            }
            (b as i64, 0)
        }
        None => {
            return Err(Error::invalid(format!(
                "dyadic target {real_scale} below 2^-{MAX_DYADIC_SHIFT}"
            )))
        }
    };
    while c > 0 && b % 2 == 0 {
        b /= 2;
        c -= 1;
    }
    Ok(DyadicScale { mult: b, shift: c })
}

/// Dyadic approximation of a signed real; zero maps to a zero multiplier.
pub(crate) fn signed_dyadic(real: f64, precision_bits: u32) -> Result<DyadicScale> {
    if real == 0.0 {
        return Ok(DyadicScale { mult: 0, shift: 0 });
    }
    let d = dyadic_approx(real.abs(), precision_bits)?;
    Ok(DyadicScale {
        mult: if real < 0.0 { -d.mult } else { d.mult },
        shift: d.shift,
    })
}

/// Rescales codes from `q.scale` to `new_scale` with an integer multiply and shift.
/// Results saturate to the new scale's code range.
pub fn requantize(q: &QTensor, new_scale: Scale, precision_bits: u32) -> Result<QTensor> {
    let wide: Vec<i64> = q.values.iter().map(|&v| v as i64).collect();
    let out = requantize_wide(&wide, q.scale.value, new_scale, precision_bits)?;
    QTensor::from_wide(&out, new_scale, q.shape.clone())
}

/// [`requantize`] for accumulator-width codes; output is not saturated.
pub(crate) fn requantize_wide(
    values: &[i64],
    from_scale: f64,
    to: Scale,
    precision_bits: u32,
) -> Result<Vec<i64>> {
    let ratio = from_scale / to.value();
    let d = dyadic_approx(ratio, precision_bits)?;
    values.iter().map(|&v| d.apply(v)).collect()
}

/// Arithmetic right shift rounding half away from zero.
#[inline]
pub fn shift_round(v: i64, shift: u32) -> i64 {
    shift_round_i128(v as i128, shift) as i64
}

#[inline]
pub(crate) fn shift_round_i128(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    if shift >= 127 {
        return 0;
    }
    let half = 1i128 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// Integer division rounding half away from zero; `den > 0`.
#[inline]
pub(crate) fn div_round_i128(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}
