//! Integer-only approximations of the transformer non-linearities.
//!
//! Three families are provided: polynomial (`IBert`), logarithmic /
//! power-of-two (`FqVit`) and shift-based (`IVit`). GELU has no `FqVit`
//! variant, so the per-kind option counts are softmax 3, GELU 2, LayerNorm 3.

mod consts;
mod exp;
mod gelu;
mod isqrt;
mod layernorm;
mod softmax;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QTensor, Scale, Tensor};

pub use consts::{ERF_A, ERF_B, EXP2_MANTISSA_M, IEXP_A, IEXP_B, IEXP_C};
pub use exp::{poly_iexp, shift_exp, EXP_FRAC_BITS};
pub use gelu::{gelu_ibert, gelu_ivit, SIGMOID_FRAC_BITS};
pub use isqrt::{isqrt_newton, IVIT_ISQRT_ITERS};
pub use layernorm::{
    calibrate_layernorm, layernorm_fqvit, layernorm_fqvit_ptf, layernorm_ibert, layernorm_ivit,
    ptf_dequantize, ptf_quantize, ptf_requantize, CalibStats, LN_EPS, PTF_MIN_EXP,
};
pub use softmax::{softmax_fqvit, softmax_ibert, softmax_ivit, SOFTMAX_OUT_BITS};

/// Approximation family. The declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodId {
    #[serde(rename = "ibert")]
    IBert,
    #[serde(rename = "fqvit")]
    FqVit,
    #[serde(rename = "ivit")]
    IVit,
}

impl MethodId {
    pub const ALL: [MethodId; 3] = [MethodId::IBert, MethodId::FqVit, MethodId::IVit];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::IBert => "ibert",
            MethodId::FqVit => "fqvit",
            MethodId::IVit => "ivit",
        }
    }

    /// Display name used in tables.
    pub fn label(self) -> &'static str {
        match self {
            MethodId::IBert => "I-BERT",
            MethodId::FqVit => "FQ-ViT",
            MethodId::IVit => "I-ViT",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ibert" => Ok(MethodId::IBert),
            "fqvit" => Ok(MethodId::FqVit),
            "ivit" => Ok(MethodId::IVit),
            _ => Err(Error::parse(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Softmax,
    Gelu,
    LayerNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Softmax, OpKind::Gelu, OpKind::LayerNorm];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layernorm",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OpKind::Softmax => "Softmax",
            OpKind::Gelu => "GELU",
            OpKind::LayerNorm => "LayerNorm",
        }
    }

    /// Methods that implement this kind, in tie-break order.
    pub fn methods(self) -> &'static [MethodId] {
        match self {
            OpKind::Gelu => &[MethodId::IBert, MethodId::IVit],
            _ => &MethodId::ALL,
        }
    }

    pub fn supports(self, m: MethodId) -> bool {
        self.methods().contains(&m)
    }

    pub fn option_count(self) -> usize {
        self.methods().len()
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(OpKind::Softmax),
            "gelu" => Ok(OpKind::Gelu),
            "layernorm" => Ok(OpKind::LayerNorm),
            _ => Err(Error::parse(format!("unknown op kind {s:?}"))),
        }
    }
}

/// How the integer codes of a [`KernelOutput`] map back to reals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Encoding {
    /// `code * scale`.
    Linear,
    /// `2^-code`; `floor_code` is the clipped minimum and stands for zero.
    Log2 { floor_code: i32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutput {
    pub q: QTensor,
    pub encoding: Encoding,
}

impl KernelOutput {
    pub(crate) fn linear(q: QTensor) -> Self {
        KernelOutput {
            q,
            encoding: Encoding::Linear,
        }
    }

    pub fn scale(&self) -> Scale {
        self.q.scale()
    }

    pub fn dequantize(&self) -> Tensor {
        match self.encoding {
            Encoding::Linear => crate::quant::dequantize(&self.q),
            Encoding::Log2 { floor_code } => {
                let data = self
                    .q
                    .values()
                    .iter()
                    .map(|&c| if c >= floor_code { 0.0 } else { 2f64.powi(-c) })
                    .collect();
                Tensor::new(data, self.q.shape().to_vec()).expect("finite powers of two")
            }
        }
    }
}

/// Per-feature affine parameters of a LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl AffineParams {
    pub fn new(gamma: Tensor, beta: Tensor) -> Result<Self> {
        if gamma.shape().len() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::invalid(format!(
                "gamma {:?} and beta {:?} must be equal-length vectors",
                gamma.shape(),
                beta.shape()
            )));
        }
        Ok(AffineParams { gamma, beta })
    }

    /// `gamma = 1`, `beta = 0`.
    pub fn identity(dim: usize) -> Result<Self> {
        AffineParams::new(
            Tensor::from_vec(vec![1.0; dim])?,
            Tensor::from_vec(vec![0.0; dim])?,
        )
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Flat indices of every 1-D lane of `shape` along `axis`.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> Result<Vec<Vec<usize>>> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            out.push((0..len).map(|k| base + k * inner).collect());
        }
    }
    Ok(out)
}

/// Float references for the non-linearities, used by tests, benchmarks and
/// the full-precision model.
pub mod reference {
    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    /// `x * sigmoid(1.702 x)`.
    pub fn gelu_sigmoid(x: f64) -> f64 {
        x / (1.0 + (-1.702 * x).exp())
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.into_iter().map(|v| v / sum).collect()
    }

    pub fn layernorm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter()
            .zip(gamma.iter().zip(beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_counts() {
        assert_eq!(OpKind::Softmax.option_count(), 3);
        assert_eq!(OpKind::Gelu.option_count(), 2);
        assert_eq!(OpKind::LayerNorm.option_count(), 3);
        assert!(!OpKind::Gelu.supports(MethodId::FqVit));
    }

    #[test]
    fn method_order_and_names() {
        assert!(MethodId::IBert < MethodId::FqVit && MethodId::FqVit < MethodId::IVit);
        for m in MethodId::ALL {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
        }
        assert_eq!("I-ViT".parse::<MethodId>().unwrap(), MethodId::IVit);
        assert!("packqvit".parse::<MethodId>().is_err());
    }

    #[test]
    fn lanes_cover_axis() {
        let l = lanes(&[2, 3], 1).unwrap();
        assert_eq!(l, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let l = lanes(&[2, 3], 0).unwrap();
        assert_eq!(l, vec![vec![0, 3], vec![1, 4], vec![2, 5]]);
        assert!(lanes(&[2, 3], 2).is_err());
    }
}
