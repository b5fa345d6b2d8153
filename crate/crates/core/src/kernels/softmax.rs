use super::exp::{poly_exp_q20, shift_exp_q20, to_q20};
use super::{lanes, Encoding, KernelOutput};
use crate::error::{Error, Result};
use crate::quant::{QTensor, Scale};

/// Output bits of the linear softmax kernels; the scale is `2^-SOFTMAX_OUT_BITS`.
pub const SOFTMAX_OUT_BITS: u32 = 8;

/// Fractional bits of the sum/term ratio in the log2 kernel.
const RATIO_BITS: u32 = 16;

/// Integer exp terms of each lane after subtracting the lane maximum.
fn exp_lanes(
    q: &QTensor,
    axis: usize,
    exp: fn(i64) -> Result<i64>,
) -> Result<(Vec<Vec<usize>>, Vec<i64>)> {
    let idx = lanes(q.shape(), axis)?;
    let v = q.values();
    let mut terms = vec![0i64; v.len()];
    for lane in &idx {
        let max = lane.iter().map(|&i| v[i]).max().expect("non-empty lane") as i64;
        let shifted: Vec<i64> = lane.iter().map(|&i| v[i] as i64 - max).collect();
        for (&i, x) in lane.iter().zip(to_q20(&shifted, q.scale())?) {
            terms[i] = exp(x)?;
        }
    }
    Ok((idx, terms))
}

fn linear_softmax(q: &QTensor, axis: usize, exp: fn(i64) -> Result<i64>) -> Result<KernelOutput> {
    let (idx, terms) = exp_lanes(q, axis, exp)?;
    let mut out = vec![0i64; terms.len()];
    for lane in &idx {
        let sum: i128 = lane.iter().map(|&i| terms[i] as i128).sum();
        // The max element has term e^0 > 0, so the sum is positive.
        debug_assert!(sum > 0);
        for &i in lane {
            let num = (terms[i] as i128) << SOFTMAX_OUT_BITS;
            out[i] = ((2 * num + sum) / (2 * sum)) as i64;
        }
    }
    let scale = Scale::pow2(-(SOFTMAX_OUT_BITS as i32), SOFTMAX_OUT_BITS + 1)?;
    Ok(KernelOutput::linear(QTensor::from_wide(
        &out,
        scale,
        q.shape().to_vec(),
    )?))
}

/// Softmax along `axis` with the shift-based exponential.
pub fn softmax_ivit(q: &QTensor, axis: usize) -> Result<KernelOutput> {
    linear_softmax(q, axis, shift_exp_q20)
}

/// Softmax along `axis` with the polynomial exponential.
pub fn softmax_ibert(q: &QTensor, axis: usize) -> Result<KernelOutput> {
    linear_softmax(q, axis, poly_exp_q20)
}

/// `round(log2(r))` for `r >= 1`, with the half-step decided exactly.
fn round_log2(r: u128) -> u32 {
    let l = 127 - r.leading_zeros();
    // r >= 2^(l + 1/2)  <=>  r^2 >= 2^(2l + 1)
    let up = r.checked_mul(r).is_none_or(|sq| sq >= 1u128 << (2 * l + 1));
    l + up as u32
}

/// Log2-quantized softmax: code `c` stands for `2^-c`; the top code stands for zero.
pub fn softmax_fqvit(q: &QTensor, axis: usize, out_bits: u32) -> Result<KernelOutput> {
    if out_bits != 4 && out_bits != 8 {
        return Err(Error::invalid(format!(
            "log2 softmax output bits must be 4 or 8, got {out_bits}"
        )));
    }
    let floor_code = (1i64 << out_bits) - 1;
    let (idx, terms) = exp_lanes(q, axis, poly_exp_q20)?;
    let mut out = vec![floor_code; terms.len()];
    for lane in &idx {
        let sum: u128 = lane.iter().map(|&i| terms[i] as u128).sum();
        for &i in lane {
            let t = terms[i] as u128;
            if t == 0 {
                continue;
            }
            let ratio = (sum << RATIO_BITS) / t;
            let code = round_log2(ratio) as i64 - RATIO_BITS as i64;
            out[i] = code.clamp(0, floor_code);
        }
    }
    let scale = Scale::pow2(0, out_bits + 1)?;
    Ok(KernelOutput {
        q: QTensor::from_wide(&out, scale, q.shape().to_vec())?,
        encoding: Encoding::Log2 {
            floor_code: floor_code as i32,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::reference;
    use crate::quant::{compute_scale, dequantize, quantize, Tensor};
    use proptest::prelude::*;

    fn q8(data: Vec<f64>, shape: Vec<usize>) -> QTensor {
        let t = Tensor::new(data, shape).unwrap();
        quantize(&t, compute_scale(&t, 8).unwrap())
    }

    #[test]
    fn constant_row_is_uniform() {
        for d in [1usize, 3, 4, 7, 64] {
            let q = q8(vec![0.7; d], vec![d]);
            for k in [softmax_ivit, softmax_ibert] {
                let y = k(&q, 0).unwrap().dequantize();
                for &v in y.data() {
                    assert!((v - 1.0 / d as f64).abs() <= 1.0 / 256.0, "d={d} v={v}");
                }
            }
        }
        let q = q8(vec![-1.5; 4], vec![4]);
        let y = softmax_fqvit(&q, 0, 8).unwrap();
        assert_eq!(y.q.values(), &[2, 2, 2, 2]);
        assert_eq!(y.dequantize().data(), &[0.25; 4]);
    }

    #[test]
    fn one_hot_dominant() {
        let q = q8(vec![-4.0, -4.0, 4.0, -4.0], vec![4]);
        for k in [softmax_ivit, softmax_ibert] {
            let y = k(&q, 0).unwrap();
            assert_eq!(y.q.values().iter().position(|&v| v == 256), Some(2));
        }
        let y = softmax_fqvit(&q, 0, 8).unwrap();
        assert_eq!(y.q.values()[2], 0);
        assert_eq!(y.dequantize().data()[2], 1.0);
    }

    #[test]
    fn axis_zero_of_matrix() {
        let q = q8(vec![1.0, 0.0, 1.0, 0.0], vec![2, 2]);
        let y = softmax_ivit(&q, 0).unwrap().dequantize();
        assert!((y.data()[0] - 0.5).abs() < 0.01);
        assert!((y.data()[1] - 0.5).abs() < 0.01);
        assert!(softmax_ivit(&q, 2).is_err());
    }

    #[test]
    fn round_log2_half_steps() {
        assert_eq!(round_log2(1), 0);
        assert_eq!(round_log2(2), 1);
        assert_eq!(round_log2(3), 2); // log2 3 = 1.58
        assert_eq!(round_log2(5), 2); // 2.32
        assert_eq!(round_log2(6), 3); // 2.58
        assert_eq!(round_log2(1 << 40), 40);
    }

    #[test]
    fn rejects_bad_out_bits() {
        let q = q8(vec![0.0; 4], vec![4]);
        assert!(softmax_fqvit(&q, 0, 6).is_err());
        assert!(softmax_fqvit(&q, 0, 4).is_ok());
    }

    proptest! {
        #[test]
        fn linear_rows_sum_near_one(v in prop::collection::vec(-4.0f64..4.0, 2..64)) {
            let n = v.len();
            let q = q8(v, vec![n]);
            for k in [softmax_ivit, softmax_ibert] {
                let s: f64 = k(&q, 0).unwrap().dequantize().data().iter().sum();
                prop_assert!((0.95..=1.05).contains(&s), "sum {}", s);
            }
        }

        #[test]
        fn nonnegative_and_argmax_kept(v in prop::collection::vec(-4.0f64..4.0, 2..32)) {
            let n = v.len();
            let q = q8(v, vec![n]);
            let x = dequantize(&q);
            let top = x.data().iter().enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            for y in [
                softmax_ivit(&q, 0).unwrap(),
                softmax_ibert(&q, 0).unwrap(),
                softmax_fqvit(&q, 0, 8).unwrap(),
            ] {
                let d = y.dequantize();
                prop_assert!(d.data().iter().all(|&p| p >= 0.0));
                prop_assert!(d.data().iter().all(|&p| p <= d.data()[top]));
            }
        }

        #[test]
        fn log2_codes_within_half_step(v in prop::collection::vec(-4.0f64..4.0, 2..32)) {
            let n = v.len();
            let q = q8(v, vec![n]);
            let reference = reference::softmax(dequantize(&q).data());
            let y = softmax_fqvit(&q, 0, 8).unwrap();
            for (&c, p) in y.q.values().iter().zip(reference) {
                if c < 255 {
                    let err = (-(c as f64) - p.log2()).abs();
                    // Half a log step plus the exponential fit error.
                    prop_assert!(err <= 0.5 + 0.02, "code {} p {}", c, p);
                }
            }
        }
    }
}
