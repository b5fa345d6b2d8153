/// Iteration budget used by the shift-based LayerNorm.
pub const IVIT_ISQRT_ITERS: u32 = 10;

/// `floor(sqrt(n))` by Newton iteration from `2^ceil(bitlen(n)/2)`.
///
/// The halving is a right shift. If the budget runs out before the iterate
/// stops decreasing, a monotone correction brings it to the exact floor.
pub fn isqrt_newton(n: u64, max_iters: u32) -> u64 {
    if n < 2 {
        return n;
    }
    let bitlen = 64 - n.leading_zeros();
    let mut x: u64 = 1u64 << bitlen.div_ceil(2);
    for _ in 0..max_iters {
        let next = (x + n / x) >> 1;
        if next >= x {
            break;
        }
        x = next;
    }
    // Correction for a truncated iteration: step down, then up.
    while x.checked_mul(x).is_none_or(|sq| sq > n) {
        x -= 1;
    }
    while (x + 1).checked_mul(x + 1).is_some_and(|sq| sq <= n) {
        x += 1;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_values() {
        assert_eq!(isqrt_newton(0, 10), 0);
        assert_eq!(isqrt_newton(1, 10), 1);
        assert_eq!(isqrt_newton(16, 10), 4);
        assert_eq!(isqrt_newton(17, 10), 4);
        assert_eq!(isqrt_newton(u64::MAX, 64), u32::MAX as u64);
    }

    #[test]
    fn budget_of_zero_still_exact() {
        for n in [2u64, 99, 1 << 40, 123_456_789_012] {
            assert_eq!(isqrt_newton(n, 0), (n as f64).sqrt().floor() as u64);
        }
    }

    proptest! {
        #[test]
        fn matches_float_floor(n in 0u64..(1u64 << 52)) {
            let r = isqrt_newton(n, IVIT_ISQRT_ITERS);
            prop_assert!(r * r <= n && (r + 1) * (r + 1) > n);
        }
    }
}
