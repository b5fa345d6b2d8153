//! Polynomial constants frozen from `data/approx_constants.txt`.

/// `exp(r) ~ a (r + b)^2 + c` on `[-ln 2, 0]`.
pub const IEXP_A: f64 = 0.3565968473680753;
pub const IEXP_B: f64 = 1.349998874874131;
pub const IEXP_C: f64 = 0.34802626206304366;

/// `2^r ~ 1 + r + m (r^2 - r)` on `[0, 1]`.
pub const EXP2_MANTISSA_M: f64 = 0.34363413890962347;

/// `erf(x) ~ sign(x) (a (min(|x|, -b) + b)^2 + 1)`.
pub const ERF_A: f64 = -0.35719760511717774;
pub const ERF_B: f64 = -1.6687055178371981;
