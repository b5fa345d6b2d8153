//! Least-squares fits for the polynomial approximation constants.
//!
//! This is deliberately plain floating-point code with no dependency on the
//! crate under test: it is the oracle that produced the frozen constants.
//! `examples/fit_constants.rs` writes its output to `data/approx_constants.txt`.

/// Composite Simpson weights and abscissae on `[lo, hi]` with `panels` (even) panels.
fn simpson(lo: f64, hi: f64, panels: usize) -> Vec<(f64, f64)> {
    assert!(panels.is_multiple_of(2));
    let h = (hi - lo) / panels as f64;
    (0..=panels)
        .map(|i| {
            let w = if i == 0 || i == panels {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (lo + i as f64 * h, w * h / 3.0)
        })
        .collect()
}

fn solve3(mut m: [[f64; 4]; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                let pivot = m[col];
                for (dst, src) in m[row][col..].iter_mut().zip(&pivot[col..]) {
                    *dst -= f * src;
                }
            }
        }
    }
    [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
}

/// `exp(r) ~ a (r + b)^2 + c` on `[-ln 2, 0]`, returned as `(a, b, c)`.
pub fn fit_iexp() -> (f64, f64, f64) {
    let nodes = simpson(-std::f64::consts::LN_2, 0.0, 20_000);
    // Normal equations for c0 + c1 r + c2 r^2.
    let mut m = [[0.0; 4]; 3];
    for &(r, w) in &nodes {
        let basis = [1.0, r, r * r];
        let y = r.exp();
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += w * basis[i] * basis[j];
            }
            m[i][3] += w * basis[i] * y;
        }
    }
    let [c0, c1, c2] = solve3(m);
    let a = c2;
    let b = c1 / (2.0 * c2);
    let c = c0 - c1 * c1 / (4.0 * c2);
    (a, b, c)
}

/// `2^r ~ 1 + r + m (r^2 - r)` on `[0, 1]`: exact at both ends, `m` by least squares.
pub fn fit_exp2_mantissa() -> f64 {
    let nodes = simpson(0.0, 1.0, 20_000);
    let (mut num, mut den) = (0.0, 0.0);
    for &(r, w) in &nodes {
        let g = r * r - r;
        num += w * g * (r.exp2() - 1.0 - r);
        den += w * g * g;
    }
    num / den
}

/// Upper end of the erf fitting interval; erf is saturated well before it.
pub const ERF_FIT_SPAN: f64 = 4.0;

/// `erf(x) ~ a (min(x, -b) + b)^2 + 1` for `x >= 0`, returned as `(a, b)`.
///
/// For a fixed clip point `b` the optimal `a` is linear least squares; `b`
/// itself is found by golden-section search on the residual.
pub fn fit_erf() -> (f64, f64) {
    let nodes = simpson(0.0, ERF_FIT_SPAN, 40_000);
    let targets: Vec<f64> = nodes.iter().map(|&(x, _)| libm::erf(x) - 1.0).collect();
    let solve_a = |b: f64| -> (f64, f64) {
        let (mut num, mut den) = (0.0, 0.0);
        for (&(x, w), &y) in nodes.iter().zip(&targets) {
            let u = x.min(-b) + b;
            let g = u * u;
            num += w * g * y;
            den += w * g * g;
        }
        let a = num / den;
        let resid: f64 = nodes
            .iter()
            .zip(&targets)
            .map(|(&(x, w), &y)| {
                let u = x.min(-b) + b;
                let e = a * u * u - y;
                w * e * e
            })
            .sum();
        (a, resid)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-3.0f64, -1.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = solve_a(x1).1;
    let mut f2 = solve_a(x2).1;
    for _ in 0..120 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = solve_a(x1).1;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = solve_a(x2).1;
        }
    }
    let b = 0.5 * (lo + hi);
    (solve_a(b).0, b)
}

/// The constants file body: one `name = value` line per constant.
pub fn render_constants() -> String {
    let (ia, ib, ic) = fit_iexp();
    let m = fit_exp2_mantissa();
    let (ea, eb) = fit_erf();
    let mut s = String::new();
    s.push_str("# Least-squares polynomial constants; regenerate with\n");
    s.push_str("#   cargo run -p mixedq --example fit_constants\n");
    for (name, v) in [
        ("iexp_a", ia),
        ("iexp_b", ib),
        ("iexp_c", ic),
        ("exp2_mantissa_m", m),
        ("erf_a", ea),
        ("erf_b", eb),
    ] {
        s.push_str(&format!("{name} = {v:?}\n"));
    }
    s
}

/// Parses `name = value` lines, skipping comments.
pub fn parse_constants(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').expect("name = value");
            (
                k.trim().to_string(),
                v.trim().parse().expect("float constant"),
            )
        })
        .collect()
}
