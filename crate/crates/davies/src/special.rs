//! Special functions needed for closed-form bath correlations.

use num_complex::Complex64 as C64;

// Bernoulli numbers B_2, B_4, ... B_14 for the asymptotic series.
const BERNOULLI: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// Trigamma function ψ'(z) for complex z with Re z > 0.
///
/// Recurrence ψ'(z) = ψ'(z+1) + 1/z² until |z| is large, then the standard
/// asymptotic series. Accurate to ~1e-13 on the domain used here.
pub fn trigamma(mut z: C64) -> C64 {
    assert!(z.re > 0.0, "trigamma implemented for Re z > 0");
    let mut acc = C64::new(0.0, 0.0);
    while z.norm() < 12.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    // ψ'(z) ≈ 1/z + 1/(2z²) + Σ_k B_{2k} / z^{2k+1}
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = inv + 0.5 * inv2;
    let mut pow = inv * inv2; // z^{-3}
    for b in BERNOULLI {
        series += b * pow;
        pow *= inv2;
    }
    acc + series
}
