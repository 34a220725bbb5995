//! Quasi-Monte-Carlo support: digit-scrambled Halton points with
//! Cranley–Patterson shifts, and the importance maps used for diagram
//! integrals. Everything is seeded, so runs are bit-reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const PRIMES: [u32; 40] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173,
];

/// Digit-scrambled Halton sequence in `dims` dimensions.
pub struct ScrambledHalton {
    dims: usize,
    perms: Vec<Vec<u32>>, // one digit permutation per dimension, fixing 0 is not required
    shift: Vec<f64>,      // Cranley–Patterson rotation
    index: u64,
}

impl ScrambledHalton {
    pub fn new(dims: usize, seed: u64, replicate: u32) -> Self {
        assert!(dims <= PRIMES.len(), "QMC dimension cap exceeded");
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let perms = PRIMES[..dims]
            .iter()
            .map(|&b| {
                let mut p: Vec<u32> = (0..b).collect();
                // Fisher–Yates with the shared stream keeps scrambles replicate-independent
                for i in (1..b as usize).rev() {
                    let j = rng.gen_range(0..=i);
                    p.swap(i, j);
                }
                p
            })
            .collect();
        let mut shift_rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(replicate as u64 + 1));
        let shift = (0..dims).map(|_| shift_rng.gen_range(0.0..1.0)).collect();
        ScrambledHalton {
            dims,
            perms,
            shift,
            index: 1,
        }
    }

    pub fn next_point(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dims);
        for d in 0..self.dims {
            let b = PRIMES[d] as u64;
            let perm = &self.perms[d];
            let mut n = self.index;
            let mut denom = 1.0;
            let mut x = 0.0;
            while n > 0 {
                denom *= b as f64;
                let digit = (n % b) as usize;
                x += perm[digit] as f64 / denom;
                n /= b;
            }
            let shifted = x + self.shift[d];
            out[d] = shifted - shifted.floor();
        }
        self.index += 1;
    }
}

/// Map ξ ∈ [0,1) to s ∈ [lo, hi) with logarithmic stretching toward `lo`
/// on the scale `c`. Returns (s, ds/dξ). Used so integrands concentrated at
/// small time separations are sampled where they live.
pub fn stretch_map(xi: f64, lo: f64, hi: f64, c: f64) -> (f64, f64) {
    let len = hi - lo;
    if len <= 0.0 {
        return (lo, 0.0);
    }
    let ratio = 1.0 + len / c;
    let log_ratio = ratio.ln();
    let g = ratio.powf(xi); // in [1, ratio]
    let s = lo + c * (g - 1.0);
    let jac = c * log_ratio * g;
    (s, jac)
}

/// Plain affine map ξ → [lo, hi); returns (x, jacobian).
pub fn uniform_map(xi: f64, lo: f64, hi: f64) -> (f64, f64) {
    (lo + xi * (hi - lo), hi - lo)
}
