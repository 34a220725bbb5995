//! Dense complex linear algebra helpers shared across the crate.
//!
//! Matrices on the system space are `d×d` arrays of `Complex64`; superoperators
//! are `d²×d²` arrays acting on column-stacked matrices. The column-stacking
//! convention is fixed project-wide: `vec(S)[r + d*c] = S[r, c]`, so that
//! `vec(A S B) = (Bᵀ ⊗ A) vec(S)` with the usual Kronecker product.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, Eigh, SVD, UPLO};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

pub fn identity(d: usize) -> CMat {
    Array2::eye(d)
}

pub fn dagger(m: &CMat) -> CMat {
    m.t().mapv(|z| z.conj())
}

pub fn trace(m: &CMat) -> C64 {
    m.diag().sum()
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(m: &CMat) -> f64 {
    if m.iter().all(|z| z.norm_sqr() == 0.0) {
        return 0.0;
    }
    let (_, s, _) = m.svd(false, false).expect("svd failed");
    s.iter().cloned().fold(0.0, f64::max)
}

/// Trace norm (sum of singular values).
pub fn trace_norm(m: &CMat) -> f64 {
    if m.iter().all(|z| z.norm_sqr() == 0.0) {
        return 0.0;
    }
    let (_, s, _) = m.svd(false, false).expect("svd failed");
    s.sum()
}

/// Relative Hermiticity deviation ‖M − M†‖_F / ‖M‖_F (0 for the zero matrix).
pub fn hermiticity_deviation(m: &CMat) -> f64 {
    let n = frobenius(m);
    if n == 0.0 {
        return 0.0;
    }
    frobenius(&(m - &dagger(m))) / n
}

pub fn check_hermitian(m: &CMat, tol: f64) -> Result<()> {
    let dev = hermiticity_deviation(m);
    if dev > tol {
        Err(Error::NotHermitian { deviation: dev, tol })
    } else {
        Ok(())
    }
}

/// (M + M†)/2.
pub fn hermitize(m: &CMat) -> CMat {
    (m + &dagger(m)).mapv(|z| 0.5 * z)
}

/// Column-stacking vectorization.
pub fn vec_mat(s: &CMat) -> CVec {
    let d = s.nrows();
    let mut v = Array1::zeros(d * d);
    for c in 0..d {
        for r in 0..d {
            v[r + d * c] = s[[r, c]];
        }
    }
    v
}

pub fn unvec(v: &CVec, d: usize) -> CMat {
    let mut m = Array2::zeros((d, d));
    for c in 0..d {
        for r in 0..d {
            m[[r, c]] = v[r + d * c];
        }
    }
    m
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    ndarray::linalg::kron(a, b)
}

/// Eigendecomposition of a Hermitian matrix; eigenvalues ascending,
/// eigenvectors in columns.
///
/// The LAPACK binding returns eigenvectors of conj(M) when handed a
/// row-major complex array, so the result is verified against the residual
/// ‖Mv - λv‖ and conjugated if needed.
pub fn herm_eig(m: &CMat) -> Result<(Array1<f64>, CMat)> {
    let (vals, vecs) = m.eigh(UPLO::Lower)?;
    let resid = |v: &CMat| -> f64 {
        let mv = m.dot(v);
        let mut s = 0.0;
        for k in 0..m.nrows() {
            for r in 0..m.nrows() {
                s += (mv[[r, k]] - vals[k] * v[[r, k]]).norm_sqr();
            }
        }
        s
    };
    let conj = vecs.mapv(|z| z.conj());
    if resid(&conj) < resid(&vecs) {
        Ok((vals, conj))
    } else {
        Ok((vals, vecs))
    }
}

/// Eigendecomposition of a general complex matrix.
pub fn gen_eig(m: &CMat) -> Result<(CVec, CMat)> {
    let (vals, vecs) = m.eig()?;
    Ok((vals, vecs))
}

/// e^{z H} for Hermitian H.
pub fn expm_herm(h: &CMat, z: C64) -> Result<CMat> {
    let (vals, vecs) = herm_eig(h)?;
    let d = h.nrows();
    let mut out = Array2::zeros((d, d));
    for k in 0..d {
        let phase = (z * vals[k]).exp();
        let col = vecs.column(k);
        for r in 0..d {
            for c in 0..d {
                out[[r, c]] += phase * col[r] * col[c].conj();
            }
        }
    }
    Ok(out)
}

/// e^{M} for a general (small) matrix, via scaling and squaring with a Taylor core.
pub fn expm(m: &CMat) -> CMat {
    let norm = frobenius(m);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = C64::new(1.0 / f64::powi(2.0, squarings as i32), 0.0);
    let ms = m.mapv(|z| z * scale);
    let d = m.nrows();
    let mut term: CMat = Array2::eye(d);
    let mut acc: CMat = Array2::eye(d);
    for k in 1..=24 {
        term = term.dot(&ms).mapv(|z| z / (k as f64));
        acc += &term;
        if frobenius(&term) < 1e-18 * frobenius(&acc) {
            break;
        }
    }
    let mut out = acc;
    for _ in 0..squarings {
        out = out.dot(&out);
    }
    out
}

/// Random Hermitian matrix with entries of order 1 (test and sweep helper).
pub fn random_hermitian(d: usize, rng: &mut impl rand::Rng) -> CMat {
    let mut m: CMat = Array2::zeros((d, d));
    for r in 0..d {
        for c in 0..d {
            m[[r, c]] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
    }
    hermitize(&m)
}
