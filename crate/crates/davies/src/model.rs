//! Microscopic model: system Hamiltonian, coupling operators, and the
//! superoperator algebra they generate.
//!
//! A [`Superoperator`] is a d²×d² complex matrix acting on column-stacked
//! d×d matrices (see [`crate::linalg`] for the convention). Left/right
//! multiplication operators, the free propagator e^{-it·ad(H_S)}, and the
//! Bohr (spectral) decomposition of H_S live here.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    check_hermitian, herm_eig, identity, kron, spectral_norm, unvec, vec_mat, CMat, CVec,
};

/// Relative Hermiticity tolerance for model inputs. Inputs failing it are
/// rejected, not symmetrized.
pub const TOL_HERM: f64 = 1e-10;

/// System Hamiltonian, coupling operators and coupling strength.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub dim: usize,
    pub h_s: CMat,
    pub couplings: Vec<CMat>,
    pub lambda: f64,
}

impl SystemModel {
    pub fn new(h_s: CMat, couplings: Vec<CMat>, lambda: f64) -> Result<Self> {
        let dim = h_s.nrows();
        if h_s.ncols() != dim {
            return Err(Error::Invalid("h_s must be square".into()));
        }
        if couplings.is_empty() {
            return Err(Error::Invalid("couplings must be nonempty".into()));
        }
        check_hermitian(&h_s, TOL_HERM)?;
        for d in &couplings {
            if d.nrows() != dim || d.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: d.nrows(),
                });
            }
            check_hermitian(d, TOL_HERM)?;
        }
        Ok(SystemModel {
            dim,
            h_s,
            couplings,
            lambda,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.couplings.len()
    }

    /// Eigendecomposition of H_S (ascending eigenvalues, unitary columns).
    pub fn eigensystem(&self) -> Result<(Array1<f64>, CMat)> {
        herm_eig(&self.h_s)
    }

    /// Operator norms ‖D_i‖ (largest singular values).
    pub fn coupling_norms(&self) -> Vec<f64> {
        self.couplings.iter().map(spectral_norm).collect()
    }

    pub fn max_coupling_norm(&self) -> f64 {
        self.coupling_norms().into_iter().fold(0.0, f64::max)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut m = self.clone();
        m.lambda = lambda;
        m
    }
}

/// JSON form: complex entries as [re, im], matrices row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub h_s: Vec<[f64; 2]>,
    pub couplings: Vec<Vec<[f64; 2]>>,
    pub lambda: f64,
}

pub fn mat_from_rowmajor(dim: usize, entries: &[[f64; 2]]) -> Result<CMat> {
    if entries.len() != dim * dim {
        return Err(Error::Invalid(format!(
            "matrix needs {} entries, got {}",
            dim * dim,
            entries.len()
        )));
    }
    let mut m = Array2::zeros((dim, dim));
    for r in 0..dim {
        for c in 0..dim {
            let e = entries[r * dim + c];
            m[[r, c]] = C64::new(e[0], e[1]);
        }
    }
    Ok(m)
}

pub fn mat_to_rowmajor(m: &CMat) -> Vec<[f64; 2]> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            out.push([m[[r, c]].re, m[[r, c]].im]);
        }
    }
    out
}

impl ModelConfig {
    pub fn build(&self) -> Result<SystemModel> {
        let h_s = mat_from_rowmajor(self.dim, &self.h_s)?;
        let couplings = self
            .couplings
            .iter()
            .map(|d| mat_from_rowmajor(self.dim, d))
            .collect::<Result<Vec<_>>>()?;
        SystemModel::new(h_s, couplings, self.lambda)
    }

    pub fn from_model(m: &SystemModel) -> Self {
        ModelConfig {
            dim: m.dim,
            h_s: mat_to_rowmajor(&m.h_s),
            couplings: m.couplings.iter().map(mat_to_rowmajor).collect(),
            lambda: m.lambda,
        }
    }
}

/// A linear map on d×d matrices, stored as its d²×d² matrix.
#[derive(Debug, Clone)]
pub struct Superoperator {
    pub dim: usize,
    pub mat: CMat,
}

impl Superoperator {
    pub fn from_mat(dim: usize, mat: CMat) -> Result<Self> {
        if mat.nrows() != dim * dim || mat.ncols() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: mat.nrows(),
            });
        }
        Ok(Superoperator { dim, mat })
    }

    pub fn identity(dim: usize) -> Self {
        Superoperator {
            dim,
            mat: Array2::eye(dim * dim),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Superoperator {
            dim,
            mat: Array2::zeros((dim * dim, dim * dim)),
        }
    }

    pub fn apply(&self, s: &CMat) -> CMat {
        unvec(&self.mat.dot(&vec_mat(s)), self.dim)
    }

    /// self ∘ other (apply `other` first).
    pub fn compose(&self, other: &Superoperator) -> Superoperator {
        Superoperator {
            dim: self.dim,
            mat: self.mat.dot(&other.mat),
        }
    }

    pub fn add(&self, other: &Superoperator) -> Superoperator {
        Superoperator {
            dim: self.dim,
            mat: &self.mat + &other.mat,
        }
    }

    pub fn sub(&self, other: &Superoperator) -> Superoperator {
        Superoperator {
            dim: self.dim,
            mat: &self.mat - &other.mat,
        }
    }

    pub fn scale(&self, z: C64) -> Superoperator {
        Superoperator {
            dim: self.dim,
            mat: self.mat.mapv(|x| x * z),
        }
    }

    pub fn pow(&self, n: usize) -> Superoperator {
        let mut acc = Superoperator::identity(self.dim);
        for _ in 0..n {
            acc = acc.compose(self);
        }
        acc
    }

    /// Spectral norm of the matrix representation.
    pub fn norm(&self) -> f64 {
        spectral_norm(&self.mat)
    }

    /// ‖⟨vec(1)| mat − ⟨vec(1)|‖: zero for a trace-preserving map.
    pub fn trace_preservation_residual(&self) -> f64 {
        let w = vec_mat(&identity(self.dim));
        let row = left_apply(&w, &self.mat);
        (&row - &w).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// ‖⟨vec(1)| mat‖: zero for a trace-annihilating generator.
    pub fn trace_annihilation_residual(&self) -> f64 {
        let w = vec_mat(&identity(self.dim));
        let row = left_apply(&w, &self.mat);
        row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Rank-1 superoperator |A⟩⟨A'|: S ↦ Tr[(A')† S]·A.
    pub fn rank_one(a: &CMat, a_prime: &CMat) -> Superoperator {
        let d = a.nrows();
        let va = vec_mat(a);
        let vap = vec_mat(a_prime);
        let mut mat = Array2::zeros((d * d, d * d));
        for r in 0..d * d {
            for c in 0..d * d {
                mat[[r, c]] = va[r] * vap[c].conj();
            }
        }
        Superoperator { dim: d, mat }
    }
}

/// ⟨w| M (row-vector times matrix) with the antilinear pairing ⟨w|v⟩ = Σ w̄ᵢvᵢ.
fn left_apply(w: &CVec, m: &CMat) -> CVec {
    let n = m.ncols();
    let mut out = Array1::zeros(n);
    for c in 0..n {
        let mut acc = C64::new(0.0, 0.0);
        for r in 0..m.nrows() {
            acc += w[r].conj() * m[[r, c]];
        }
        out[c] = acc;
    }
    out
}

/// M_Le(A): S ↦ A·S, matrix I ⊗ A.
pub fn left_mult(a: &CMat) -> Result<Superoperator> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::Invalid("left_mult: matrix must be square".into()));
    }
    Ok(Superoperator {
        dim: d,
        mat: kron(&identity(d), a),
    })
}

/// M_Ri(A): S ↦ S·A†, matrix conj(A) ⊗ I.
pub fn right_mult(a: &CMat) -> Result<Superoperator> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::Invalid("right_mult: matrix must be square".into()));
    }
    Ok(Superoperator {
        dim: d,
        mat: kron(&a.mapv(|z| z.conj()), &identity(d)),
    })
}

/// e^{-it·ad(H_S)}: S ↦ e^{-itH} S e^{itH}; unitary as a superoperator.
pub fn ad_hs_propagator(model: &SystemModel, t: f64) -> Result<Superoperator> {
    let u = crate::linalg::expm_herm(&model.h_s, C64::new(0.0, -t))?;
    Ok(Superoperator {
        dim: model.dim,
        mat: kron(&u.mapv(|z| z.conj()), &u),
    })
}

/// Spectral decomposition of H_S with eigenvalues clustered to `tol_bohr`.
#[derive(Debug, Clone)]
pub struct BohrDecomposition {
    /// Cluster representatives (mean eigenvalue per cluster), ascending.
    pub eigenvalues: Vec<f64>,
    /// Spectral projectors P(e), same order.
    pub projectors: Vec<CMat>,
    /// Sorted, deduplicated Bohr frequencies e - e'. Contains 0.
    pub bohr_frequencies: Vec<f64>,
    /// Set when two cluster representatives are closer than 10·tol_bohr.
    pub ambiguous: bool,
    pub tol: f64,
}

impl BohrDecomposition {
    pub fn nondegenerate(&self) -> bool {
        self.projectors
            .iter()
            .all(|p| (crate::linalg::trace(p).re - 1.0).abs() < 1e-9)
    }
}

/// Cluster the spectrum of H_S by single linkage on sorted eigenvalues.
pub fn bohr_decompose(model: &SystemModel, tol_bohr: f64) -> Result<BohrDecomposition> {
    if tol_bohr <= 0.0 {
        return Err(Error::Invalid("tol_bohr must be positive".into()));
    }
    let (vals, vecs) = model.eigensystem()?;
    let d = model.dim;
    // indices sorted by eigenvalue (eigh returns ascending already)
    let mut clusters: Vec<Vec<usize>> = vec![vec![0]];
    for k in 1..d {
        if vals[k] - vals[k - 1] <= tol_bohr {
            clusters.last_mut().unwrap().push(k);
        } else {
            clusters.push(vec![k]);
        }
    }
    let mut energies = Vec::new();
    let mut projectors = Vec::new();
    for cl in &clusters {
        let e = cl.iter().map(|&k| vals[k]).sum::<f64>() / cl.len() as f64;
        let mut p: CMat = Array2::zeros((d, d));
        for &k in cl {
            let col = vecs.column(k);
            for r in 0..d {
                for c in 0..d {
                    p[[r, c]] += col[r] * col[c].conj();
                }
            }
        }
        energies.push(e);
        projectors.push(p);
    }
    let ambiguous = energies
        .windows(2)
        .any(|w| (w[1] - w[0]).abs() < 10.0 * tol_bohr);
    // Bohr frequencies: all differences, grouped with the same tolerance
    let mut freqs: Vec<f64> = Vec::new();
    for &e in &energies {
        for &ep in &energies {
            freqs.push(e - ep);
        }
    }
    freqs.sort_by(f64::total_cmp);
    let mut bohr: Vec<f64> = Vec::new();
    for f in freqs {
        match bohr.last() {
            Some(&last) if (f - last).abs() <= tol_bohr => {}
            _ => bohr.push(f),
        }
    }
    if !bohr.iter().any(|f| f.abs() <= tol_bohr) {
        bohr.push(0.0);
        bohr.sort_by(f64::total_cmp);
    }
    Ok(BohrDecomposition {
        eigenvalues: energies,
        projectors,
        bohr_frequencies: bohr,
        ambiguous,
        tol: tol_bohr,
    })
}

/// Default Bohr clustering tolerance: 1e-9·‖H_S‖ (with an absolute floor).
pub fn default_bohr_tol(model: &SystemModel) -> f64 {
    (1e-9 * spectral_norm(&model.h_s)).max(1e-14)
}

/// The jump operator A_j(ω) = Σ_{e'-e=ω} P(e) D_j P(e'), so that
/// D_j(t) = Σ_ω e^{-iωt} A_j(ω) and A_j(ω)† = A_j(-ω).
pub fn jump_operator(bd: &BohrDecomposition, d_op: &CMat, omega: f64) -> CMat {
    let d = d_op.nrows();
    let mut a: CMat = Array2::zeros((d, d));
    for (ie, pe) in bd.projectors.iter().enumerate() {
        for (iep, pep) in bd.projectors.iter().enumerate() {
            let w = bd.eigenvalues[iep] - bd.eigenvalues[ie];
            if (w - omega).abs() <= bd.tol.max(1e-12) {
                a += &pe.dot(d_op).dot(pep);
            }
        }
    }
    a
}
