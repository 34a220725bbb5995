//! Markov (Davies) generator: the pre-average generator L̃ from half-line
//! transforms of the bath correlations, the spectrally averaged L, the jump
//! rate chain on sp H_S, and the spectral-gap / mixing-time certificates.

use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::bath::{envelope, BathCorrelation};
use crate::error::{Error, Result};
use crate::linalg::{
    dagger, expm, frobenius, hermitize, identity, kron, spectral_norm, trace, unvec, CMat,
};
use crate::model::{
    bohr_decompose, default_bohr_tol, jump_operator, BohrDecomposition, Superoperator, SystemModel,
};
use crate::quad::{half_line_fourier, HalfLineOpts};

/// Half-line transform Γ(x) = ∫_0^∞ f(t) e^{ixt} dt of a bath correlation.
/// Both the real (dissipative) and imaginary (Lamb shift) parts are kept.
pub fn half_line_transform(bc: &BathCorrelation, j: usize, i: usize, x: f64) -> Result<C64> {
    let f = |t: f64| bc.correlation(j, i, t).expect("channels validated by caller");
    let t0 = (8.0 * bc.decay_scale()).max(8.0);
    let opts = HalfLineOpts {
        t0,
        max_doublings: 24,
        tol: 1e-9,
    };
    let r = half_line_fourier(&f, x, opts)?;
    if !r.converged {
        return Err(Error::AssumptionViolated {
            assumption: "Assumption 1 (decay of correlations)".into(),
            detail: format!(
                "half-line transform at x = {x} did not converge; windows {:?}",
                r.windows
            ),
        });
    }
    Ok(r.value)
}

/// Build L̃: the sum over left/right labels and channels of half-line time
/// integrals, evaluated per Bohr frequency of ad(H_S):
///
///   L̃ S = Σ_{i,j,ω} Γ_{j,i}(-ω) [D_i S A_j(ω) - A_j(ω) D_i S]
///                + Γ̄_{j,i}(+ω) [A_j(ω) S D_i - S D_i A_j(ω)]
///
/// with A_j(ω) the jump operators of D_j and Γ the half-line transform above.
pub fn build_l_tilde(model: &SystemModel, bc: &BathCorrelation) -> Result<Superoperator> {
    // Assumption 1 gate
    let _env = envelope(bc, model)?;
    let bd = bohr_decompose(model, default_bohr_tol(model))?;
    let d = model.dim;
    let eye = identity(d);
    let mut mat: CMat = Array2::zeros((d * d, d * d));
    for j in 0..model.n_channels() {
        // jump operators of channel j, skipping numerically empty blocks
        let jumps: Vec<(f64, CMat)> = bd
            .bohr_frequencies
            .iter()
            .map(|&w| (w, jump_operator(&bd, &model.couplings[j], w)))
            .filter(|(_, a)| frobenius(a) > 1e-14 * model.max_coupling_norm().max(1e-300))
            .collect();
        for i in 0..model.n_channels() {
            let di = &model.couplings[i];
            for (w, aj) in &jumps {
                let gamma_minus = half_line_transform(bc, j, i, -*w)?;
                let gamma_plus_conj = half_line_transform(bc, j, i, *w)?.conj();
                // D_i S A_j(ω) : (A_jᵀ ⊗ D_i)
                mat += &kron(&aj.t().to_owned(), di).mapv(|z| z * gamma_minus);
                // A_j(ω) D_i S : (I ⊗ A_j D_i)
                mat -= &kron(&eye, &aj.dot(di)).mapv(|z| z * gamma_minus);
                // A_j(ω) S D_i : (D_iᵀ ⊗ A_j)
                mat += &kron(&di.t().to_owned(), aj).mapv(|z| z * gamma_plus_conj);
                // S D_i A_j(ω) : ((D_i A_j)ᵀ ⊗ I)
                mat -= &kron(&di.dot(aj).t().to_owned(), &eye).mapv(|z| z * gamma_plus_conj);
            }
        }
    }
    Superoperator::from_mat(d, mat)
}

/// Spectral (secular) average: keep only the blocks of L̃ connecting equal
/// Bohr frequencies of ad(H_S). This realizes the infinite-time average
/// exactly; no limit numerics are involved.
pub fn spectral_average(l_tilde: &Superoperator, bd: &BohrDecomposition) -> Superoperator {
    let d = l_tilde.dim;
    let mut mat: CMat = Array2::zeros((d * d, d * d));
    for &w in &bd.bohr_frequencies {
        // superprojector onto the ad(H_S) eigenspace of frequency ω:
        // S ↦ Σ_{e-e'=ω} P(e) S P(e'), matrix Σ (P(e')ᵀ ⊗ P(e))
        let mut proj: CMat = Array2::zeros((d * d, d * d));
        for (ie, pe) in bd.projectors.iter().enumerate() {
            for (iep, pep) in bd.projectors.iter().enumerate() {
                let freq = bd.eigenvalues[ie] - bd.eigenvalues[iep];
                if (freq - w).abs() <= bd.tol.max(1e-12) {
                    proj += &kron(&pep.t().to_owned(), pe);
                }
            }
        }
        mat += &proj.dot(&l_tilde.mat).dot(&proj);
    }
    Superoperator { dim: d, mat }
}

/// Jump-rate chain on the nondegenerate spectrum of H_S:
/// rate(e → e') = 2π Σ_{i,j} f̂_{i,j}(e' - e) · Tr[P(e') D_j P(e) D_i].
#[derive(Debug, Clone)]
pub struct RateChain {
    /// Energies, ascending.
    pub states: Vec<f64>,
    /// rates[a][b] = rate(states[a] → states[b]); nonnegative, zero diagonal.
    pub rates: Vec<Vec<f64>>,
    pub ergodic: bool,
    /// Stationary probability vector (normalized); meaningful when ergodic.
    pub stationary: Vec<f64>,
}

pub fn rate_chain(model: &SystemModel, bc: &BathCorrelation) -> Result<RateChain> {
    let bd = bohr_decompose(model, default_bohr_tol(model))?;
    if !bd.nondegenerate() {
        return Err(Error::DegenerateSpectrum);
    }
    let n = bd.eigenvalues.len();
    let mut rates = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let x = bd.eigenvalues[b] - bd.eigenvalues[a];
            let mut r = C64::new(0.0, 0.0);
            for i in 0..model.n_channels() {
                for j in 0..model.n_channels() {
                    let fh = bc.spectral(i, j, x)?;
                    let tr = trace(
                        &bd.projectors[b]
                            .dot(&model.couplings[j])
                            .dot(&bd.projectors[a])
                            .dot(&model.couplings[i]),
                    );
                    r += fh * tr;
                }
            }
            let val = 2.0 * std::f64::consts::PI * r.re;
            rates[a][b] = val.max(0.0);
            if r.im.abs() > 1e-8 * (1.0 + r.re.abs()) {
                return Err(Error::Invalid(format!(
                    "rate({a}→{b}) has a non-real value {r}; check the spectral matrix"
                )));
            }
        }
    }
    let ergodic = strongly_connected(&rates);
    let stationary = if ergodic {
        chain_stationary(&rates)?
    } else {
        vec![f64::NAN; n]
    };
    Ok(RateChain {
        states: bd.eigenvalues,
        rates,
        ergodic,
        stationary,
    })
}

/// Generator matrix of the chain: Q[a][b] = rate(b → a), Q[a][a] = -Σ out.
pub fn chain_generator(rates: &[Vec<f64>]) -> Array2<f64> {
    let n = rates.len();
    let mut q = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            if a != b {
                q[[a, b]] = rates[b][a];
            }
        }
        q[[a, a]] = -rates[a].iter().sum::<f64>();
    }
    q
}

fn strongly_connected(rates: &[Vec<f64>]) -> bool {
    let n = rates.len();
    let maxr = rates
        .iter()
        .flat_map(|r| r.iter().cloned())
        .fold(0.0, f64::max);
    if maxr == 0.0 {
        return n <= 1;
    }
    let tol = 1e-12 * maxr;
    let mut reach = vec![vec![false; n]; n];
    for a in 0..n {
        reach[a][a] = true;
        for b in 0..n {
            if a != b && rates[a][b] > tol {
                reach[a][b] = true;
            }
        }
    }
    for k in 0..n {
        for a in 0..n {
            for b in 0..n {
                if reach[a][k] && reach[k][b] {
                    reach[a][b] = true;
                }
            }
        }
    }
    (0..n).all(|a| (0..n).all(|b| reach[a][b]))
}

fn chain_stationary(rates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = rates.len();
    let q = chain_generator(rates);
    let qc: CMat = q.mapv(|x| C64::new(x, 0.0));
    let (vals, vecs) = crate::linalg::gen_eig(&qc)?;
    let k = (0..n)
        .min_by(|&a, &b| vals[a].norm().total_cmp(&vals[b].norm()))
        .unwrap();
    let mut p: Vec<f64> = (0..n).map(|r| vecs[[r, k]].re).collect();
    let s: f64 = p.iter().sum();
    if s.abs() < 1e-12 {
        return Err(Error::Invalid("stationary vector has zero mass".into()));
    }
    for x in &mut p {
        *x /= s;
    }
    if p.iter().any(|&x| x < -1e-9) {
        return Err(Error::Invalid(format!(
            "stationary vector has negative entries: {p:?}"
        )));
    }
    Ok(p)
}

/// Spectral certificate of L: simple zero eigenvalue, gap, stationary state,
/// exponential-mixing time, and the constant C_L.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub gap: f64,
    pub t_char: f64,
    pub c_l: f64,
    pub rho_inv: CMat,
    /// ‖e^{𝔱L} - R‖ sampled on the dyadic 𝔱 grid used for 𝔱_L.
    pub decay_samples: Vec<(f64, f64)>,
}

/// Tolerance under which eigenvalues of L count as zero, relative to ‖L‖.
pub const TOL_EIG_REL: f64 = 1e-8;

pub fn gap_and_tchar(l: &Superoperator) -> Result<GapReport> {
    let d = l.dim;
    let norm = l.norm();
    let tr_resid = l.trace_annihilation_residual();
    if tr_resid > 1e-8 * norm.max(1e-300) {
        return Err(Error::Invalid(format!(
            "L is not trace-annihilating: residual {tr_resid:.3e}"
        )));
    }
    let tol_eig = TOL_EIG_REL * norm.max(1e-300);
    let (vals, vecs) = crate::linalg::gen_eig(&l.mat)?;
    let zero_idx: Vec<usize> = (0..vals.len())
        .filter(|&k| vals[k].norm() <= tol_eig)
        .collect();
    if zero_idx.len() != 1 {
        return Err(Error::FgrFails(format!(
            "zero eigenvalue of L has multiplicity {} (tolerance {tol_eig:.3e})",
            zero_idx.len()
        )));
    }
    let gap = -(0..vals.len())
        .filter(|k| !zero_idx.contains(k))
        .map(|k| vals[k].re)
        .fold(f64::NEG_INFINITY, f64::max);
    if gap <= 0.0 {
        return Err(Error::FgrFails(format!(
            "spectral gap is nonpositive: {gap:.3e}"
        )));
    }
    // stationary state from the zero eigenvector
    let k0 = zero_idx[0];
    let v = unvec(&vecs.column(k0).to_owned(), d);
    let herm_corr = frobenius(&(&v - &dagger(&v))) / frobenius(&v).max(1e-300);
    if herm_corr > 2e-8 {
        return Err(Error::FgrFails(format!(
            "stationary eigenvector is not Hermitian up to tolerance: correction {herm_corr:.3e}"
        )));
    }
    let mut rho = hermitize(&v);
    let tr = trace(&rho);
    if tr.norm() < 1e-12 {
        return Err(Error::FgrFails("stationary eigenvector is traceless".into()));
    }
    rho = rho.mapv(|z| z / tr);
    let r = Superoperator::rank_one(&rho, &identity(d));

    // 𝔱_L: dyadic grid in [1/gap, 64/gap], 16 samples per octave
    let samples: Vec<f64> = (0..=96)
        .map(|k| (1.0 / gap) * f64::powf(2.0, k as f64 / 16.0))
        .collect();
    let decay_samples: Vec<(f64, f64)> = samples
        .iter()
        .map(|&t| {
            let e = expm(&l.mat.mapv(|z| z * t));
            (t, spectral_norm(&(&e - &r.mat)))
        })
        .collect();
    let c_l = decay_samples
        .iter()
        .map(|&(t, n)| n * (gap * t).exp())
        .fold(0.0, f64::max);
    let t_char = decay_samples
        .iter()
        .enumerate()
        .find_map(|(idx, &(t, _))| {
            let ok = decay_samples[idx..]
                .iter()
                .all(|&(tp, np)| np <= (-tp / t).exp());
            if ok {
                Some(t)
            } else {
                None
            }
        })
        .ok_or_else(|| {
            Error::FgrFails("no mixing time found on the dyadic grid [1/gap, 64/gap]".into())
        })?;
    Ok(GapReport {
        gap,
        t_char,
        c_l,
        rho_inv: rho,
        decay_samples,
    })
}

/// The full Markov approximation package.
#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    pub l_tilde: Superoperator,
    pub l: Superoperator,
    pub gap: f64,
    pub t_char: f64,
    pub c_l: f64,
    pub rho_inv_markov: CMat,
    /// Present when H_S is nondegenerate and the bath has a spectral density.
    pub rates: Option<RateChain>,
}

pub fn build_generator(model: &SystemModel, bc: &BathCorrelation) -> Result<LindbladGenerator> {
    let l_tilde = build_l_tilde(model, bc)?;
    let bd = bohr_decompose(model, default_bohr_tol(model))?;
    let l = spectral_average(&l_tilde, &bd);
    let report = gap_and_tchar(&l)?;
    let rates = if bd.nondegenerate() {
        match rate_chain(model, bc) {
            Ok(rc) => Some(rc),
            Err(Error::Invalid(_)) => None, // discrete spectral function
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(LindbladGenerator {
        l_tilde,
        l,
        gap: report.gap,
        t_char: report.t_char,
        c_l: report.c_l,
        rho_inv_markov: report.rho_inv,
        rates,
    })
}
