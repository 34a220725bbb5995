//! Bath correlation functions f_{i,j}(t), their spectral functions f̂_{i,j}(ω),
//! decay envelopes h(t), and the decay profiles ζ(t).
//!
//! Conventions (fixed project-wide):
//!   f_{i,j}(t) = ∫_ℝ dω e^{itω} f̂_{i,j}(ω),
//!   f̂_{i,j}(ω) = (1/2π) ∫_ℝ dt e^{-itω} f_{i,j}(t).
//! For a thermal bath this puts the emission weight at negative ω, so the
//! detailed-balance relation reads f̂(-ω) = e^{βω} f̂(ω).

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::quad::{adaptive_gk, integrate_half_line, HalfLineOpts, TailModel};
use crate::special::trigamma;

/// One damped mode of the Lorentzian family: f(t) += weight·e^{iΩt - γ|t|}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LorentzMode {
    pub center: f64,
    pub gamma: f64,
    pub weight: f64,
}

/// One discrete bath mode (also the input format of the finite-volume oracle).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMode {
    pub omega: f64,
    pub eta: f64,
    /// Form factor value per channel, as [re, im].
    pub phi: Vec<[f64; 2]>,
}

impl DiscreteMode {
    pub fn phi_c(&self, channel: usize) -> C64 {
        C64::new(self.phi[channel][0], self.phi[channel][1])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BathConfig {
    /// Thermal bath with Ohmic spectral density J(ω) = prefactor·ω·e^{-ω/cutoff}.
    Ohmic {
        beta: f64,
        cutoff: f64,
        #[serde(default = "default_prefactor")]
        prefactor: f64,
    },
    /// Finite sum of damped modes; exact correlation and transforms.
    Lorentzian { modes: Vec<LorentzMode> },
    /// Discrete modes with occupations; almost-periodic correlation.
    Fewmode { modes: Vec<DiscreteMode> },
    /// f̂_{i,j} sampled on a frequency grid, matrix-valued in channels.
    Tabulated {
        omega: Vec<f64>,
        /// fhat[k][i][j] = [re, im]
        fhat: Vec<Vec<Vec<[f64; 2]>>>,
    },
}

fn default_prefactor() -> f64 {
    1.0
}

/// Bath correlation functions for a finite channel set.
#[derive(Debug, Clone)]
pub struct BathCorrelation {
    pub n_channels: usize,
    pub config: BathConfig,
    tab: Option<Tabulated>,
}

#[derive(Debug, Clone)]
struct Tabulated {
    omega: Vec<f64>,
    fhat: Vec<Array2<C64>>, // one channel matrix per grid point
}

impl BathCorrelation {
    pub fn new(config: BathConfig) -> Result<Self> {
        let (n_channels, tab) = match &config {
            BathConfig::Ohmic { beta, cutoff, prefactor } => {
                if *beta <= 0.0 || *cutoff <= 0.0 || *prefactor <= 0.0 {
                    return Err(Error::Invalid("ohmic bath needs beta, cutoff, prefactor > 0".into()));
                }
                (1, None)
            }
            BathConfig::Lorentzian { modes } => {
                if modes.is_empty() {
                    return Err(Error::Invalid("lorentzian bath needs at least one mode".into()));
                }
                if modes.iter().any(|m| m.gamma < 0.0 || m.weight < 0.0) {
                    return Err(Error::Invalid("lorentzian modes need gamma ≥ 0, weight ≥ 0".into()));
                }
                (1, None)
            }
            BathConfig::Fewmode { modes } => {
                if modes.is_empty() {
                    return Err(Error::Invalid("fewmode bath needs at least one mode".into()));
                }
                if modes.iter().any(|m| m.eta < 0.0) {
                    return Err(Error::Invalid("mode occupation eta must be ≥ 0".into()));
                }
                let nc = modes[0].phi.len();
                if nc == 0 || modes.iter().any(|m| m.phi.len() != nc) {
                    return Err(Error::Invalid("all modes must carry the same channel count".into()));
                }
                (nc, None)
            }
            BathConfig::Tabulated { omega, fhat } => {
                if omega.len() < 2 || omega.len() != fhat.len() {
                    return Err(Error::Invalid("tabulated bath needs matching omega/fhat grids".into()));
                }
                if omega.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Invalid("tabulated omega grid must be strictly increasing".into()));
                }
                let nc = fhat[0].len();
                let mut mats = Vec::with_capacity(fhat.len());
                for row in fhat {
                    if row.len() != nc || row.iter().any(|r| r.len() != nc) {
                        return Err(Error::Invalid("tabulated fhat must be square in channels".into()));
                    }
                    let mut m = Array2::zeros((nc, nc));
                    for i in 0..nc {
                        for j in 0..nc {
                            m[[i, j]] = C64::new(row[i][j][0], row[i][j][1]);
                        }
                    }
                    // Hermitian symmetry of the channel matrix
                    if crate::linalg::hermiticity_deviation(&m) > 1e-8 {
                        return Err(Error::Invalid("tabulated fhat matrices must be Hermitian".into()));
                    }
                    mats.push(m);
                }
                (
                    nc,
                    Some(Tabulated {
                        omega: omega.clone(),
                        fhat: mats,
                    }),
                )
            }
        };
        Ok(BathCorrelation {
            n_channels,
            config,
            tab,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: BathConfig = serde_json::from_str(s)?;
        BathCorrelation::new(cfg)
    }

    fn check_channels(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.n_channels || j >= self.n_channels {
            return Err(Error::DimensionMismatch {
                expected: self.n_channels,
                got: i.max(j) + 1,
            });
        }
        Ok(())
    }

    /// f_{i,j}(t).
    pub fn correlation(&self, i: usize, j: usize, t: f64) -> Result<C64> {
        self.check_channels(i, j)?;
        match &self.config {
            BathConfig::Ohmic { beta, cutoff, prefactor } => {
                Ok(ohmic_correlation(*beta, *cutoff, *prefactor, t))
            }
            BathConfig::Lorentzian { modes } => {
                let mut f = C64::new(0.0, 0.0);
                for m in modes {
                    f += m.weight * (C64::new(0.0, m.center * t)).exp() * (-m.gamma * t.abs()).exp();
                }
                Ok(f)
            }
            BathConfig::Fewmode { modes } => {
                let mut f = C64::new(0.0, 0.0);
                for m in modes {
                    let (pi, pj) = (m.phi_c(i), m.phi_c(j));
                    f += pj.conj() * pi * m.eta * C64::new(0.0, m.omega * t).exp();
                    f += pi.conj() * pj * (1.0 + m.eta) * C64::new(0.0, -m.omega * t).exp();
                }
                Ok(f)
            }
            BathConfig::Tabulated { .. } => {
                let tab = self.tab.as_ref().unwrap();
                // Nyquist guard against aliasing of e^{itω} on the grid
                let dmax = tab
                    .omega
                    .windows(2)
                    .map(|w| w[1] - w[0])
                    .fold(0.0, f64::max);
                if t.abs() * dmax > std::f64::consts::FRAC_PI_2 {
                    return Err(Error::Quadrature(format!(
                        "tabulated grid too coarse for t = {t}: need spacing ≤ {:.3e}, have {:.3e}",
                        std::f64::consts::FRAC_PI_2 / t.abs(),
                        dmax
                    )));
                }
                // trapezoidal Fourier quadrature
                let mut f = C64::new(0.0, 0.0);
                for k in 0..tab.omega.len() - 1 {
                    let (w0, w1) = (tab.omega[k], tab.omega[k + 1]);
                    let g0 = tab.fhat[k][[i, j]] * C64::new(0.0, t * w0).exp();
                    let g1 = tab.fhat[k + 1][[i, j]] * C64::new(0.0, t * w1).exp();
                    f += 0.5 * (w1 - w0) * (g0 + g1);
                }
                Ok(f)
            }
        }
    }

    /// f̂_{i,j}(ω). Errors for discrete (fewmode) baths, whose spectral
    /// function is atomic.
    pub fn spectral(&self, i: usize, j: usize, omega: f64) -> Result<C64> {
        self.check_channels(i, j)?;
        match &self.config {
            BathConfig::Ohmic { beta, cutoff, prefactor } => {
                Ok(C64::new(ohmic_spectral(*beta, *cutoff, *prefactor, omega), 0.0))
            }
            BathConfig::Lorentzian { modes } => {
                let mut v = 0.0;
                for m in modes {
                    if m.gamma == 0.0 {
                        return Err(Error::Invalid(
                            "lorentzian mode with gamma = 0 has an atomic spectral function".into(),
                        ));
                    }
                    v += m.weight * m.gamma / std::f64::consts::PI
                        / ((omega - m.center).powi(2) + m.gamma * m.gamma);
                }
                Ok(C64::new(v, 0.0))
            }
            BathConfig::Fewmode { .. } => Err(Error::Invalid(
                "fewmode bath has a discrete spectral function; no density exists".into(),
            )),
            BathConfig::Tabulated { .. } => {
                let tab = self.tab.as_ref().unwrap();
                let om = &tab.omega;
                if omega < om[0] || omega > *om.last().unwrap() {
                    return Err(Error::Invalid(format!(
                        "tabulated spectral function queried at ω = {omega} outside [{}, {}]; extrapolation rejected",
                        om[0],
                        om.last().unwrap()
                    )));
                }
                let k = match om.binary_search_by(|x| x.total_cmp(&omega)) {
                    Ok(k) => return Ok(tab.fhat[k][[i, j]]),
                    Err(k) => k - 1,
                };
                let s = (omega - om[k]) / (om[k + 1] - om[k]);
                Ok(tab.fhat[k][[i, j]] * (1.0 - s) + tab.fhat[k + 1][[i, j]] * s)
            }
        }
    }

    /// Whether |f(t)| decays as t → ∞ (false for discrete baths).
    pub fn decays(&self) -> bool {
        match &self.config {
            BathConfig::Fewmode { .. } => false,
            BathConfig::Lorentzian { modes } => modes.iter().all(|m| m.gamma > 0.0),
            _ => true,
        }
    }

    /// Characteristic decay time of |f|, used as an importance-sampling scale.
    pub fn decay_scale(&self) -> f64 {
        match &self.config {
            BathConfig::Ohmic { beta, cutoff, .. } => (1.0 / cutoff + 0.25 * beta).min(10.0),
            BathConfig::Lorentzian { modes } => {
                let g = modes
                    .iter()
                    .filter(|m| m.gamma > 0.0)
                    .map(|m| m.gamma)
                    .fold(f64::INFINITY, f64::min);
                if g.is_finite() {
                    1.0 / g
                } else {
                    1.0
                }
            }
            _ => 1.0,
        }
    }

    /// Inverse temperature if this family is thermal.
    pub fn beta(&self) -> Option<f64> {
        match &self.config {
            BathConfig::Ohmic { beta, .. } => Some(*beta),
            _ => None,
        }
    }

    /// Largest |t| at which `correlation` can be evaluated (Nyquist limit for
    /// tabulated grids, unbounded otherwise).
    pub fn max_time(&self) -> f64 {
        match (&self.config, &self.tab) {
            (BathConfig::Tabulated { .. }, Some(tab)) => {
                let dmax = tab
                    .omega
                    .windows(2)
                    .map(|w| w[1] - w[0])
                    .fold(0.0, f64::max);
                std::f64::consts::FRAC_PI_2 / dmax
            }
            _ => f64::INFINITY,
        }
    }
}

/// Ohmic spectral function: f̂(ω) = prefactor·ω·e^{-|ω|/ω_c} / (e^{βω} - 1),
/// continued by prefactor/β at ω = 0. Satisfies f̂(-ω) = e^{βω} f̂(ω).
pub fn ohmic_spectral(beta: f64, cutoff: f64, prefactor: f64, omega: f64) -> f64 {
    if omega == 0.0 {
        return prefactor / beta;
    }
    let x = beta * omega;
    let boltz = if x.abs() < 1e-8 {
        // ω/(e^{βω}-1) → 1/β (1 - x/2 + ...)
        (1.0 - 0.5 * x) / beta
    } else {
        omega / x.exp_m1()
    };
    prefactor * (-omega.abs() / cutoff).exp() * boltz
}

/// Closed form for the Ohmic thermal correlation,
/// f(t) = A·[ 1/(c+it)² + β^{-2}(ψ'(1+(c+it)/β) + ψ'(1+(c-it)/β)) ], c = 1/ω_c.
pub fn ohmic_correlation(beta: f64, cutoff: f64, prefactor: f64, t: f64) -> C64 {
    let c = 1.0 / cutoff;
    let cpit = C64::new(c, t);
    let cmit = C64::new(c, -t);
    let vacuum = 1.0 / (cpit * cpit);
    let thermal = (trigamma(1.0 + cpit / beta) + trigamma(1.0 + cmit / beta)) / (beta * beta);
    prefactor * (vacuum + thermal)
}

/// Finite-volume correlation f^Λ_{i,j}(t) as the explicit sum over modes:
/// Σ_q [ φ̄_j φ_i η e^{itω} + φ̄_i φ_j (1+η) e^{-itω} ].
pub fn finite_volume_correlation(
    eta: &[f64],
    omega: &[f64],
    phi_i: &[C64],
    phi_j: &[C64],
    t: f64,
) -> Result<C64> {
    let n = eta.len();
    if omega.len() != n || phi_i.len() != n || phi_j.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: omega.len().min(phi_i.len()).min(phi_j.len()),
        });
    }
    if eta.iter().any(|&e| e < 0.0) {
        return Err(Error::Invalid("mode occupation eta must be ≥ 0".into()));
    }
    let mut f = C64::new(0.0, 0.0);
    for q in 0..n {
        f += phi_j[q].conj() * phi_i[q] * eta[q] * C64::new(0.0, omega[q] * t).exp();
        f += phi_i[q].conj() * phi_j[q] * (1.0 + eta[q]) * C64::new(0.0, -omega[q] * t).exp();
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Decay profiles ζ
// ---------------------------------------------------------------------------

/// Registered ζ families. Each is nondecreasing, submultiplicative with
/// ζ(0) ≥ 1, and subexponential; the certificate is per-family, not numeric.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum DecayProfile {
    Constant,
    Power { alpha: f64 },
    Stretched { c: f64, gamma: f64 },
}

impl DecayProfile {
    pub fn validate(&self) -> Result<()> {
        match self {
            DecayProfile::Constant => Ok(()),
            DecayProfile::Power { alpha } => {
                if *alpha < 0.0 {
                    Err(Error::Invalid("power-law ζ needs alpha ≥ 0".into()))
                } else {
                    Ok(())
                }
            }
            DecayProfile::Stretched { c, gamma } => {
                if *c < 0.0 || !(0.0..1.0).contains(gamma) {
                    Err(Error::Invalid(
                        "stretched-exponential ζ needs c ≥ 0 and 0 ≤ gamma < 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            DecayProfile::Constant => 1.0,
            DecayProfile::Power { alpha } => (1.0 + t).powf(*alpha),
            DecayProfile::Stretched { c, gamma } => (c * t.powf(*gamma)).exp(),
        }
    }

    /// Why ∫ e^{-κt} ζ(t) dt < ∞ for every κ > 0, per family.
    pub fn subexponential_certificate(&self) -> &'static str {
        match self {
            DecayProfile::Constant => "constant profile: ∫ e^{-κt} dt = 1/κ",
            DecayProfile::Power { .. } => "polynomial growth is dominated by any e^{κt}",
            DecayProfile::Stretched { .. } => "exp(c·t^γ) with γ < 1 is dominated by any e^{κt}",
        }
    }
}

// ---------------------------------------------------------------------------
// Decay envelope h
// ---------------------------------------------------------------------------

/// h(t) = Σ_{i,j} ‖D_i‖‖D_j‖ |f_{i,j}(t)| with cached integrals.
#[derive(Debug, Clone)]
pub struct DecayEnvelope {
    pub coupling_norms: Vec<f64>,
    pub bath: BathCorrelation,
    /// ∫_0^∞ h(t) dt.
    pub h_l1: f64,
    pub h_l1_error: f64,
    /// Magnitudes of the dyadic tail windows of the ∫h quadrature.
    pub windows: Vec<f64>,
}

impl DecayEnvelope {
    pub fn h(&self, t: f64) -> f64 {
        let nc = self.bath.n_channels;
        let mut acc = 0.0;
        for i in 0..nc {
            for j in 0..nc {
                let f = self
                    .bath
                    .correlation(i, j, t)
                    .expect("channel indices are in range");
                acc += self.coupling_norms[i] * self.coupling_norms[j] * f.norm();
            }
        }
        acc
    }

    /// ∫_0^t h(s) ds on a finite horizon.
    pub fn h_l1_partial(&self, t: f64) -> Result<f64> {
        let f = |s: f64| C64::new(self.h(s), 0.0);
        // windowed to keep the oscillatory integrand resolved
        let mut acc = 0.0;
        let mut lo = 0.0;
        let step = (self.bath.decay_scale() * 8.0).max(1.0).min(t.max(1e-12));
        while lo < t {
            let hi = (lo + step).min(t);
            let (v, _) = adaptive_gk(&f, lo, hi, 1e-9)?;
            acc += v.re;
            lo = hi;
        }
        Ok(acc)
    }
}

/// Build the decay envelope and decide Assumption 1 (integrability of h).
pub fn envelope(bc: &BathCorrelation, model: &SystemModel) -> Result<DecayEnvelope> {
    if bc.n_channels != model.n_channels() {
        return Err(Error::DimensionMismatch {
            expected: model.n_channels(),
            got: bc.n_channels,
        });
    }
    let norms = model.coupling_norms();
    let env = DecayEnvelope {
        coupling_norms: norms,
        bath: bc.clone(),
        h_l1: 0.0,
        h_l1_error: 0.0,
        windows: Vec::new(),
    };
    let f = |t: f64| C64::new(env.h(t), 0.0);
    let t0 = (8.0 * bc.decay_scale()).max(8.0);
    let opts = HalfLineOpts {
        t0,
        max_doublings: capped_doublings(t0, bc.max_time(), 22),
        tol: 1e-8,
    };
    let r = integrate_half_line(&f, opts, TailModel::PowerFit)?;
    if !r.converged {
        return Err(Error::AssumptionViolated {
            assumption: "Assumption 1 (decay of correlations)".into(),
            detail: format!(
                "∫ h(t) dt does not converge: tail windows {:?} fail geometric decay up to t = {:.1}",
                r.windows, r.t_end
            ),
        });
    }
    Ok(DecayEnvelope {
        h_l1: r.value.re,
        h_l1_error: r.abs_err,
        windows: r.windows,
        ..env
    })
}

/// Window doublings from t0 that stay below the bath's evaluable horizon.
fn capped_doublings(t0: f64, max_time: f64, cap: u32) -> u32 {
    if !max_time.is_finite() {
        return cap;
    }
    let mut k = 0;
    let mut t = t0;
    while 2.0 * t <= max_time && k < cap {
        t *= 2.0;
        k += 1;
    }
    k
}

/// Report of the ζ-weighted integrability check ∫ h(t) ζ(t) dt.
#[derive(Debug, Clone, Serialize)]
pub struct ZetaReport {
    pub h_zeta: f64,
    pub ok: bool,
    pub windows: Vec<f64>,
    pub detail: String,
}

/// ∫_0^∞ h(t) ζ(t) dt with the same dyadic tail test; divergence is reported,
/// not raised.
pub fn check_zeta_integrability(env: &DecayEnvelope, zp: &DecayProfile) -> ZetaReport {
    let f = |t: f64| C64::new(env.h(t) * zp.eval(t), 0.0);
    let t0 = (8.0 * env.bath.decay_scale()).max(8.0);
    let opts = HalfLineOpts {
        t0,
        max_doublings: capped_doublings(t0, env.bath.max_time(), 22),
        tol: 1e-8,
    };
    match integrate_half_line(&f, opts, TailModel::PowerFit) {
        Ok(r) if r.converged => ZetaReport {
            h_zeta: r.value.re,
            ok: true,
            windows: r.windows,
            detail: "tail windows decay geometrically".into(),
        },
        Ok(r) => ZetaReport {
            h_zeta: r.value.re,
            ok: false,
            windows: r.windows.clone(),
            detail: format!(
                "tail windows grow or stagnate: {:?} up to t = {:.1}",
                r.windows, r.t_end
            ),
        },
        Err(e) => ZetaReport {
            h_zeta: f64::NAN,
            ok: false,
            windows: vec![],
            detail: format!("quadrature failure: {e}"),
        },
    }
}
