//! One-dimensional quadrature: adaptive Gauss–Kronrod on finite intervals,
//! half-line integrals with dyadic window tails, and Gauss–Legendre nodes.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

// G7/K15 nodes and weights on [-1, 1] (positive half; symmetric).
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// One Gauss–Kronrod panel; returns (kronrod value, |K15 - G7| error estimate).
fn gk15<F: Fn(f64) -> C64>(f: &F, a: f64, b: f64) -> (C64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kron = C64::new(0.0, 0.0);
    let mut gauss = C64::new(0.0, 0.0);
    for (j, &x) in XGK.iter().enumerate() {
        let w = WGK[j];
        if x == 0.0 {
            let fc = f(center);
            kron += w * fc;
            gauss += WG[3] * fc;
        } else {
            let f1 = f(center - half * x);
            let f2 = f(center + half * x);
            kron += w * (f1 + f2);
            if j % 2 == 1 {
                gauss += WG[j / 2] * (f1 + f2);
            }
        }
    }
    kron *= half;
    gauss *= half;
    ((kron), (kron - gauss).norm())
}

/// Adaptive Gauss–Kronrod on [a, b] to absolute tolerance `tol`.
pub fn adaptive_gk<F: Fn(f64) -> C64>(f: &F, a: f64, b: f64, tol: f64) -> Result<(C64, f64)> {
    if !(b >= a) {
        return Err(Error::Quadrature(format!("bad interval [{a}, {b}]")));
    }
    if a == b {
        return Ok((C64::new(0.0, 0.0), 0.0));
    }
    // worklist of (a, b, value, error)
    let (v0, e0) = gk15(f, a, b);
    let mut panels = vec![(a, b, v0, e0)];
    let max_panels = 4000;
    loop {
        let total_err: f64 = panels.iter().map(|p| p.3).sum();
        if total_err <= tol || panels.len() >= max_panels {
            let value = panels.iter().fold(C64::new(0.0, 0.0), |acc, p| acc + p.2);
            if total_err > tol.max(1e-300) * 100.0 && panels.len() >= max_panels {
                return Err(Error::Quadrature(format!(
                    "adaptive_gk did not converge on [{a}, {b}]: err {total_err:.3e} > tol {tol:.3e}, worst panel [{:.6}, {:.6}]",
                    panels.iter().max_by(|x, y| x.3.total_cmp(&y.3)).unwrap().0,
                    panels.iter().max_by(|x, y| x.3.total_cmp(&y.3)).unwrap().1,
                )));
            }
            return Ok((value, total_err));
        }
        // split the worst panel
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap();
        let (pa, pb, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (pa + pb);
        let (vl, el) = gk15(f, pa, mid);
        let (vr, er) = gk15(f, mid, pb);
        panels.push((pa, mid, vl, el));
        panels.push((mid, pb, vr, er));
    }
}

/// Tail handling for half-line integrals past the windowed range.
#[derive(Debug, Clone, Copy)]
pub enum TailModel {
    /// Remainder estimated from the geometric decay of dyadic window sums.
    GeometricWindows,
    /// Fit |f| ~ a·t^{-p} on the last window and integrate the fit.
    PowerFit,
    /// Integration-by-parts boundary term -e^{ixT} f(T)/(ix) for ∫ f(t) e^{ixt}.
    /// `freq` is x; `f_raw` must be supplied through [`half_line_fourier`].
    OscillatoryIbp { freq: f64 },
}

#[derive(Debug, Clone)]
pub struct HalfLineResult {
    pub value: C64,
    pub abs_err: f64,
    pub converged: bool,
    /// |window integral| for each dyadic window past t0.
    pub windows: Vec<f64>,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct HalfLineOpts {
    pub t0: f64,
    pub max_doublings: u32,
    pub tol: f64,
}

impl Default for HalfLineOpts {
    fn default() -> Self {
        HalfLineOpts {
            t0: 64.0,
            max_doublings: 18,
            tol: 1e-9,
        }
    }
}

/// ∫_0^∞ f(t) dt by adaptive quadrature on [0, t0] plus dyadic windows
/// [T, 2T] with a tail model. Divergence (windows not decaying geometrically)
/// is flagged through `converged = false`.
pub fn integrate_half_line<F: Fn(f64) -> C64>(
    f: &F,
    opts: HalfLineOpts,
    tail: TailModel,
) -> Result<HalfLineResult> {
    let panel_tol = opts.tol / 4.0;
    let (head, head_err) = adaptive_gk(f, 0.0, opts.t0, panel_tol)?;
    let mut value = head;
    let mut err = head_err;
    let mut windows: Vec<f64> = Vec::new();
    let mut raw_windows: Vec<C64> = Vec::new();
    let mut t = opts.t0;
    let mut converged = false;
    for _ in 0..opts.max_doublings {
        let (w, we) = adaptive_gk(f, t, 2.0 * t, panel_tol)?;
        value += w;
        err += we;
        windows.push(w.norm());
        raw_windows.push(w);
        t *= 2.0;
        // three consecutive growing windows: divergent, stop probing
        if windows.len() >= 4 {
            let n = windows.len();
            if (n - 3..n).all(|i| windows[i] >= windows[i - 1]) && windows[n - 1] > opts.tol {
                break;
            }
        }
        // stop when the estimated remainder is below tolerance
        let rem = estimate_remainder(&windows, &raw_windows, f, t, tail);
        if let Some((rem_val, rem_err)) = rem {
            if rem_err <= opts.tol && decays_geometrically(&windows) {
                value += rem_val;
                err += rem_err;
                converged = true;
                break;
            }
        }
    }
    if !converged {
        // no usable tail: report with the plain window check
        converged = decays_geometrically(&windows) && windows.last().is_some_and(|w| *w <= opts.tol);
    }
    Ok(HalfLineResult {
        value,
        abs_err: err,
        converged,
        windows,
        t_end: t,
    })
}

/// The last three dyadic windows must decay (ratio < 0.95 each).
fn decays_geometrically(windows: &[f64]) -> bool {
    if windows.len() < 3 {
        return false;
    }
    let n = windows.len();
    let floor = 1e-300;
    (n - 2..n).all(|i| windows[i] < 0.95 * windows[i - 1].max(floor) || windows[i] < 1e-16)
}

fn estimate_remainder<F: Fn(f64) -> C64>(
    windows: &[f64],
    raw: &[C64],
    f: &F,
    t: f64,
    tail: TailModel,
) -> Option<(C64, f64)> {
    match tail {
        TailModel::GeometricWindows => {
            if windows.len() < 2 {
                return None;
            }
            let n = windows.len();
            let (w_prev, w_last) = (windows[n - 2], windows[n - 1]);
            if w_last >= w_prev || w_prev == 0.0 {
                return None;
            }
            let r = w_last / w_prev;
            if r >= 0.95 {
                return None;
            }
            let scale = r / (1.0 - r);
            let rem = raw[n - 1] * scale;
            // second-order uncertainty of the geometric model
            Some((rem, rem.norm() * r.max(0.25)))
        }
        TailModel::PowerFit => {
            // |f| ≈ a t^{-p} from f at t and t/2
            let f1 = f(0.5 * t).norm();
            let f2 = f(t).norm();
            if f2 <= 0.0 || f1 <= f2 {
                return None;
            }
            let p = (f1 / f2).log2();
            if p <= 1.01 {
                return None; // non-integrable fit
            }
            let a = f2 * t.powf(p);
            let rem_mag = a * t.powf(1.0 - p) / (p - 1.0);
            // keep the phase of f(t) as a crude direction; magnitude dominates the error bar
            let dir = f(t) / C64::new(f2, 0.0);
            Some((dir * rem_mag, rem_mag * 0.5))
        }
        TailModel::OscillatoryIbp { freq } => {
            if freq.abs() * t < 2.0 {
                // not oscillatory enough: fall back to the power fit
                return estimate_remainder(windows, raw, f, t, TailModel::PowerFit);
            }
            // f here is the full integrand g(t) e^{i freq t}; recover g(T) = f(T) e^{-i freq T}
            let ix = C64::new(0.0, freq);
            let boundary = -f(t) / ix;
            // next-order term estimated by a finite difference of g
            let h = (1.0 / freq.abs()).min(t * 1e-3).max(1e-6);
            let gp = (f(t + h) * (-ix * (t + h)).exp() - f(t - h) * (-ix * (t - h)).exp())
                / C64::new(2.0 * h, 0.0);
            let next = gp.norm() / (freq * freq);
            Some((boundary, next + boundary.norm() * 1e-6))
        }
    }
}

/// ∫_0^∞ f(t) e^{ixt} dt with window tail handling appropriate for x.
pub fn half_line_fourier<F: Fn(f64) -> C64>(
    f: &F,
    x: f64,
    opts: HalfLineOpts,
) -> Result<HalfLineResult> {
    let integrand = |t: f64| f(t) * C64::new(0.0, x * t).exp();
    let tail = if x.abs() * opts.t0 >= 2.0 {
        TailModel::OscillatoryIbp { freq: x }
    } else {
        TailModel::PowerFit
    };
    integrate_half_line(&integrand, opts, tail)
}

/// Frequency-domain route for the same half-line transform:
/// ∫_0^∞ f(t) e^{ixt} dt = π·f̂(-x) + i · PV ∫ f̂(ω)/(ω + x) dω,
/// valid when f(t) = ∫ e^{itω} f̂(ω) dω. Used as an independent cross-check.
pub fn half_line_fourier_via_spectrum<G: Fn(f64) -> C64>(
    fhat: &G,
    x: f64,
    omega_max: f64,
    tol: f64,
) -> Result<C64> {
    let fx = fhat(-x);
    // PV by singularity subtraction at ω = -x
    let integrand = |w: f64| {
        let denom = w + x;
        if denom.abs() < 1e-12 {
            // derivative limit of (f̂(ω) - f̂(-x))/(ω + x)
            let h = 1e-6 * (1.0 + x.abs());
            (fhat(-x + h) - fhat(-x - h)) / C64::new(2.0 * h, 0.0)
        } else {
            (fhat(w) - fx) / C64::new(denom, 0.0)
        }
    };
    let (smooth, _) = adaptive_gk(&integrand, -omega_max, omega_max, tol)?;
    let log_term = ((omega_max + x) / (omega_max - x)).abs().ln();
    let pv = smooth + fx * log_term;
    Ok(C64::new(0.0, 1.0) * pv + C64::new(std::f64::consts::PI, 0.0) * fx)
}

/// Gauss–Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on Legendre polynomials over [-1, 1], then affine map.
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_pair(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_pair(n, x);
        nodes[i] = 0.5 * (1.0 - x); // reversed order is irrelevant
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = pk;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
