//! Polymer resummation of the reduced dynamics over macroscopic time cells.
//!
//! Time is discretized into N cells of length ν = λ⁻²ℓ. The one-cell reduced
//! map T is the truncated Dyson propagator over one cell; the non-Markovian
//! corrections are connected excitation operators E^c(B(A)) living on the
//! tensor legs indexed by a cell set A, built from diagrams whose induced
//! cell graph is connected. Z_N is resummed as T^N plus a sum over polymers
//! (collections of disjoint cell sets), with (1-R)-projected hook strings
//! supplying exponential decay, and the δ/ε recursions turning the bound
//! chain into numerical certificates.

use std::collections::BTreeMap;

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::bath::{BathCorrelation, DecayEnvelope, DecayProfile};
use crate::dyson::{
    h_partial_integral, series_tail, z_reduced, CellConstraint, CellJob,
    EigenFrame, OrderReport, QuadConfig, ZReduced,
};
use crate::error::{Error, Result};
use crate::linalg::{
    dagger, frobenius, hermitize, identity, kron, spectral_norm, trace, unvec, vec_mat, CMat,
};
use crate::model::{Superoperator, SystemModel};

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// Macroscopic time grid: N cells of microscopic length ν = λ⁻²ℓ.
#[derive(Debug, Clone, Serialize)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub ell: f64,
    pub lambda: f64,
    pub nu: f64,
    pub t_char: f64,
    /// True when ℓ ∈ [𝔱_L, 2𝔱_L], the regime the convergence constants assume.
    pub within_mixing_range: bool,
}

impl TimeGrid {
    pub fn new(n_steps: usize, ell: f64, lambda: f64, t_char: f64) -> Result<Self> {
        let grid = Self::unrestricted(n_steps, ell, lambda, t_char)?;
        if !grid.within_mixing_range {
            return Err(Error::Invalid(format!(
                "ell = {ell} outside [t_char, 2 t_char] = [{t_char}, {}]",
                2.0 * t_char
            )));
        }
        Ok(grid)
    }

    /// Grid with ℓ outside the mixing window allowed; the flag records it.
    /// The polymer identity Z_N = T^N + Σ holds for any ν > 0, only the
    /// paper-regime constants need ℓ ≥ 𝔱_L.
    pub fn unrestricted(n_steps: usize, ell: f64, lambda: f64, t_char: f64) -> Result<Self> {
        if ell <= 0.0 || lambda == 0.0 {
            return Err(Error::Invalid("grid needs ell > 0 and lambda ≠ 0".into()));
        }
        let nu = ell / (lambda * lambda);
        Ok(TimeGrid {
            n_steps,
            ell,
            lambda,
            nu,
            t_char,
            within_mixing_range: (t_char..=2.0 * t_char).contains(&ell),
        })
    }
}

// ---------------------------------------------------------------------------
// One-step map T and its spectral data
// ---------------------------------------------------------------------------

/// The one-cell reduced propagator with its truncation certificate.
#[derive(Debug, Clone)]
pub struct OneStepT {
    pub op: Superoperator,
    pub bound_tail: f64,
    pub stat_err: f64,
    pub orders: Vec<OrderReport>,
}

/// T = Z(ν) with all diagram times inside one macroscopic cell. The map is
/// τ-independent by stationarity of the reference state, so one build serves
/// every cell.
pub fn one_step_t(
    model: &SystemModel,
    bc: &BathCorrelation,
    grid: &TimeGrid,
    quad: &QuadConfig,
) -> Result<OneStepT> {
    let z: ZReduced = z_reduced(model, bc, grid.nu, quad)?;
    Ok(OneStepT {
        op: z.z,
        bound_tail: z.bound_tail,
        stat_err: z.stat_err,
        orders: z.orders,
    })
}

/// Spectral decomposition data of T: the invariant state ρ_S^T, the rank-1
/// projector R = |ρ_S^T⟩⟨1|, the contraction margin g (spectrum of T minus
/// the simple eigenvalue 1 lies in the disk of radius 1-g), and the measured
/// constant C_g with ‖Tⁿ(1-R)‖ ≤ C_g(1-g)ⁿ.
#[derive(Debug, Clone)]
pub struct TSpectral {
    pub rho_t: CMat,
    pub r: Superoperator,
    pub g: f64,
    pub c_g: f64,
    /// |λ_max(T) - 1|, bounded by the truncation certificate of T.
    pub unit_eig_residual: f64,
}

impl TSpectral {
    pub fn compute(t_op: &Superoperator) -> Result<TSpectral> {
        let d = t_op.dim;
        let (vals, vecs) = crate::linalg::gen_eig(&t_op.mat)?;
        let k0 = (0..vals.len())
            .max_by(|&a, &b| vals[a].norm().total_cmp(&vals[b].norm()))
            .unwrap();
        let unit_eig_residual = (vals[k0] - C64::new(1.0, 0.0)).norm();
        if unit_eig_residual > 0.2 {
            return Err(Error::Certificate {
                stage: "dissipativity".into(),
                detail: format!(
                    "leading eigenvalue of T is {} (distance {unit_eig_residual:.3e} from 1)",
                    vals[k0]
                ),
            });
        }
        let second = (0..vals.len())
            .filter(|&k| k != k0)
            .map(|k| vals[k].norm())
            .fold(0.0, f64::max);
        let g = 1.0 - second;
        if g <= 0.0 {
            return Err(Error::Certificate {
                stage: "dissipativity".into(),
                detail: format!("no contraction margin: |λ₂| = {second}"),
            });
        }
        let v = unvec(&vecs.column(k0).to_owned(), d);
        let mut rho = hermitize(&v);
        let tr = trace(&rho);
        if tr.norm() < 1e-10 {
            return Err(Error::Certificate {
                stage: "dissipativity".into(),
                detail: "invariant vector of T is traceless".into(),
            });
        }
        rho = rho.mapv(|z| z / tr);
        let r = Superoperator::rank_one(&rho, &identity(d));
        // C_g from the measured decay of ‖Tⁿ(1-R)‖, stopping at the floating
        // noise floor so the ratio is not dominated by roundoff
        let one_minus_r = Superoperator::identity(d).sub(&r);
        let noise_floor = 1e-12 * one_minus_r.norm();
        let mut c_g: f64 = 0.0;
        let mut power = one_minus_r.clone();
        for n in 0..=64usize {
            let norm = power.norm();
            if norm < noise_floor {
                break;
            }
            let ratio = norm / (1.0 - g).powi(n as i32);
            c_g = c_g.max(ratio);
            power = t_op.compose(&power);
        }
        Ok(TSpectral {
            rho_t: rho,
            r,
            g,
            c_g,
            unit_eig_residual,
        })
    }
}

// ---------------------------------------------------------------------------
// Excitation operators
// ---------------------------------------------------------------------------

/// Connected excitation on the tensor legs of a cell set, with certificates.
#[derive(Debug, Clone)]
pub struct ExcitationOperator {
    /// The cell set this was requested for (absolute labels).
    pub a_set: Vec<usize>,
    /// Normalized shape: offsets from min(A), starting at 0.
    pub shape: Vec<usize>,
    /// Matrix on (d²)^m, standard basis, first (earliest) leg slowest index.
    pub op: CMat,
    /// Upper bound on ‖·‖_# from the accumulated elementary decomposition.
    pub norm_sharp_ub: f64,
    /// Analytic tail of the discarded diagram orders.
    pub bound_tail: f64,
    /// Measured QMC error.
    pub stat_err: f64,
    pub nu: f64,
    pub dim: usize,
}

impl ExcitationOperator {
    pub fn n_legs(&self) -> usize {
        self.shape.len()
    }

    /// ‖(1 ⊗ ⟨vec(1)| on the max-A leg) E^c‖: exact conservation of
    /// probability annihilates this in the full series, so the residual of a
    /// truncated build must sit inside its certificate.
    pub fn ward_residual(&self) -> f64 {
        let d2 = self.dim * self.dim;
        let m = self.n_legs();
        if m == 0 {
            return 0.0;
        }
        let rows_rest = d2.pow((m - 1) as u32);
        let cols = d2.pow(m as u32);
        let w1 = vec_mat(&identity(self.dim));
        let mut contracted: CMat = Array2::zeros((rows_rest, cols));
        for slow in 0..rows_rest {
            for fast in 0..d2 {
                let row = slow * d2 + fast;
                let coef = w1[fast].conj();
                if coef.norm_sqr() == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    contracted[[slow, c]] += coef * self.op[[row, c]];
                }
            }
        }
        frobenius(&contracted)
    }
}

fn normalize_shape(a_set: &[usize]) -> Result<Vec<usize>> {
    if a_set.is_empty() {
        return Err(Error::Invalid("cell set must be nonempty".into()));
    }
    let mut s = a_set.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != a_set.len() {
        return Err(Error::Invalid("cell set has repeated elements".into()));
    }
    let min = s[0];
    Ok(s.into_iter().map(|x| x - min).collect())
}

/// Per-leg free dressing ⊗_τ e^{-iν ad(H_S)} applied to a tensor operator
/// living on m legs, in the eigenbasis (diagonal phases per leg row index).
fn dress_tensor_rows(frame: &EigenFrame, nu: f64, m: usize, x: &CMat) -> CMat {
    let d = frame.d;
    let d2 = d * d;
    let rows = d2.pow(m as u32);
    let mut out = x.clone();
    for row in 0..rows {
        // decode leg indices (first leg slowest); each leg digit encodes a
        // vectorized (r, c) pair in column-stacking order
        let mut phase = C64::new(1.0, 0.0);
        let mut r = row;
        for _ in 0..m {
            let dig = r % d2;
            r /= d2;
            let (rr, cc) = (dig % d, dig / d);
            phase *= C64::new(0.0, -nu * (frame.vals[rr] - frame.vals[cc])).exp();
        }
        for c in 0..x.ncols() {
            out[[row, c]] = x[[row, c]] * phase;
        }
    }
    out
}

/// Basis transform of an m-leg tensor operator from the eigenbasis to the
/// standard basis.
fn tensor_to_standard(frame: &EigenFrame, m: usize, x: &CMat) -> CMat {
    let t = kron(&frame.vecs.t().to_owned(), &dagger(&frame.vecs));
    let t_inv = kron(&frame.vecs.mapv(|z| z.conj()), &frame.vecs);
    let mut big_t = t.clone();
    let mut big_t_inv = t_inv.clone();
    for _ in 1..m {
        big_t = kron(&big_t, &t);
        big_t_inv = kron(&big_t_inv, &t_inv);
    }
    big_t_inv.dot(x).dot(&big_t)
}

fn excitation_with_constraint(
    model: &SystemModel,
    bc: &BathCorrelation,
    grid: &TimeGrid,
    a_set: &[usize],
    quad: &QuadConfig,
    constraint: CellConstraint,
) -> Result<ExcitationOperator> {
    let shape = normalize_shape(a_set)?;
    let m = shape.len();
    let d = model.dim;
    let nu = grid.nu;
    if m == 1 {
        // singleton excitations vanish identically
        return Ok(ExcitationOperator {
            a_set: a_set.to_vec(),
            shape,
            op: Array2::zeros((d * d, d * d)),
            norm_sharp_ub: 0.0,
            bound_tail: 0.0,
            stat_err: 0.0,
            nu,
            dim: d,
        });
    }
    let cells: Vec<(f64, f64)> = shape.iter().map(|&o| (o as f64 * nu, (o + 1) as f64 * nu)).collect();
    let frame = EigenFrame::new(model)?;
    let job = CellJob {
        frame: &frame,
        bc,
        lambda: model.lambda,
        cells: cells.clone(),
        constraint,
        quad: quad.clone(),
    };
    let n_lo = (m - 1).max(1);
    let integral = job.run(n_lo)?;
    let dressed = dress_tensor_rows(&frame, nu, m, &integral.op_eig);
    let op = tensor_to_standard(&frame, m, &dressed);
    // analytic tail over the discarded orders on the whole domain
    let span = shape.last().unwrap() + 1;
    let norms = model.coupling_norms();
    let h_diam = h_partial_integral(bc, &norms, span as f64 * nu)?;
    let a_dom = 4.0 * model.lambda * model.lambda * (m as f64 * nu) * h_diam;
    let bound_tail = series_tail(a_dom, quad.n_max);
    Ok(ExcitationOperator {
        a_set: a_set.to_vec(),
        shape,
        op,
        norm_sharp_ub: integral.sharp_ub,
        bound_tail,
        stat_err: integral.stat_err,
        nu,
        dim: d,
    })
}

/// E^c(B(A)): diagrams localized in Dom_ν(A) whose induced cell graph is
/// connected and spans A. Singleton sets give the zero operator.
pub fn excitation_connected(
    model: &SystemModel,
    bc: &BathCorrelation,
    grid: &TimeGrid,
    a_set: &[usize],
    quad: &QuadConfig,
) -> Result<ExcitationOperator> {
    excitation_with_constraint(model, bc, grid, a_set, quad, CellConstraint::ConnectedSpanning)
}

/// E(B(A)): diagrams whose induced graph touches every cell of A (no isolated
/// vertex). Used as the partition-inversion oracle for the connected build.
pub fn excitation_full(
    model: &SystemModel,
    bc: &BathCorrelation,
    grid: &TimeGrid,
    a_set: &[usize],
    quad: &QuadConfig,
) -> Result<ExcitationOperator> {
    excitation_with_constraint(model, bc, grid, a_set, quad, CellConstraint::NoIsolated)
}

// ---------------------------------------------------------------------------
// Cumulant (partition) inversion
// ---------------------------------------------------------------------------

/// Embed operators on subsets of tensor legs into the full m-leg space.
/// `parts` carries (sorted leg positions, operator on those legs).
pub fn tensor_embed(parts: &[(Vec<usize>, CMat)], m: usize, d2: usize) -> CMat {
    let dim = d2.pow(m as u32);
    let mut out: CMat = Array2::zeros((dim, dim));
    // position → (part index, position within part)
    let mut owner = vec![(usize::MAX, usize::MAX); m];
    for (pi, (pos, _)) in parts.iter().enumerate() {
        for (k, &p) in pos.iter().enumerate() {
            owner[p] = (pi, k);
        }
    }
    if owner.iter().any(|&(pi, _)| pi == usize::MAX) {
        panic!("tensor_embed: parts must cover all legs");
    }
    let decode = |idx: usize| -> Vec<usize> {
        let mut digits = vec![0usize; m];
        let mut r = idx;
        for pos in (0..m).rev() {
            digits[pos] = r % d2;
            r /= d2;
        }
        digits
    };
    for row in 0..dim {
        let rd = decode(row);
        for col in 0..dim {
            let cd = decode(col);
            let mut val = C64::new(1.0, 0.0);
            for (pi, (pos, op)) in parts.iter().enumerate() {
                let mp = pos.len();
                let mut pr = 0usize;
                let mut pc = 0usize;
                for k in 0..mp {
                    pr = pr * d2 + rd[pos[k]];
                    pc = pc * d2 + cd[pos[k]];
                }
                val *= op[[pr, pc]];
                if val.norm_sqr() == 0.0 {
                    break;
                }
                let _ = pi;
            }
            out[[row, col]] = val;
        }
    }
    out
}

/// Möbius inversion over the partition lattice:
/// E^c(A') = E(A') - Σ_{partitions of A' with ≥ 2 blocks} ⊗ E^c(blocks),
/// with the convention E^c({a}) = E({a}).
pub fn cumulant_invert(
    full_ops: &BTreeMap<Vec<usize>, CMat>,
    a_set: &[usize],
    d2: usize,
) -> Result<CMat> {
    let mut sorted = a_set.to_vec();
    sorted.sort_unstable();
    let mut cache: BTreeMap<Vec<usize>, CMat> = BTreeMap::new();
    cumulant_rec(full_ops, &sorted, d2, &mut cache)
}

fn cumulant_rec(
    full_ops: &BTreeMap<Vec<usize>, CMat>,
    a_set: &[usize],
    d2: usize,
    cache: &mut BTreeMap<Vec<usize>, CMat>,
) -> Result<CMat> {
    if let Some(hit) = cache.get(a_set) {
        return Ok(hit.clone());
    }
    let full = full_ops.get(a_set).ok_or_else(|| {
        Error::Invalid(format!("cumulant_invert: missing subset {a_set:?}"))
    })?;
    let m = a_set.len();
    if m == 1 {
        cache.insert(a_set.to_vec(), full.clone());
        return Ok(full.clone());
    }
    let mut acc = full.clone();
    let partitions = crate::oracle::enumerate_partitions(a_set)?;
    for p in partitions {
        if p.len() < 2 {
            continue;
        }
        let mut parts: Vec<(Vec<usize>, CMat)> = Vec::with_capacity(p.len());
        for block in &p {
            let mut b = block.clone();
            b.sort_unstable();
            let ec = cumulant_rec(full_ops, &b, d2, cache)?;
            let positions: Vec<usize> = b
                .iter()
                .map(|x| a_set.iter().position(|y| y == x).unwrap())
                .collect();
            parts.push((positions, ec));
        }
        let embedded = tensor_embed(&parts, m, d2);
        acc -= &embedded;
    }
    cache.insert(a_set.to_vec(), acc.clone());
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Leg (Schmidt) decomposition for the time-ordered assembly
// ---------------------------------------------------------------------------

/// Split an m-leg tensor operator into a sum of elementary tensors
/// Σ_k V_k^{(0)} ⊗ … ⊗ V_k^{(m-1)} by iterated operator-Schmidt SVD.
/// Terms with singular values below `tol`·σ_max are dropped.
pub fn leg_decomposition(op: &CMat, m: usize, d2: usize, tol: f64) -> Vec<Vec<CMat>> {
    if m == 1 {
        return vec![vec![op.clone()]];
    }
    // reshape M[(i0 I),(j0 J)] -> B[(i0 j0),(I J)] and SVD
    let rest = d2.pow((m - 1) as u32);
    let mut b: CMat = Array2::zeros((d2 * d2, rest * rest));
    for i0 in 0..d2 {
        for bi in 0..rest {
            for j0 in 0..d2 {
                for bj in 0..rest {
                    b[[i0 * d2 + j0, bi * rest + bj]] = op[[i0 * rest + bi, j0 * rest + bj]];
                }
            }
        }
    }
    use ndarray_linalg::SVD;
    let (u, s, vt) = b.svd(true, true).expect("svd failed");
    let u = u.unwrap();
    let vt = vt.unwrap();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::new();
    for k in 0..s.len() {
        if s[k] <= tol * smax || s[k] == 0.0 {
            continue;
        }
        let scale = s[k].sqrt();
        let mut first: CMat = Array2::zeros((d2, d2));
        for i0 in 0..d2 {
            for j0 in 0..d2 {
                first[[i0, j0]] = u[[i0 * d2 + j0, k]] * scale;
            }
        }
        let mut rest_op: CMat = Array2::zeros((rest, rest));
        for bi in 0..rest {
            for bj in 0..rest {
                rest_op[[bi, bj]] = vt[[k, bi * rest + bj]] * scale;
            }
        }
        for mut tail in leg_decomposition(&rest_op, m - 1, d2, tol) {
            let mut term = Vec::with_capacity(m);
            term.push(first.clone());
            term.append(&mut tail);
            out.push(term);
        }
    }
    out
}

/// Σ_k Π ‖legs‖₂ of a leg decomposition: an upper bound on ‖·‖_#.
pub fn sharp_norm_from_decomposition(terms: &[Vec<CMat>]) -> f64 {
    terms
        .iter()
        .map(|legs| legs.iter().map(spectral_norm).product::<f64>())
        .sum()
}

// ---------------------------------------------------------------------------
// Polymer enumeration and the time-ordered assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PolymerControls {
    pub a_max_size: usize,
    pub a_max_span: usize,
    pub max_parts: usize,
    /// Collections whose norm bound falls below this are skipped; their
    /// accumulated bound mass is reported, not ignored.
    pub prune_tol: f64,
}

impl Default for PolymerControls {
    fn default() -> Self {
        PolymerControls {
            a_max_size: 3,
            a_max_span: 6,
            max_parts: 3,
            prune_tol: 1e-12,
        }
    }
}

/// One polymer: disjoint parts with their hook intervals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PolymerSet {
    /// Parts sorted by min element; each part sorted ascending, |part| ≥ 2.
    pub parts: Vec<Vec<usize>>,
    /// hook(A) per part, same order.
    pub hooks: Vec<Vec<usize>>,
}

impl PolymerSet {
    /// Build hooks for disjoint parts inside {1..N}: hook(A) runs from
    /// max A + 1 to the next support element after max A (exclusive), or to
    /// N for the part holding the global maximum.
    pub fn with_hooks(mut parts: Vec<Vec<usize>>, n: usize) -> Self {
        for p in &mut parts {
            p.sort_unstable();
        }
        parts.sort_by_key(|p| p[0]);
        let support: Vec<usize> = {
            let mut s: Vec<usize> = parts.iter().flatten().cloned().collect();
            s.sort_unstable();
            s
        };
        let hooks = parts
            .iter()
            .map(|a| {
                let max_a = *a.last().unwrap();
                let tau_hook = support
                    .iter()
                    .cloned()
                    .find(|&t| t > max_a)
                    .unwrap_or(n + 1);
                (max_a + 1..tau_hook).collect()
            })
            .collect();
        PolymerSet { parts, hooks }
    }

    pub fn support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.parts.iter().flatten().cloned().collect();
        s.sort_unstable();
        s
    }

    /// Exact tiling check: parts, hooks and free cells partition {1..N}.
    pub fn tiles(&self, n: usize) -> bool {
        let mut seen = vec![0usize; n + 1];
        for p in self.parts.iter().chain(self.hooks.iter()) {
            for &c in p {
                if c < 1 || c > n {
                    return false;
                }
                seen[c] += 1;
            }
        }
        seen[1..].iter().all(|&k| k <= 1)
    }
}

/// Enumerate all polymers from the available shapes inside {1..N}.
fn enumerate_polymers(
    shapes: &[Vec<usize>],
    n: usize,
    controls: &PolymerControls,
) -> Vec<Vec<Vec<usize>>> {
    // all placed parts, keyed by min cell
    let mut parts: Vec<Vec<usize>> = Vec::new();
    for shape in shapes {
        let span = shape.last().unwrap() + 1;
        if span > n {
            continue;
        }
        for start in 1..=(n - span + 1) {
            parts.push(shape.iter().map(|&o| o + start).collect());
        }
    }
    parts.sort();
    let mut out = Vec::new();
    let mut current: Vec<Vec<usize>> = Vec::new();
    fn disjoint(a: &[usize], chosen: &[Vec<usize>]) -> bool {
        chosen.iter().all(|c| c.iter().all(|x| !a.contains(x)))
    }
    fn rec(
        parts: &[Vec<usize>],
        from: usize,
        current: &mut Vec<Vec<usize>>,
        max_parts: usize,
        out: &mut Vec<Vec<Vec<usize>>>,
    ) {
        if !current.is_empty() {
            out.push(current.clone());
        }
        if current.len() == max_parts {
            return;
        }
        for k in from..parts.len() {
            if disjoint(&parts[k], current) {
                current.push(parts[k].clone());
                rec(parts, k + 1, current, max_parts, out);
                current.pop();
            }
        }
    }
    rec(&parts, 0, &mut current, controls.max_parts, &mut out);
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct PolymerTermLedger {
    pub parts: Vec<Vec<usize>>,
    pub hooks: Vec<Vec<usize>>,
    pub contribution_norm: f64,
    pub norm_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationReport {
    /// Σ over included polymers of Π‖E^c‖_# C_g(1-g)^{|hook|} (their bound).
    pub included_bound: f64,
    /// Same bound accumulated over pruned polymers.
    pub pruned_bound: f64,
    /// δ_N from the recursion over the full shape table.
    pub delta_n: f64,
    /// Certificates of the excitation table feeding the sum.
    pub table_bound_tail: f64,
    pub table_stat_err: f64,
    pub n_terms: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PolymerSum {
    pub z_n: Superoperator,
    pub terms: Vec<PolymerTermLedger>,
    pub report: TruncationReport,
}

/// The excitation table: connected excitations per normalized shape, with
/// their leg decompositions.
pub struct ExcitationTable {
    pub by_shape: BTreeMap<Vec<usize>, ExcitationOperator>,
    pub legs_by_shape: BTreeMap<Vec<usize>, Vec<Vec<CMat>>>,
}

/// All normalized shapes with 2 ≤ size ≤ a_max_size and span ≤ a_max_span.
pub fn shapes_within(controls: &PolymerControls) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let span_cap = controls.a_max_span;
    for size in 2..=controls.a_max_size {
        // choose offsets 0 = o_1 < o_2 < … < o_size ≤ span_cap - 1
        let mut shape = vec![0usize; size];
        fn rec(shape: &mut Vec<usize>, k: usize, size: usize, cap: usize, out: &mut Vec<Vec<usize>>) {
            if k == size {
                out.push(shape.clone());
                return;
            }
            for o in (shape[k - 1] + 1)..=(cap - 1) {
                shape[k] = o;
                rec(shape, k + 1, size, cap, out);
            }
        }
        if size == 1 {
            out.push(vec![0]);
        } else {
            rec(&mut shape, 1, size, span_cap, &mut out);
        }
    }
    out.sort();
    out
}

/// Build the table of connected excitations for every shape within controls.
pub fn build_excitation_table(
    model: &SystemModel,
    bc: &BathCorrelation,
    grid: &TimeGrid,
    controls: &PolymerControls,
    quad: &QuadConfig,
) -> Result<ExcitationTable> {
    let mut by_shape = BTreeMap::new();
    let mut legs_by_shape = BTreeMap::new();
    let d2 = model.dim * model.dim;
    for shape in shapes_within(controls) {
        let a_set: Vec<usize> = shape.iter().map(|&o| o + 1).collect();
        let exc = excitation_connected(model, bc, grid, &a_set, quad)?;
        let legs = leg_decomposition(&exc.op, shape.len(), d2, 1e-13);
        // the Schmidt route often sharpens the accumulated bound
        let schmidt_bound = sharp_norm_from_decomposition(&legs);
        let mut exc = exc;
        exc.norm_sharp_ub = exc.norm_sharp_ub.min(schmidt_bound);
        legs_by_shape.insert(shape.clone(), legs);
        by_shape.insert(shape, exc);
    }
    Ok(ExcitationTable {
        by_shape,
        legs_by_shape,
    })
}

/// Z_N = T^N + Σ_{polymers} 𝒯[⊗E^c ⊗ hook strings T(1-R) ⊗ free T], with a
/// per-term ledger and the δ-machinery estimate of the neglected mass.
pub fn polymer_sum(
    t_op: &Superoperator,
    tspec: &TSpectral,
    table: &ExcitationTable,
    grid: &TimeGrid,
    controls: &PolymerControls,
) -> Result<PolymerSum> {
    let d = t_op.dim;
    let n = grid.n_steps;
    let shapes: Vec<Vec<usize>> = table.by_shape.keys().cloned().collect();
    let polymers = enumerate_polymers(&shapes, n, controls);
    let mut warning = None;
    if polymers.is_empty() {
        warning = Some("controls admit no polymer; returning T^N".into());
    }
    // precompute T powers and hook factor
    let t_hook = t_op.compose(&Superoperator::identity(d).sub(&tspec.r));
    let mut t_pows: Vec<CMat> = Vec::with_capacity(n + 1);
    t_pows.push(identity(d * d));
    for k in 1..=n {
        t_pows.push(t_pows[k - 1].dot(&t_op.mat));
    }
    let mut z = Superoperator {
        dim: d,
        mat: t_pows[n].clone(),
    };
    let mut terms = Vec::new();
    let mut included_bound = 0.0;
    let mut pruned_bound = 0.0;
    let mut table_tail: f64 = 0.0;
    let mut table_stat: f64 = 0.0;
    for exc in table.by_shape.values() {
        table_tail = table_tail.max(exc.bound_tail);
        table_stat = table_stat.max(exc.stat_err);
    }
    for parts in polymers {
        let poly = PolymerSet::with_hooks(parts, n);
        debug_assert!(poly.tiles(n));
        // cheap norm bound before assembling
        let mut bound = 1.0;
        for (part, hook) in poly.parts.iter().zip(&poly.hooks) {
            let shape = normalize_shape(part)?;
            let exc = &table.by_shape[&shape];
            bound *= (exc.norm_sharp_ub + exc.bound_tail) * tspec.c_g
                * (1.0 - tspec.g).powi(hook.len() as i32);
        }
        if bound < controls.prune_tol {
            pruned_bound += bound;
            continue;
        }
        included_bound += bound;
        let term_mat = assemble_polymer(&poly, t_op, &t_hook, &t_pows, table, n, d)?;
        let norm = spectral_norm(&term_mat);
        z.mat += &term_mat;
        terms.push(PolymerTermLedger {
            parts: poly.parts.clone(),
            hooks: poly.hooks.clone(),
            contribution_norm: norm,
            norm_bound: bound,
        });
    }
    // δ recursion over the full table for the total polymer mass
    let norm_table: BTreeMap<Vec<usize>, f64> = table
        .by_shape
        .iter()
        .map(|(s, e)| (s.clone(), e.norm_sharp_ub + e.bound_tail))
        .collect();
    let delta = delta_recursion(&norm_table, n, tspec.g, tspec.c_g, 1.0 - tspec.g, None);
    let report = TruncationReport {
        included_bound,
        pruned_bound,
        delta_n: delta.delta.last().cloned().unwrap_or(0.0),
        table_bound_tail: table_tail,
        table_stat_err: table_stat,
        n_terms: terms.len(),
        warning,
    };
    Ok(PolymerSum { z_n: z, terms, report })
}

/// 𝒯-assembly of one polymer term via the leg decompositions.
fn assemble_polymer(
    poly: &PolymerSet,
    t_op: &Superoperator,
    t_hook: &Superoperator,
    t_pows: &[CMat],
    table: &ExcitationTable,
    n: usize,
    d: usize,
) -> Result<CMat> {
    let dd = d * d;
    let hooks: std::collections::BTreeSet<usize> =
        poly.hooks.iter().flatten().cloned().collect();
    // per-cell slot: None = free T, Some(part, leg index)
    let mut slot: Vec<Option<(usize, usize)>> = vec![None; n + 1];
    for (pi, part) in poly.parts.iter().enumerate() {
        for (k, &cell) in part.iter().enumerate() {
            slot[cell] = Some((pi, k));
        }
    }
    let legs_lists: Vec<&Vec<Vec<CMat>>> = poly
        .parts
        .iter()
        .map(|part| {
            let shape = normalize_shape(part).expect("validated");
            &table.legs_by_shape[&shape]
        })
        .collect();
    // iterate over the product of decomposition terms across parts
    let mut combo = vec![0usize; poly.parts.len()];
    let mut acc: CMat = Array2::zeros((dd, dd));
    let min_supp = poly.support()[0];
    'outer: loop {
        // time-ordered product over cells N..1, later cells leftmost;
        // everything below min supp is a plain power of T
        let mut mat: CMat = identity(dd);
        for tau in (min_supp..=n).rev() {
            let factor: &CMat = if let Some((pi, leg)) = slot[tau] {
                &legs_lists[pi][combo[pi]][leg]
            } else if hooks.contains(&tau) {
                &t_hook.mat
            } else {
                &t_op.mat
            };
            mat = mat.dot(factor);
        }
        mat = mat.dot(&t_pows[min_supp - 1]);
        acc += &mat;
        // advance combo
        for pi in (0..combo.len()).rev() {
            combo[pi] += 1;
            if combo[pi] < legs_lists[pi].len() {
                continue 'outer;
            }
            combo[pi] = 0;
        }
        break;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// δ recursion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    pub delta: Vec<f64>,
    pub converged: Option<bool>,
    pub sup: f64,
}

/// Iterate δ_N = Σ_{A ⊆ I_N} w(A)·prefactor·base^{N - max A}·Π_{a∈A}(1+δ_a)
/// over the shape table, with δ_a capped at δ_{N-1} (the recursion is
/// monotone in N). `converged` compares sup δ against 2εC_g/g when ε given.
pub fn delta_recursion(
    norm_table: &BTreeMap<Vec<usize>, f64>,
    n_steps: usize,
    g: f64,
    prefactor: f64,
    base: f64,
    eps: Option<f64>,
) -> DeltaReport {
    let mut delta = vec![0.0f64; n_steps + 1];
    for n in 2..=n_steps {
        let mut acc = 0.0;
        for (shape, &w) in norm_table {
            if w == 0.0 {
                continue;
            }
            let span = shape.last().unwrap() + 1;
            if span > n {
                continue;
            }
            for start in 1..=(n - span + 1) {
                let max_a = start + shape.last().unwrap();
                let mut prod = 1.0;
                for &o in shape {
                    let a = start + o;
                    prod *= 1.0 + delta[a.min(n - 1)];
                }
                acc += w * prefactor * base.powi((n - max_a) as i32) * prod;
            }
        }
        delta[n] = acc.max(delta[n - 1]);
    }
    let sup = delta.last().cloned().unwrap_or(0.0);
    let converged = eps.map(|e| sup <= 2.0 * e * prefactor / g);
    DeltaReport {
        delta: delta[1..].to_vec(),
        converged,
        sup,
    }
}

// ---------------------------------------------------------------------------
// ε certificate (tree-sum machinery)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonCertificate {
    pub epsilon: f64,
    pub epsilon1: f64,
    /// ê(k) for cell distance k = 1, 2, …
    pub edge_table: Vec<f64>,
    /// κ = e^{const}·ε₁/ε at the certified ε.
    pub kappa: f64,
    /// The constant 2·𝔱_L·‖h‖₁ in the exponential prefactor.
    pub const_exp: f64,
}

/// Edge weight ê(k) = λ² ∫∫ h(v-u) over two cells k apart, evaluated as a
/// single integral against the triangular overlap weight.
pub fn edge_weight(env: &DecayEnvelope, grid: &TimeGrid, k: usize) -> Result<f64> {
    let nu = grid.nu;
    let lam2 = grid.lambda * grid.lambda;
    let lo = nu * (k as f64 - 1.0);
    let hi = nu * (k as f64 + 1.0);
    let f = |s: f64| {
        let tri = nu - (s - k as f64 * nu).abs();
        C64::new(tri.max(0.0) * env.h(s), 0.0)
    };
    // integrate in panels sized to the correlation decay
    let step = (8.0 * env.bath.decay_scale()).max(nu / 64.0).min(hi - lo);
    let mut acc = 0.0;
    let mut a = lo;
    while a < hi {
        let b = (a + step).min(hi);
        let (v, _) = crate::quad::adaptive_gk(&f, a, b, 1e-10)?;
        acc += v.re;
        a = b;
    }
    Ok(lam2 * acc)
}

/// Compute ε₁ = sup_τ Σ_{τ'} ζ(|τ-τ'|) ê(τ,τ') and the smallest ε for which
/// the tree-sum lemma applies with κ = e^{const} ε₁/ε ≤ 1. Bisection on ε.
pub fn epsilon_certificate(
    env: &DecayEnvelope,
    zp: &DecayProfile,
    grid: &TimeGrid,
) -> Result<EpsilonCertificate> {
    let const_exp = 2.0 * grid.t_char * env.h_l1;
    let mut edges = Vec::new();
    let mut eps1_half = 0.0;
    for k in 1..=256usize {
        let e = edge_weight(env, grid, k)?;
        let contrib = zp.eval(k as f64) * e;
        edges.push(e);
        eps1_half += contrib;
        if contrib < 1e-14 * eps1_half.max(1e-300) && k >= 4 {
            break;
        }
    }
    let epsilon1 = 2.0 * eps1_half; // both temporal directions
    if epsilon1 == 0.0 {
        return Ok(EpsilonCertificate {
            epsilon: 0.0,
            epsilon1,
            edge_table: edges,
            kappa: 0.0,
            const_exp,
        });
    }
    if epsilon1 >= 1.0 {
        return Err(Error::Certificate {
            stage: "epsilon".into(),
            detail: format!("coupling too large for certificate: ε₁ = {epsilon1:.3e}"),
        });
    }
    let feasible = |eps: f64| -> bool {
        let kappa = const_exp.exp() * epsilon1 / eps;
        let lemma = epsilon1 / eps <= (kappa / 2.0) * (-kappa).exp();
        lemma && kappa <= 1.0
    };
    let mut hi = epsilon1.max(1.0) * 1e12;
    if !feasible(hi) {
        return Err(Error::Certificate {
            stage: "epsilon".into(),
            detail: "tree-sum hypothesis infeasible at any ε (prefactor too small)".into(),
        });
    }
    let mut lo = epsilon1 * 1e-12;
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let epsilon = hi;
    Ok(EpsilonCertificate {
        epsilon,
        epsilon1,
        edge_table: edges,
        kappa: const_exp.exp() * epsilon1 / epsilon,
        const_exp,
    })
}

/// dist_ζ(A) = Π ζ(τ_{i+1} - τ_i) over consecutive elements.
pub fn dist_zeta(zp: &DecayProfile, a_set: &[usize]) -> f64 {
    a_set
        .windows(2)
        .map(|w| zp.eval((w[1] - w[0]) as f64))
        .product()
}

/// c(ζ, g) = sup_{n ≥ 1} ζ(n)·(√(1-g))ⁿ·C_g.
pub fn c_zeta(zp: &DecayProfile, g: f64, c_g: f64) -> f64 {
    let root = (1.0 - g).sqrt();
    let mut best: f64 = 0.0;
    let mut pow = 1.0;
    for n in 1..=200_000usize {
        pow *= root;
        let v = zp.eval(n as f64) * pow * c_g;
        best = best.max(v);
        if v < best * 1e-12 {
            break;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Steady state and speed of convergence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RateCertificate {
    pub c_g: f64,
    pub g: f64,
    /// Coefficient of the 1/ζ(N) term: (1 + c(ζ,g))·sup δ̃ of the ζ-weighted
    /// recursion.
    pub coefficient: f64,
    pub zeta: DecayProfile,
}

impl RateCertificate {
    /// Evaluated right-hand side of the discrete convergence bound,
    /// C_g(1-g)^N + coefficient/ζ(N).
    pub fn eval(&self, n: usize) -> f64 {
        self.c_g * (1.0 - self.g).powi(n as i32) + self.coefficient / self.zeta.eval(n as f64)
    }
}

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub rho_inv: CMat,
    pub distance_to_markov: f64,
    /// Trace-norm disagreement between two initial states after N steps.
    pub consistency: f64,
    pub certificate: RateCertificate,
    pub epsilon: EpsilonCertificate,
}

/// Extract ρ_inv = lim Z_N from the polymer sum, cross-checked against a
/// second initial state, with the evaluated convergence-rate certificate.
#[allow(clippy::too_many_arguments)]
pub fn steady_state(
    model: &SystemModel,
    lindblad_rho: &CMat,
    gap: f64,
    sum: &PolymerSum,
    tspec: &TSpectral,
    table: &ExcitationTable,
    env: &DecayEnvelope,
    zp: &DecayProfile,
    grid: &TimeGrid,
) -> Result<SteadyState> {
    if gap <= 0.0 {
        return Err(Error::FgrFails("gap = 0: no steady state selected".into()));
    }
    let eps = epsilon_certificate(env, zp, grid)?;
    let d = model.dim;
    let maximally_mixed = identity(d).mapv(|z| z / d as f64);
    let ground = {
        let mut m: CMat = Array2::zeros((d, d));
        m[[0, 0]] = C64::new(1.0, 0.0);
        m
    };
    let out_mixed = sum.z_n.apply(&maximally_mixed);
    let out_ground = sum.z_n.apply(&ground);
    let consistency = crate::linalg::trace_norm(&(&out_mixed - &out_ground));
    let mut rho = hermitize(&out_mixed);
    let tr = trace(&rho);
    rho = rho.mapv(|z| z / tr);
    let distance_to_markov = crate::linalg::trace_norm(&(&rho - lindblad_rho));
    // ζ-weighted δ recursion for the 1/ζ(N) coefficient
    let cz = c_zeta(zp, tspec.g, tspec.c_g);
    let weighted: BTreeMap<Vec<usize>, f64> = table
        .by_shape
        .iter()
        .map(|(s, e)| {
            let a: Vec<usize> = s.clone();
            let w = (e.norm_sharp_ub + e.bound_tail)
                * cz.powi(s.len() as i32)
                * dist_zeta(zp, &a);
            (s.clone(), w)
        })
        .collect();
    let tilde = delta_recursion(
        &weighted,
        grid.n_steps.max(8),
        tspec.g,
        1.0,
        (1.0 - tspec.g).sqrt(),
        None,
    );
    let certificate = RateCertificate {
        c_g: tspec.c_g,
        g: tspec.g,
        coefficient: (1.0 + cz) * tilde.sup,
        zeta: zp.clone(),
    };
    Ok(SteadyState {
        rho_inv: rho,
        distance_to_markov,
        consistency,
        certificate,
        epsilon: eps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedBound {
    pub value: f64,
    pub markov_term: f64,
    pub memory_term: f64,
    /// Effective mixing time -ℓ/ln(1-g); its excess over 𝔱_L is the measured
    /// o(λ⁰) correction of the exponential rate.
    pub t_eff: f64,
    pub o_lambda_residual: f64,
}

/// Two-term convergence bound at microscopic time t > 𝔱_L λ⁻²:
/// C_g·exp(-λ²t/t_eff) + coefficient/ζ(λ²t/(2𝔱_L)). All placeholders are
/// computed quantities and reported separately.
pub fn speed_bound(
    grid: &TimeGrid,
    g_ell: f64,
    t_char: f64,
    cert: &RateCertificate,
    t: f64,
) -> Result<SpeedBound> {
    let lam2 = grid.lambda * grid.lambda;
    if t <= t_char / lam2 {
        return Err(Error::Invalid(format!(
            "speed bound valid only for t > 𝔱_L λ⁻² = {:.6}",
            t_char / lam2
        )));
    }
    let t_eff = -grid.ell / (1.0 - g_ell).ln();
    let markov_term = cert.c_g * (-lam2 * t / t_eff).exp();
    let memory_term = cert.coefficient / cert.zeta.eval(lam2 * t / (2.0 * t_char));
    Ok(SpeedBound {
        value: markov_term + memory_term,
        markov_term,
        memory_term,
        t_eff,
        o_lambda_residual: t_eff - t_char,
    })
}

/// Analytic tail certificate for the excitation discarded above `n_max`
/// (exposed for the Ward acceptance checks).
pub fn excitation_tail(model: &SystemModel, bc: &BathCorrelation, grid: &TimeGrid, shape: &[usize], n_max: usize) -> Result<f64> {
    let span = shape.last().unwrap() + 1;
    let m = shape.len();
    let norms = model.coupling_norms();
    let h_diam = h_partial_integral(bc, &norms, span as f64 * grid.nu)?;
    let a_dom = 4.0 * model.lambda * model.lambda * (m as f64 * grid.nu) * h_diam;
    Ok(series_tail(a_dom, n_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathConfig, LorentzMode};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn sigma_x() -> CMat {
        ndarray::array![[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]]
    }

    fn two_level(lambda: f64) -> SystemModel {
        let h = ndarray::array![[c(0.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]];
        SystemModel::new(h, vec![sigma_x()], lambda).unwrap()
    }

    /// Two KMS-paired damped modes at the Bohr frequency; small mixing time
    /// relative to the correlation mass, which keeps the one-cell Dyson
    /// series convergent at low orders.
    fn test_bath() -> BathCorrelation {
        BathCorrelation::new(BathConfig::Lorentzian {
            modes: vec![
                LorentzMode { center: -1.0, gamma: 0.35, weight: 1.0 },
                LorentzMode { center: 1.0, gamma: 0.35, weight: (-1.0f64).exp() },
            ],
        })
        .unwrap()
    }

    fn small_grid(n: usize, lambda: f64, ell: f64) -> TimeGrid {
        TimeGrid::unrestricted(n, ell, lambda, 0.3).unwrap()
    }

    fn fast_quad() -> QuadConfig {
        QuadConfig { n_max: 2, qmc_log2: 12, qmc_replicates: 4, seed: 11, ..Default::default() }
    }

    #[test]
    fn grid_range_enforcement() {
        assert!(TimeGrid::new(4, 0.5, 0.1, 0.3).is_ok());
        assert!(TimeGrid::new(4, 0.1, 0.1, 0.3).is_err());
        let g = TimeGrid::unrestricted(4, 0.1, 0.1, 0.3).unwrap();
        assert!(!g.within_mixing_range);
        assert_abs_diff_eq!(g.nu, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn one_step_free_at_lambda_zero() {
        // λ → 0 with fixed ν (grid built at finite λ, coupling set to zero)
        let model = {
            let h = ndarray::array![[c(0.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]];
            let zero: CMat = Array2::zeros((2, 2));
            SystemModel::new(h, vec![zero], 0.1).unwrap()
        };
        let grid = small_grid(2, 0.1, 0.2);
        let t = one_step_t(&model, &test_bath(), &grid, &fast_quad()).unwrap();
        let w = crate::model::ad_hs_propagator(&model, grid.nu).unwrap();
        assert!(frobenius(&(&t.op.mat - &w.mat)) < 1e-12);
    }

    #[test]
    fn t_spectral_on_explicit_contraction() {
        // T = R + 0.5·(1-R) built by hand
        let d = 2;
        let rho = ndarray::array![[c(0.7, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(0.3, 0.0)]];
        let r = Superoperator::rank_one(&rho, &identity(d));
        let t = r.add(&Superoperator::identity(d).sub(&r).scale(c(0.5, 0.0)));
        let spec = TSpectral::compute(&t).unwrap();
        assert!(spec.unit_eig_residual < 1e-12);
        assert_abs_diff_eq!(spec.g, 0.5, epsilon = 1e-10);
        assert!(frobenius(&(&spec.rho_t - &rho)) < 1e-10);
        // C_g = ‖1-R‖ for this explicit contraction (oblique projector norm)
        let expect_cg = spectral_norm(&Superoperator::identity(d).sub(&spec.r).mat);
        assert_abs_diff_eq!(spec.c_g, expect_cg, epsilon = 1e-3);
        assert!(spec.c_g >= 1.0 && spec.c_g < 1.2);
    }

    #[test]
    fn excitation_singleton_is_zero() {
        let model = two_level(0.2);
        let grid = small_grid(2, 0.2, 0.3);
        let exc = excitation_connected(&model, &test_bath(), &grid, &[3], &fast_quad()).unwrap();
        assert_eq!(exc.op.nrows(), 4);
        assert!(frobenius(&exc.op) == 0.0);
        assert_eq!(exc.norm_sharp_ub, 0.0);
    }

    #[test]
    fn excitation_translation_covariance() {
        let model = two_level(0.2);
        let grid = small_grid(4, 0.2, 0.3);
        let quad = fast_quad();
        let e12 = excitation_connected(&model, &test_bath(), &grid, &[1, 2], &quad).unwrap();
        let e34 = excitation_connected(&model, &test_bath(), &grid, &[3, 4], &quad).unwrap();
        // identical data bit-for-bit: the build normalizes to the shape
        assert_eq!(e12.shape, e34.shape);
        assert_eq!(e12.op, e34.op);
        assert_eq!(e12.norm_sharp_ub, e34.norm_sharp_ub);
    }

    #[test]
    fn excitation_pair_matches_full_for_two_cells() {
        // for |A| = 2, connected and no-isolated coincide
        let model = two_level(0.2);
        let grid = small_grid(2, 0.2, 0.3);
        let quad = fast_quad();
        let ec = excitation_connected(&model, &test_bath(), &grid, &[1, 2], &quad).unwrap();
        let ef = excitation_full(&model, &test_bath(), &grid, &[1, 2], &quad).unwrap();
        assert!(frobenius(&(&ec.op - &ef.op)) < 1e-14);
        assert!(ec.norm_sharp_ub > 0.0);
    }

    #[test]
    fn ward_residual_within_certificate() {
        let model = two_level(0.15);
        let grid = small_grid(2, 0.15, 0.3);
        let quad = QuadConfig { n_max: 3, qmc_log2: 13, qmc_replicates: 8, seed: 5, ..Default::default() };
        let exc = excitation_connected(&model, &test_bath(), &grid, &[1, 2], &quad).unwrap();
        let residual = exc.ward_residual();
        let cert = exc.bound_tail + 3.0 * exc.stat_err;
        assert!(
            residual <= cert.max(1e-9),
            "Ward residual {residual:.3e} vs certificate {cert:.3e}"
        );
        // the residual must be a small fraction of the excitation itself
        assert!(residual < 0.5 * frobenius(&exc.op).max(1e-12));
    }

    #[test]
    fn tensor_embed_and_leg_decomposition_roundtrip() {
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(13);
        let a = crate::linalg::random_hermitian(4, &mut rng);
        let b = crate::linalg::random_hermitian(4, &mut rng);
        let full = kron(&a, &b);
        // embed as two single-leg parts
        let emb = tensor_embed(&[(vec![0], a.clone()), (vec![1], b.clone())], 2, 4);
        assert!(frobenius(&(&emb - &full)) < 1e-12);
        // Schmidt round trip
        let terms = leg_decomposition(&full, 2, 4, 1e-13);
        let mut recon: CMat = Array2::zeros((16, 16));
        for t in &terms {
            recon += &kron(&t[0], &t[1]);
        }
        assert!(frobenius(&(&recon - &full)) < 1e-10);
        // the sharp bound of an elementary tensor is ‖a‖·‖b‖
        let sharp = sharp_norm_from_decomposition(&terms);
        let exact = spectral_norm(&a) * spectral_norm(&b);
        assert!(sharp >= exact - 1e-10 && sharp < exact * 1.5 + 1e-10);
    }

    #[test]
    fn cumulant_scalar_shadow_matches_classical_cumulants() {
        // three scalar variables with known moments: X ~ {1,2}, Y = X², Z = 2X
        // with equal weights; moments computed by direct enumeration
        let xs = [1.0, 2.0];
        let moment = |f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / 2.0;
        let vars: [Box<dyn Fn(f64) -> f64>; 3] =
            [Box::new(|x| x), Box::new(|x| x * x), Box::new(|x| 2.0 * x)];
        let mut full: BTreeMap<Vec<usize>, CMat> = BTreeMap::new();
        for set in [
            vec![1], vec![2], vec![3],
            vec![1, 2], vec![1, 3], vec![2, 3],
            vec![1, 2, 3],
        ] {
            let m = moment(&|x| set.iter().map(|&i| vars[i - 1](x)).product());
            full.insert(set, Array2::from_elem((1, 1), c(m, 0.0)));
        }
        let ec12 = cumulant_invert(&full, &[1, 2], 1).unwrap()[[0, 0]].re;
        // classical covariance: E[XY] - E[X]E[Y]
        let cov = moment(&|x| x * x * x) - moment(&|x| x) * moment(&|x| x * x);
        assert_abs_diff_eq!(ec12, cov, epsilon = 1e-12);
        let ec123 = cumulant_invert(&full, &[1, 2, 3], 1).unwrap()[[0, 0]].re;
        // third joint cumulant: E[XYZ] - ΣE[·]E[··] + 2E[X]E[Y]E[Z]
        let exyz = moment(&|x| x * x * x * 2.0 * x);
        let k3 = exyz
            - moment(&|x| x) * moment(&|x| x * x * 2.0 * x)
            - moment(&|x| x * x) * moment(&|x| x * 2.0 * x)
            - moment(&|x| 2.0 * x) * moment(&|x| x * x * x)
            + 2.0 * moment(&|x| x) * moment(&|x| x * x) * moment(&|x| 2.0 * x);
        assert_abs_diff_eq!(ec123, k3, epsilon = 1e-12);
    }

    #[test]
    fn cumulant_roundtrip_on_three_legs() {
        // random "full" operators on all subsets of {1,2,3}; inverting and
        // reassembling must reproduce them exactly
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(23);
        let d2: usize = 4;
        let all_sets: Vec<Vec<usize>> = vec![
            vec![1], vec![2], vec![3],
            vec![1, 2], vec![1, 3], vec![2, 3],
            vec![1, 2, 3],
        ];
        let mut full: BTreeMap<Vec<usize>, CMat> = BTreeMap::new();
        for s in &all_sets {
            let dim = d2.pow(s.len() as u32);
            let mut m: CMat = Array2::zeros((dim, dim));
            for r in 0..dim {
                for cc in 0..dim {
                    use rand::Rng;
                    m[[r, cc]] = c(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                }
            }
            full.insert(s.clone(), m);
        }
        // connected parts for every subset
        let mut conn: BTreeMap<Vec<usize>, CMat> = BTreeMap::new();
        for s in &all_sets {
            conn.insert(s.clone(), cumulant_invert(&full, s, d2).unwrap());
        }
        // reassemble E(A') = Σ partitions ⊗ E^c
        for s in &all_sets {
            let mut recon: CMat = Array2::zeros((d2.pow(s.len() as u32), d2.pow(s.len() as u32)));
            for p in crate::oracle::enumerate_partitions(s).unwrap() {
                let parts: Vec<(Vec<usize>, CMat)> = p
                    .iter()
                    .map(|block| {
                        let mut b = block.clone();
                        b.sort_unstable();
                        let positions: Vec<usize> =
                            b.iter().map(|x| s.iter().position(|y| y == x).unwrap()).collect();
                        (positions, conn[&b].clone())
                    })
                    .collect();
                recon += &tensor_embed(&parts, s.len(), d2);
            }
            assert!(
                frobenius(&(&recon - &full[s])) < 1e-10,
                "roundtrip failed on {s:?}"
            );
        }
    }

    #[test]
    fn polymer_structure_n2_and_n3() {
        let shapes = shapes_within(&PolymerControls::default());
        let polys2 = enumerate_polymers(&shapes, 2, &PolymerControls::default());
        assert_eq!(polys2.len(), 1);
        assert_eq!(polys2[0], vec![vec![1, 2]]);
        let polys3 = enumerate_polymers(&shapes, 3, &PolymerControls::default());
        let mut sets: Vec<Vec<Vec<usize>>> = polys3.clone();
        sets.sort();
        let expect: Vec<Vec<Vec<usize>>> = vec![
            vec![vec![1, 2]],
            vec![vec![1, 2, 3]],
            vec![vec![1, 3]],
            vec![vec![2, 3]],
        ];
        assert_eq!(sets, expect, "N=3 polymer terms");
    }

    #[test]
    fn hooks_and_tiling() {
        // A₁ = {3,4,6}, A₂ = {5,10,11,13}, A₃ = {16,17} in N = 20
        let poly = PolymerSet::with_hooks(
            vec![vec![3, 4, 6], vec![5, 10, 11, 13], vec![16, 17]],
            20,
        );
        let hooks: BTreeMap<Vec<usize>, Vec<usize>> = poly
            .parts
            .iter()
            .cloned()
            .zip(poly.hooks.iter().cloned())
            .collect();
        assert_eq!(hooks[&vec![3, 4, 6]], vec![7, 8, 9]);
        assert_eq!(hooks[&vec![5, 10, 11, 13]], vec![14, 15]);
        assert_eq!(hooks[&vec![16, 17]], vec![18, 19, 20]);
        assert!(poly.tiles(20));
        // exactly one part hooks to N+1
        let n_open = poly
            .parts
            .iter()
            .zip(&poly.hooks)
            .filter(|(p, h)| h.last().cloned().unwrap_or(*p.last().unwrap()) == 20)
            .count();
        assert_eq!(n_open, 1);
    }

    #[test]
    fn polymer_sum_small_n_against_direct_assembly() {
        // N = 2: Z₂ = T² + 𝒯[E^c({1,2})]; assembly must match the direct
        // composition of Schmidt legs
        let model = two_level(0.2);
        let bc = test_bath();
        let grid = small_grid(2, 0.2, 0.3);
        let quad = fast_quad();
        let t = one_step_t(&model, &bc, &grid, &quad).unwrap();
        let tspec = TSpectral::compute(&t.op).unwrap();
        let controls = PolymerControls { prune_tol: 0.0, ..Default::default() };
        let table = build_excitation_table(&model, &bc, &grid, &controls, &quad).unwrap();
        let sum = polymer_sum(&t.op, &tspec, &table, &grid, &controls).unwrap();
        assert_eq!(sum.terms.len(), 1);
        let legs = &table.legs_by_shape[&vec![0, 1]];
        let mut direct = t.op.mat.dot(&t.op.mat);
        for term in legs {
            // 𝒯[V₁ ⊗ V₂] = V₂·V₁ with leg 0 the earlier cell
            direct += &term[1].dot(&term[0]);
        }
        assert!(
            frobenius(&(&sum.z_n.mat - &direct)) < 1e-10,
            "N=2 assembly mismatch"
        );
    }

    #[test]
    fn delta_recursion_examples() {
        // all norms zero → δ ≡ 0
        let mut table: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        table.insert(vec![0, 1], 0.0);
        let rep = delta_recursion(&table, 6, 0.5, 1.0, 0.5, Some(0.1));
        assert!(rep.delta.iter().all(|&x| x == 0.0));
        assert_eq!(rep.converged, Some(true));

        // single adjacent-pair weight ε₀ at N = 2: δ₂ = ε₀·C_g
        let eps0 = 1e-3;
        let mut table: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        table.insert(vec![0, 1], eps0);
        let (g, cg) = (0.4, 1.2);
        let rep = delta_recursion(&table, 2, g, cg, 1.0 - g, None);
        assert_abs_diff_eq!(rep.delta[1], eps0 * cg, epsilon = 1e-15);
        // direct enumeration of Pol(2): the single polymer {{1,2}} with
        // empty hook gives exactly the same mass
        let direct = eps0 * cg * (1.0 - g).powi(0);
        assert_abs_diff_eq!(rep.delta[1], direct, epsilon = 1e-15);

        // monotone in N
        let rep = delta_recursion(&table, 12, g, cg, 1.0 - g, None);
        for w in rep.delta.windows(2) {
            assert!(w[1] >= w[0] - 1e-15);
        }
    }

    #[test]
    fn epsilon_certificate_zero_and_scaling() {
        let model_zero = {
            let h = ndarray::array![[c(0.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]];
            let zero: CMat = Array2::zeros((2, 2));
            SystemModel::new(h, vec![zero], 0.1).unwrap()
        };
        let env0 = crate::bath::envelope(&test_bath(), &model_zero).unwrap();
        let grid = small_grid(4, 0.1, 0.3);
        let cert0 = epsilon_certificate(&env0, &DecayProfile::Constant, &grid).unwrap();
        assert_eq!(cert0.epsilon, 0.0);
        assert!(cert0.edge_table.iter().all(|&e| e == 0.0));

        // halving λ at fixed ℓ shrinks ε₁ at least fourfold (trend)
        let model = two_level(0.2);
        let env = crate::bath::envelope(&test_bath(), &model).unwrap();
        let zp = DecayProfile::Power { alpha: 0.5 };
        let g1 = small_grid(4, 0.2, 0.3);
        let g2 = small_grid(4, 0.1, 0.3);
        let c1 = epsilon_certificate(&env, &zp, &g1).unwrap();
        let c2 = epsilon_certificate(&env, &zp, &g2).unwrap();
        assert!(
            c2.epsilon1 < c1.epsilon1 / 3.5,
            "ε₁ did not shrink: {} → {}",
            c1.epsilon1,
            c2.epsilon1
        );
        // bisection result matches the closed-form smallest ε
        let closed = c1.const_exp.exp() * c1.epsilon1 / (c1.const_exp - (2.0f64).ln()).min(1.0);
        assert_abs_diff_eq!(c1.epsilon, closed, epsilon = closed * 1e-6);
    }

    #[test]
    fn speed_bound_shape() {
        let grid = small_grid(8, 0.1, 0.3);
        let cert = RateCertificate {
            c_g: 1.1,
            g: 0.3,
            coefficient: 0.05,
            zeta: DecayProfile::Constant,
        };
        // below the validity threshold: error
        assert!(speed_bound(&grid, 0.3, 0.3, &cert, 25.0).is_err());
        let b1 = speed_bound(&grid, 0.3, 0.3, &cert, 200.0).unwrap();
        let b2 = speed_bound(&grid, 0.3, 0.3, &cert, 2000.0).unwrap();
        // constant ζ: memory term constant, total decreasing toward it
        assert!(b2.value < b1.value);
        assert_abs_diff_eq!(b1.memory_term, 0.05, epsilon = 1e-12);
        assert!(b2.markov_term < b1.markov_term);
    }
}
