//! Dyson/Wick diagram expansion of the reduced dynamics.
//!
//! Diagrams are sets of time pairs w = ((u,k^u,a^u),(v,k^v,a^v)) with u < v.
//! Each pair carries a scalar weight λ²f_{a^v,a^u}(v-u) (conjugated when
//! k^u = Ri) and each of its legs a multiplication superoperator
//! M_{k}(iD_a(t)). The sum over left/right labels collapses exactly into
//! per-leg matrices, so the integrand evaluated at a sampled w is a single
//! ordered product:
//!
//!   v-leg:  M_Le(iD(t)) + M_Ri(iD(t))
//!   u-leg:  F·M_Le(iD(t)) + F̄·M_Ri(iD(t)),   F = λ² f(v-u).
//!
//! Simplex integrals run over (u, s = v-u) coordinates with an importance
//! stretch toward small s where the correlation lives; orders n ≤ 2 on a
//! single interval use tensorized Gauss–Legendre when the oscillation budget
//! allows, everything else scrambled QMC with a measured statistical error.

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::bath::BathCorrelation;
use crate::error::{Error, Result};
use crate::linalg::{dagger, frobenius, kron, CMat};
use crate::model::{Superoperator, SystemModel};
use crate::qmc::{stretch_map, uniform_map, ScrambledHalton};
use crate::quad::gauss_legendre_unit;

/// Left/right multiplication label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KLabel {
    Le,
    Ri,
}

/// One Wick pair in w-coordinates, with channels attached to the legs.
#[derive(Debug, Clone)]
pub struct DiagramPair {
    pub u: f64,
    pub v: f64,
    pub k_u: KLabel,
    pub k_v: KLabel,
    pub ch_u: usize,
    pub ch_v: usize,
}

/// An ordered list of pairs: u_i < v_i and u_1 < u_2 < … (strict).
#[derive(Debug, Clone, Default)]
pub struct Diagram {
    pub pairs: Vec<DiagramPair>,
}

impl Diagram {
    pub fn new(pairs: Vec<DiagramPair>) -> Result<Self> {
        for p in &pairs {
            if !(p.u < p.v) {
                return Err(Error::Invalid(format!("pair needs u < v, got ({}, {})", p.u, p.v)));
            }
            if p.u < 0.0 {
                return Err(Error::Invalid("diagram times must be ≥ 0".into()));
            }
        }
        if pairs.windows(2).any(|w| w[0].u >= w[1].u) {
            return Err(Error::Invalid("u-coordinates must be strictly increasing".into()));
        }
        Ok(Diagram { pairs })
    }

    pub fn order(&self) -> usize {
        self.pairs.len()
    }
}

/// G(w): product over pairs of λ²f_{a^v,a^u}(v-u), conjugated when k^u = Ri.
pub fn diagram_weight(dg: &Diagram, bc: &BathCorrelation, lambda: f64) -> Result<C64> {
    let mut w = C64::new(1.0, 0.0);
    for p in &dg.pairs {
        let f = bc.correlation(p.ch_v, p.ch_u, p.v - p.u)?;
        let f = match p.k_u {
            KLabel::Le => f,
            KLabel::Ri => f.conj(),
        };
        w *= lambda * lambda * f;
    }
    Ok(w)
}

/// K(t,k): time-ordered product of M_{k}(iD_a(t)) over all 2n legs,
/// later times leftmost.
pub fn diagram_operator(dg: &Diagram, model: &SystemModel) -> Result<Superoperator> {
    let mut legs: Vec<(f64, KLabel, usize)> = Vec::with_capacity(2 * dg.pairs.len());
    for p in &dg.pairs {
        legs.push((p.u, p.k_u, p.ch_u));
        legs.push((p.v, p.k_v, p.ch_v));
    }
    legs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = Superoperator::identity(model.dim);
    for (t, k, ch) in legs {
        let u = crate::linalg::expm_herm(&model.h_s, C64::new(0.0, t))?;
        let d_t = u.dot(&model.couplings[ch]).dot(&dagger(&u));
        let id_t = d_t.mapv(|z| C64::new(0.0, 1.0) * z);
        let m = match k {
            KLabel::Le => crate::model::left_mult(&id_t)?,
            KLabel::Ri => crate::model::right_mult(&id_t)?,
        };
        acc = m.compose(&acc);
    }
    Ok(acc)
}

/// Quadrature controls for the diagram expansion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Highest diagram order kept.
    pub n_max: usize,
    /// log2 of the QMC point count per replicate.
    pub qmc_log2: u32,
    /// Number of Cranley–Patterson replicates for the error estimate.
    pub qmc_replicates: u32,
    pub seed: u64,
    /// Max tensor-product evaluations before Gauss–Legendre falls back to QMC.
    pub gl_budget: usize,
    /// Override of the importance-stretch scale (default: bath decay scale).
    pub stretch_scale: Option<f64>,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            n_max: 3,
            qmc_log2: 13,
            qmc_replicates: 8,
            seed: 7,
            gl_budget: 3_000_000,
            stretch_scale: None,
        }
    }
}

impl QuadConfig {
    pub fn with_n_max(&self, n_max: usize) -> Self {
        QuadConfig { n_max, ..self.clone() }
    }
    pub fn with_seed(&self, seed: u64) -> Self {
        QuadConfig { seed, ..self.clone() }
    }
}

/// Eigenbasis working frame: all diagram algebra runs in the H_S eigenbasis,
/// where free propagators are diagonal phases.
pub(crate) struct EigenFrame {
    pub d: usize,
    pub vals: Vec<f64>,
    pub vecs: CMat,
    /// Couplings in the eigenbasis, D̃_a = V† D_a V.
    pub couplings: Vec<CMat>,
    pub max_bohr: f64,
}

impl EigenFrame {
    pub fn new(model: &SystemModel) -> Result<Self> {
        let (vals, vecs) = model.eigensystem()?;
        let vd = dagger(&vecs);
        let couplings = model
            .couplings
            .iter()
            .map(|dop| vd.dot(dop).dot(&vecs))
            .collect();
        let vals: Vec<f64> = vals.to_vec();
        let max_bohr = vals
            .iter()
            .flat_map(|&a| vals.iter().map(move |&b| (a - b).abs()))
            .fold(0.0, f64::max);
        Ok(EigenFrame {
            d: model.dim,
            vals,
            vecs,
            couplings,
            max_bohr,
        })
    }

    /// D̃_a(t): entries of D̃_a twisted by the Bohr phases e^{i(E_r - E_c)t}.
    fn coupling_at(&self, a: usize, t: f64) -> CMat {
        let d = self.d;
        let mut out = Array2::zeros((d, d));
        for r in 0..d {
            for c in 0..d {
                out[[r, c]] =
                    self.couplings[a][[r, c]] * C64::new(0.0, (self.vals[r] - self.vals[c]) * t).exp();
            }
        }
        out
    }

    /// Left-multiply X (a d²×d² matrix in the eigenbasis) by the free
    /// propagator e^{-it·ad(H_S)} = diag phases e^{-it(E_r - E_R)}.
    pub fn free_propagate(&self, t: f64, x: &CMat) -> CMat {
        let d = self.d;
        let mut out = x.clone();
        for r in 0..d {
            for rr in 0..d {
                let phase = C64::new(0.0, -t * (self.vals[r] - self.vals[rr])).exp();
                let row = r + d * rr;
                for c in 0..d * d {
                    out[[row, c]] *= phase;
                }
            }
        }
        out
    }

    /// Transform a superoperator matrix from the eigenbasis back to the
    /// standard basis: mat_std = (conj V ⊗ V) · mat_eig · (Vᵀ ⊗ V†).
    pub fn to_standard(&self, mat_eig: &CMat) -> CMat {
        let t = kron(&self.vecs.t().to_owned(), &dagger(&self.vecs));
        let t_inv = kron(&self.vecs.mapv(|z| z.conj()), &self.vecs);
        t_inv.dot(mat_eig).dot(&t)
    }
}

/// X ← coef_le·(I ⊗ B)·X + coef_ri·(conj(B) ⊗ I)·X, in place of a fresh array.
/// This is one collapsed diagram leg with matrix B = D̃_a(t).
fn apply_leg(x: &CMat, b: &CMat, coef_le: C64, coef_ri: C64) -> CMat {
    let d = b.nrows();
    let dd = d * d;
    let mut out: CMat = Array2::zeros((dd, dd));
    // (I ⊗ B): row (r + d·R) mixes r' within the same R block
    for rr in 0..d {
        for r in 0..d {
            let row = r + d * rr;
            for rp in 0..d {
                let coef = coef_le * b[[r, rp]];
                if coef.norm_sqr() == 0.0 {
                    continue;
                }
                let src = rp + d * rr;
                for c in 0..dd {
                    out[[row, c]] += coef * x[[src, c]];
                }
            }
        }
    }
    // (conj(B) ⊗ I): row (r + d·R) mixes R'
    for rr in 0..d {
        for r in 0..d {
            let row = r + d * rr;
            for rrp in 0..d {
                let coef = coef_ri * b[[rr, rrp]].conj();
                if coef.norm_sqr() == 0.0 {
                    continue;
                }
                let src = r + d * rrp;
                for c in 0..dd {
                    out[[row, c]] += coef * x[[src, c]];
                }
            }
        }
    }
    out
}

/// Graph constraint on the cell assignment of a diagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CellConstraint {
    /// No constraint (single-interval Dyson series).
    All,
    /// The induced cell graph must be connected on all cells.
    ConnectedSpanning,
    /// Every cell must be touched by at least one cross-cell pair.
    NoIsolated,
}

/// One sampled pair position with its geometric quadrature weight.
#[derive(Debug, Clone, Copy)]
struct SampledPair {
    u: f64,
    v: f64,
    weight: f64,
}

/// Map two unit coordinates to a pair with u in `cu`, v in `cv`, u < v.
/// Returns None when the cells admit no such pair.
fn sample_pair(
    xi_s: f64,
    xi_u: f64,
    cu: (f64, f64),
    cv: (f64, f64),
    stretch: Option<f64>,
) -> Option<SampledPair> {
    let s_lo = (cv.0 - cu.1).max(0.0);
    let s_hi = cv.1 - cu.0;
    if s_hi <= s_lo {
        return None;
    }
    let (s, jac_s) = match stretch {
        Some(c) => stretch_map(xi_s, s_lo, s_hi, c),
        None => uniform_map(xi_s, s_lo, s_hi),
    };
    let w_lo = cu.0.max(cv.0 - s);
    let w_hi = cu.1.min(cv.1 - s);
    let len = w_hi - w_lo;
    if len <= 0.0 {
        return Some(SampledPair { u: w_lo, v: w_lo + s, weight: 0.0 });
    }
    let u = w_lo + xi_u * len;
    Some(SampledPair {
        u,
        v: u + s,
        weight: jac_s * len,
    })
}

/// All assignments of `n` pairs to cell pairs (cu ≤ cv) whose union graph
/// satisfies the constraint on `m` cells.
fn cell_assignments(m: usize, n: usize, constraint: CellConstraint) -> Vec<Vec<(usize, usize)>> {
    let mut choices = Vec::new();
    for a in 0..m {
        for b in a..m {
            choices.push((a, b));
        }
    }
    let mut out = Vec::new();
    let mut current = vec![(0usize, 0usize); n];
    fn rec(
        k: usize,
        n: usize,
        choices: &[(usize, usize)],
        current: &mut Vec<(usize, usize)>,
        m: usize,
        constraint: CellConstraint,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if k == n {
            if assignment_ok(current, m, constraint) {
                out.push(current.clone());
            }
            return;
        }
        for &c in choices {
            current[k] = c;
            rec(k + 1, n, choices, current, m, constraint, out);
        }
    }
    rec(0, n, &choices, &mut current, m, constraint, &mut out);
    out
}

fn assignment_ok(assign: &[(usize, usize)], m: usize, constraint: CellConstraint) -> bool {
    match constraint {
        CellConstraint::All => true,
        CellConstraint::NoIsolated => {
            let mut touched = vec![false; m];
            for &(a, b) in assign {
                if a != b {
                    touched[a] = true;
                    touched[b] = true;
                }
            }
            touched.into_iter().all(|x| x)
        }
        CellConstraint::ConnectedSpanning => {
            if m == 1 {
                // single cell: connected by convention, no edges possible
                return true;
            }
            let mut parent: Vec<usize> = (0..m).collect();
            fn find(parent: &mut Vec<usize>, x: usize) -> usize {
                if parent[x] != x {
                    let r = find(parent, parent[x]);
                    parent[x] = r;
                }
                parent[x]
            }
            let mut edges = 0;
            for &(a, b) in assign {
                if a != b {
                    edges += 1;
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra] = rb;
                    }
                }
            }
            if edges == 0 {
                return false;
            }
            let r0 = find(&mut parent, 0);
            (1..m).all(|x| find(&mut parent, x) == r0)
        }
    }
}

/// Accumulated result of one multi-cell diagram integral.
pub(crate) struct CellIntegral {
    /// Sum over orders of the integrals, as a matrix on (d²)^m (cells
    /// ascending, first cell slowest index). Eigenbasis, no free dressing.
    pub op_eig: CMat,
    /// Statistical error (Frobenius of the entrywise standard error).
    pub stat_err: f64,
    /// Quadrature sum of |weight|·Π_cells ‖leg product‖_F: an upper bound on
    /// the ‖·‖_# norm of the accumulated operator.
    pub sharp_ub: f64,
    /// Per-order reports for diagnostics.
    pub orders: Vec<OrderReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderReport {
    pub n: usize,
    pub method: String,
    pub norm: f64,
    pub stat_err: f64,
    pub points: u64,
}

/// Derive a per-task seed from the base seed (order, assignment, replicate).
fn subseed(base: u64, order: usize, assignment: usize, replicate: u32) -> u64 {
    let mut x = base
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((order as u64) << 40)
        .wrapping_add((assignment as u64) << 16)
        .wrapping_add(replicate as u64);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x
}

pub(crate) struct CellJob<'a> {
    pub frame: &'a EigenFrame,
    pub bc: &'a BathCorrelation,
    pub lambda: f64,
    /// Disjoint cells in ascending order, absolute times.
    pub cells: Vec<(f64, f64)>,
    pub constraint: CellConstraint,
    pub quad: QuadConfig,
}

impl<'a> CellJob<'a> {
    fn stretch(&self) -> Option<f64> {
        if self.bc.decays() {
            Some(self.quad.stretch_scale.unwrap_or_else(|| self.bc.decay_scale()))
        } else {
            self.quad.stretch_scale
        }
    }

    /// Evaluate the per-cell leg products for one sampled diagram.
    /// Returns (tensor matrices per cell, scalar geometric weight) or None
    /// for zero-weight samples.
    fn eval_sample(
        &self,
        pairs: &[SampledPair],
        assign: &[(usize, usize)],
        channels: &[(usize, usize)],
    ) -> Option<(Vec<CMat>, f64)> {
        let d = self.frame.d;
        let m = self.cells.len();
        let mut geo = 1.0;
        for p in pairs {
            geo *= p.weight;
        }
        if geo == 0.0 {
            return None;
        }
        // legs per cell, sorted ascending in time so the product applies
        // earliest first
        let mut legs: Vec<(f64, usize, usize, bool)> = Vec::with_capacity(2 * pairs.len());
        for (idx, p) in pairs.iter().enumerate() {
            legs.push((p.u, idx, assign[idx].0, false));
            legs.push((p.v, idx, assign[idx].1, true));
        }
        legs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cell_ops: Vec<CMat> = (0..m).map(|_| Array2::eye(d * d)).collect();
        let i_unit = C64::new(0.0, 1.0);
        for (t, pair_idx, cell, is_v) in legs {
            let offset = t - self.cells[cell].0;
            let p = &pairs[pair_idx];
            let (ch_u, ch_v) = channels[pair_idx];
            let (b_mat, coef_le, coef_ri) = if is_v {
                (self.frame.coupling_at(ch_v, offset), i_unit, -i_unit)
            } else {
                let f = self
                    .bc
                    .correlation(ch_v, ch_u, p.v - p.u)
                    .expect("sampled times are inside the evaluable horizon");
                let big_f = self.lambda * self.lambda * f;
                (
                    self.frame.coupling_at(ch_u, offset),
                    i_unit * big_f,
                    -i_unit * big_f.conj(),
                )
            };
            cell_ops[cell] = apply_leg(&cell_ops[cell], &b_mat, coef_le, coef_ri);
        }
        Some((cell_ops, geo))
    }

    /// Tensor the per-cell matrices (first cell slowest).
    fn tensorize(&self, cell_ops: &[CMat]) -> CMat {
        let mut acc = cell_ops[0].clone();
        for op in &cell_ops[1..] {
            acc = kron(&acc, op);
        }
        acc
    }

    /// Channel assignments: each pair picks (ch_u, ch_v) ∈ ℐ².
    fn channel_assignments(&self, n: usize) -> Vec<Vec<(usize, usize)>> {
        let nc = self.bc.n_channels;
        let mut singles = Vec::new();
        for a in 0..nc {
            for b in 0..nc {
                singles.push((a, b));
            }
        }
        let mut out: Vec<Vec<(usize, usize)>> = vec![vec![]];
        for _ in 0..n {
            let mut next = Vec::with_capacity(out.len() * singles.len());
            for base in &out {
                for &s in &singles {
                    let mut v = base.clone();
                    v.push(s);
                    next.push(v);
                }
            }
            out = next;
        }
        out
    }

    /// QMC evaluation of one (order, cell-assignment) block.
    fn qmc_block(
        &self,
        n: usize,
        assign_idx: usize,
        assign: &[(usize, usize)],
        acc: &mut CMat,
        sharp: &mut f64,
        replicate_means: &mut [CMat],
    ) -> u64 {
        let reps = self.quad.qmc_replicates.max(1);
        let points_per_rep = ((1u64 << self.quad.qmc_log2) / reps as u64).max(64);
        let stretch = self.stretch();
        let channels = self.channel_assignments(n);
        let inv_fact: f64 = (1..=n).map(|k| k as f64).product::<f64>().recip();
        let mut xi = vec![0.0; 2 * n];
        let mut sampled = vec![SampledPair { u: 0.0, v: 0.0, weight: 0.0 }; n];
        for rep in 0..reps {
            let mut gen = ScrambledHalton::new(2 * n, subseed(self.quad.seed, n, assign_idx, rep), rep);
            let mut rep_acc: CMat = Array2::zeros(acc.raw_dim());
            let mut rep_sharp = 0.0;
            for _ in 0..points_per_rep {
                gen.next_point(&mut xi);
                let mut ok = true;
                for k in 0..n {
                    let (cu, cv) = assign[k];
                    match sample_pair(xi[2 * k], xi[2 * k + 1], self.cells[cu], self.cells[cv], stretch) {
                        Some(sp) => sampled[k] = sp,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                for ch in &channels {
                    if let Some((cell_ops, geo)) = self.eval_sample(&sampled, assign, ch) {
                        let w = geo * inv_fact;
                        let tensor = self.tensorize(&cell_ops);
                        rep_acc += &tensor.mapv(|z| z * w);
                        let prod_norm: f64 = cell_ops.iter().map(frobenius).product();
                        rep_sharp += w.abs() * prod_norm;
                    }
                }
            }
            let scale = 1.0 / points_per_rep as f64;
            replicate_means[rep as usize] += &rep_acc.mapv(|z| z * scale);
            *acc += &rep_acc.mapv(|z| z * (scale / reps as f64));
            *sharp += rep_sharp * scale / reps as f64;
        }
        points_per_rep * reps as u64
    }

    /// Deterministic Gauss–Legendre evaluation for single-cell orders 1 and 2.
    /// Returns None if the point budget is exceeded.
    fn gl_block(&self, n: usize, acc: &mut CMat, sharp: &mut f64) -> Option<u64> {
        if self.cells.len() != 1 || n > 2 {
            return None;
        }
        let (lo, hi) = self.cells[0];
        let span = hi - lo;
        if span <= 0.0 {
            return Some(0);
        }
        // resolve the fastest Bohr oscillation in u; stretched s needs fewer
        let periods = (span * (2.0 * self.frame.max_bohr) / (2.0 * std::f64::consts::PI)).ceil();
        let p_u = ((periods as usize) * 4 + 12).min(4096);
        let p_s = if self.bc.decays() {
            32
        } else {
            // undamped correlations oscillate in s as well
            p_u
        };
        let total = (p_u * p_s).pow(n as u32);
        if total > self.quad.gl_budget {
            return None;
        }
        let (nodes_u, weights_u) = gauss_legendre_unit(p_u);
        let (nodes_s, weights_s) = gauss_legendre_unit(p_s);
        let stretch = self.stretch();
        let channels = self.channel_assignments(n);
        let inv_fact: f64 = (1..=n).map(|k| k as f64).product::<f64>().recip();
        let assign = vec![(0usize, 0usize); n];
        let mut count = 0u64;
        let mut idx = vec![0usize; 2 * n];
        let mut sampled = vec![SampledPair { u: 0.0, v: 0.0, weight: 0.0 }; n];
        'outer: loop {
            // decode idx -> sample
            let mut wq = 1.0;
            for k in 0..n {
                let iu = idx[2 * k];
                let is = idx[2 * k + 1];
                let sp = sample_pair(nodes_s[is], nodes_u[iu], (lo, hi), (lo, hi), stretch)?;
                wq *= weights_u[iu] * weights_s[is];
                sampled[k] = sp;
            }
            for ch in &channels {
                if let Some((cell_ops, geo)) = self.eval_sample(&sampled, &assign, ch) {
                    let w = geo * wq * inv_fact;
                    let tensor = self.tensorize(&cell_ops);
                    *acc += &tensor.mapv(|z| z * w);
                    let prod_norm: f64 = cell_ops.iter().map(frobenius).product();
                    *sharp += w.abs() * prod_norm;
                }
            }
            count += 1;
            // odometer
            for pos in (0..2 * n).rev() {
                let cap = if pos % 2 == 0 { p_u } else { p_s };
                idx[pos] += 1;
                if idx[pos] < cap {
                    continue 'outer;
                }
                idx[pos] = 0;
            }
            break;
        }
        Some(count)
    }

    /// Run orders n_lo..=n_max and accumulate everything.
    pub fn run(&self, n_lo: usize) -> Result<CellIntegral> {
        let d = self.frame.d;
        let m = self.cells.len();
        let dim = (d * d).pow(m as u32);
        let mut op: CMat = Array2::zeros((dim, dim));
        let mut sharp = 0.0;
        let mut stat_sq = 0.0;
        let mut orders = Vec::new();
        let coupling_zero = self.lambda == 0.0
            || self
                .frame
                .couplings
                .iter()
                .all(|c| frobenius(c) < 1e-300);
        for n in n_lo..=self.quad.n_max {
            if n == 0 {
                // empty diagram: identity tensor (only valid without constraints)
                if self.constraint == CellConstraint::All || m == 1 {
                    op += &Array2::eye(dim);
                    sharp += 1.0;
                }
                orders.push(OrderReport {
                    n,
                    method: "exact".into(),
                    norm: 1.0,
                    stat_err: 0.0,
                    points: 1,
                });
                continue;
            }
            if coupling_zero {
                break;
            }
            let assignments = cell_assignments(m, n, self.constraint);
            if assignments.is_empty() {
                continue;
            }
            let mut order_acc: CMat = Array2::zeros((dim, dim));
            let mut order_sharp = 0.0;
            let mut order_stat = 0.0;
            let mut order_points = 0u64;
            let mut method = "gl";
            if m == 1 && n <= 2 {
                match self.gl_block(n, &mut order_acc, &mut order_sharp) {
                    Some(points) => {
                        order_points = points;
                    }
                    None => {
                        method = "qmc";
                    }
                }
            } else {
                method = "qmc";
            }
            if method == "qmc" {
                let reps = self.quad.qmc_replicates.max(1) as usize;
                let mut replicate_means: Vec<CMat> = (0..reps).map(|_| Array2::zeros((dim, dim))).collect();
                for (ai, assign) in assignments.iter().enumerate() {
                    order_points +=
                        self.qmc_block(n, ai, assign, &mut order_acc, &mut order_sharp, &mut replicate_means);
                }
                // entrywise standard error over replicates
                if reps > 1 {
                    let mean = order_acc.clone();
                    let mut var = 0.0;
                    for rm in &replicate_means {
                        var += frobenius(&(rm - &mean)).powi(2);
                    }
                    order_stat = (var / (reps as f64 * (reps - 1) as f64)).sqrt();
                }
            }
            stat_sq += order_stat * order_stat;
            sharp += order_sharp;
            orders.push(OrderReport {
                n,
                method: method.into(),
                norm: crate::linalg::frobenius(&order_acc),
                stat_err: order_stat,
                points: order_points,
            });
            op += &order_acc;
        }
        Ok(CellIntegral {
            op_eig: op,
            stat_err: stat_sq.sqrt(),
            sharp_ub: sharp,
            orders,
        })
    }
}

/// ∫_0^t h(s) ds, windowed adaptively.
pub fn h_partial_integral(bc: &BathCorrelation, norms: &[f64], t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let h = |s: f64| {
        let mut acc = 0.0;
        for i in 0..bc.n_channels {
            for j in 0..bc.n_channels {
                acc += norms[i] * norms[j] * bc.correlation(i, j, s).expect("in range").norm();
            }
        }
        C64::new(acc, 0.0)
    };
    let mut acc = 0.0;
    let mut lo = 0.0;
    let step = (bc.decay_scale() * 8.0).max(1.0).min(t);
    while lo < t {
        let hi = (lo + step).min(t);
        let (v, _) = crate::quad::adaptive_gk(&h, lo, hi, 1e-9)?;
        acc += v.re;
        lo = hi;
    }
    Ok(acc)
}

/// The explicit absolute-convergence certificate
/// exp(4 λ² t ∫_0^t h(s) ds) for the Dyson series on [0, t].
pub fn dyson_norm_bound(model: &SystemModel, bc: &BathCorrelation, t: f64) -> Result<f64> {
    let a = dyson_exponent(model, bc, t)?;
    Ok(a.exp())
}

/// The exponent A(t) = 4 λ² t ∫_0^t h, so the order-n term is ≤ Aⁿ/n!.
pub fn dyson_exponent(model: &SystemModel, bc: &BathCorrelation, t: f64) -> Result<f64> {
    let norms = model.coupling_norms();
    let h_int = h_partial_integral(bc, &norms, t)?;
    Ok(4.0 * model.lambda * model.lambda * t * h_int)
}

/// Tail Σ_{n > n_max} Aⁿ/n! of the convergence certificate.
pub fn series_tail(a: f64, n_max: usize) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    // head by direct summation, tail = e^A - head (safe for moderate A);
    // for large A fall back to term summation until decay
    if a < 60.0 {
        let mut head = 0.0;
        let mut term = 1.0;
        for k in 0..=n_max {
            if k > 0 {
                term *= a / k as f64;
            }
            head += term;
        }
        (a.exp() - head).max(0.0)
    } else {
        let mut term = 1.0f64;
        for k in 1..=n_max + 1 {
            term *= a / k as f64;
        }
        let mut acc = 0.0;
        let mut t = term;
        let mut k = n_max + 1;
        loop {
            acc += t;
            k += 1;
            t *= a / k as f64;
            if (t < 1e-16 * acc && k > (a as usize)) || !acc.is_finite() {
                break;
            }
        }
        acc
    }
}

/// Truncated Dyson evaluation of the reduced propagator over [0, t].
#[derive(Debug, Clone)]
pub struct ZReduced {
    pub z: Superoperator,
    /// Analytic series tail plus the measured QMC error.
    pub bound_tail: f64,
    /// The measured QMC error alone.
    pub stat_err: f64,
    pub orders: Vec<OrderReport>,
}

/// Z(t) = W(t) Σ_{n ≤ n_max} ∫ K·G over the simplex, with the analytic
/// remainder of the order sum reported in `bound_tail`.
pub fn z_reduced(
    model: &SystemModel,
    bc: &BathCorrelation,
    t_final: f64,
    quad: &QuadConfig,
) -> Result<ZReduced> {
    if t_final < 0.0 {
        return Err(Error::Invalid("t_final must be ≥ 0".into()));
    }
    if bc.n_channels != model.n_channels() {
        return Err(Error::DimensionMismatch {
            expected: model.n_channels(),
            got: bc.n_channels,
        });
    }
    if t_final > bc.max_time() {
        return Err(Error::Quadrature(format!(
            "bath correlation not evaluable past t = {:.3e} (asked {t_final})",
            bc.max_time()
        )));
    }
    let frame = EigenFrame::new(model)?;
    let job = CellJob {
        frame: &frame,
        bc,
        lambda: model.lambda,
        cells: vec![(0.0, t_final)],
        constraint: CellConstraint::All,
        quad: quad.clone(),
    };
    let integral = job.run(0)?;
    let dressed = frame.free_propagate(t_final, &integral.op_eig);
    let mat = frame.to_standard(&dressed);
    let a = dyson_exponent(model, bc, t_final)?;
    let bound_tail = series_tail(a, quad.n_max) + integral.stat_err;
    Ok(ZReduced {
        z: Superoperator::from_mat(model.dim, mat)?,
        bound_tail,
        stat_err: integral.stat_err,
        orders: integral.orders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathConfig, LorentzMode};
    use crate::linalg::{identity, spectral_norm, trace, vec_mat};
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

    fn exp_bath() -> BathCorrelation {
        BathCorrelation::new(BathConfig::Lorentzian {
            modes: vec![LorentzMode { center: 0.4, gamma: 1.0, weight: 0.9 }],
        })
        .unwrap()
    }

    #[test]
    fn diagram_weight_basics() {
        let bc = exp_bath();
        // n = 0: empty product
        let dg = Diagram::new(vec![]).unwrap();
        assert_eq!(diagram_weight(&dg, &bc, 0.3).unwrap(), c(1.0, 0.0));
        // single pair, k_u = Le: λ² f(t); k_u = Ri: λ² conj f(t)
        let lam = 0.3;
        let t = 0.8;
        let f = bc.correlation(0, 0, t).unwrap();
        let mk = |k_u| Diagram::new(vec![DiagramPair { u: 0.0, v: t, k_u, k_v: KLabel::Le, ch_u: 0, ch_v: 0 }]).unwrap();
        assert!((diagram_weight(&mk(KLabel::Le), &bc, lam).unwrap() - lam * lam * f).norm() < 1e-15);
        assert!((diagram_weight(&mk(KLabel::Ri), &bc, lam).unwrap() - lam * lam * f.conj()).norm() < 1e-15);
        // two pairs multiply
        let dg2 = Diagram::new(vec![
            DiagramPair { u: 0.0, v: 0.5, k_u: KLabel::Le, k_v: KLabel::Ri, ch_u: 0, ch_v: 0 },
            DiagramPair { u: 0.2, v: 1.1, k_u: KLabel::Ri, k_v: KLabel::Le, ch_u: 0, ch_v: 0 },
        ])
        .unwrap();
        let w1 = lam * lam * bc.correlation(0, 0, 0.5).unwrap();
        let w2 = lam * lam * bc.correlation(0, 0, 0.9).unwrap().conj();
        assert!((diagram_weight(&dg2, &bc, lam).unwrap() - w1 * w2).norm() < 1e-15);
    }

    #[test]
    fn diagram_operator_h_zero_left_pair() {
        // H_S = 0, D = σ_x, both legs Le: (iσ_x)(iσ_x)·S = -S
        let h0: CMat = Array2::zeros((2, 2));
        let model = SystemModel::new(h0, vec![sigma_x()], 0.1).unwrap();
        let dg = Diagram::new(vec![DiagramPair {
            u: 0.3, v: 0.9, k_u: KLabel::Le, k_v: KLabel::Le, ch_u: 0, ch_v: 0,
        }])
        .unwrap();
        let op = diagram_operator(&dg, &model).unwrap();
        let expect = identity(4).mapv(|z| -z);
        assert!(frobenius(&(&op.mat - &expect)) < 1e-13);
        // n = 0: identity
        let empty = Diagram::new(vec![]).unwrap();
        assert!(frobenius(&(&diagram_operator(&empty, &model).unwrap().mat - &identity(4))) < 1e-15);
    }

    #[test]
    fn diagram_operator_matches_factorwise_oracle_d3() {
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(17);
        let h = crate::linalg::random_hermitian(3, &mut rng);
        let d1 = crate::linalg::random_hermitian(3, &mut rng);
        let d2 = crate::linalg::random_hermitian(3, &mut rng);
        let model = SystemModel::new(h.clone(), vec![d1, d2], 0.2).unwrap();
        let dg = Diagram::new(vec![
            DiagramPair { u: 0.1, v: 0.7, k_u: KLabel::Ri, k_v: KLabel::Le, ch_u: 1, ch_v: 0 },
            DiagramPair { u: 0.4, v: 0.5, k_u: KLabel::Le, k_v: KLabel::Ri, ch_u: 0, ch_v: 1 },
        ])
        .unwrap();
        let got = diagram_operator(&dg, &model).unwrap();
        // independent factor-by-factor evaluation
        let factor = |t: f64, k: KLabel, ch: usize| -> Superoperator {
            let u = crate::linalg::expm_herm(&h, c(0.0, t)).unwrap();
            let dt = u.dot(&model.couplings[ch]).dot(&dagger(&u)).mapv(|z| c(0.0, 1.0) * z);
            match k {
                KLabel::Le => crate::model::left_mult(&dt).unwrap(),
                KLabel::Ri => crate::model::right_mult(&dt).unwrap(),
            }
        };
        // time order: 0.1 (u1, Ri ch1), 0.4 (u2, Le ch0), 0.5 (v2, Ri ch1), 0.7 (v1, Le ch0)
        let expect = factor(0.7, KLabel::Le, 0)
            .compose(&factor(0.5, KLabel::Ri, 1))
            .compose(&factor(0.4, KLabel::Le, 0))
            .compose(&factor(0.1, KLabel::Ri, 1));
        assert!(frobenius(&(&got.mat - &expect.mat)) < 1e-12);
    }

    #[test]
    fn diagram_validation() {
        assert!(Diagram::new(vec![DiagramPair { u: 0.5, v: 0.5, k_u: KLabel::Le, k_v: KLabel::Le, ch_u: 0, ch_v: 0 }]).is_err());
        assert!(Diagram::new(vec![
            DiagramPair { u: 0.5, v: 0.9, k_u: KLabel::Le, k_v: KLabel::Le, ch_u: 0, ch_v: 0 },
            DiagramPair { u: 0.2, v: 0.8, k_u: KLabel::Le, k_v: KLabel::Le, ch_u: 0, ch_v: 0 },
        ])
        .is_err());
    }

    #[test]
    fn sampler_reproduces_simplex_volume() {
        // ∫ over u unordered, v > u of 1, divided by n!, must equal
        // t^{2n} (2n-1)!! / (2n)! for f ≡ 1 on [0, t]
        let t = 1.7;
        for n in 1..=3usize {
            let mut gen = ScrambledHalton::new(2 * n, 99, 0);
            let pts = 1 << 15;
            let mut xi = vec![0.0; 2 * n];
            let mut acc = 0.0;
            for _ in 0..pts {
                gen.next_point(&mut xi);
                let mut w = 1.0;
                for k in 0..n {
                    let sp = sample_pair(xi[2 * k], xi[2 * k + 1], (0.0, t), (0.0, t), None).unwrap();
                    w *= sp.weight;
                }
                acc += w;
            }
            let inv_fact: f64 = (1..=n).map(|k| k as f64).product::<f64>().recip();
            let est = acc / pts as f64 * inv_fact;
            let double_fact: f64 = (1..=n).map(|k| (2 * k - 1) as f64).product();
            let fact_2n: f64 = (1..=2 * n).map(|k| k as f64).product();
            let expect = t.powi(2 * n as i32) * double_fact / fact_2n;
            assert!(
                (est - expect).abs() < 0.01 * expect,
                "n={n}: est {est} vs {expect}"
            );
        }
    }

    #[test]
    fn z_reduced_lambda_zero_is_free_propagator() {
        let model = two_level(0.0);
        let bc = exp_bath();
        let z = z_reduced(&model, &bc, 2.3, &QuadConfig::default()).unwrap();
        assert_eq!(z.bound_tail, 0.0);
        let w = crate::model::ad_hs_propagator(&model, 2.3).unwrap();
        assert!(frobenius(&(&z.z.mat - &w.mat)) < 1e-12);
    }

    #[test]
    fn z_reduced_trace_defect_within_certificate() {
        let model = two_level(0.15);
        let bc = exp_bath();
        let z = z_reduced(&model, &bc, 2.0, &QuadConfig::default()).unwrap();
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(4);
        let r = crate::linalg::random_hermitian(2, &mut rng);
        let rho = {
            let sq = r.dot(&dagger(&r));
            let tr = trace(&sq);
            sq.mapv(|z| z / tr)
        };
        let out = z.z.apply(&rho);
        let defect = (trace(&out).re - 1.0).abs();
        assert!(
            defect <= z.bound_tail.max(1e-10) * 1.2,
            "trace defect {defect:.3e} vs certificate {:.3e}",
            z.bound_tail
        );
    }

    #[test]
    fn dyson_norm_bound_properties() {
        let bc = exp_bath();
        // λ = 0 and t = 0 give bound 1
        assert_abs_diff_eq!(dyson_norm_bound(&two_level(0.0), &bc, 3.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(dyson_norm_bound(&two_level(0.4), &bc, 0.0).unwrap(), 1.0, epsilon = 1e-14);
        // monotone in t and |λ|
        let mut prev = 1.0;
        for &t in &[0.5, 1.0, 2.0, 4.0] {
            let b = dyson_norm_bound(&two_level(0.2), &bc, t).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        let mut prev = 1.0;
        for &lam in &[0.05, 0.1, 0.2, 0.4] {
            let b = dyson_norm_bound(&two_level(lam), &bc, 2.0).unwrap();
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn series_tail_sums() {
        // small a: tail of e^a after n_max terms
        let a: f64 = 0.3;
        let direct: f64 = (4..40).map(|n| a.powi(n) / (1..=n).map(|k| k as f64).product::<f64>()).sum();
        assert_abs_diff_eq!(series_tail(a, 3), direct, epsilon = 1e-12);
        // large a stays finite and positive
        assert!(series_tail(80.0, 3).is_finite());
        assert!(series_tail(80.0, 3) > 0.0);
    }

    #[test]
    fn z_reduced_first_order_matches_direct_quadrature() {
        // order-1 term against an independent 2-d adaptive quadrature of
        // the explicit two-leg integrand
        let model = two_level(0.3);
        let bc = exp_bath();
        let t = 1.2;
        let quad = QuadConfig { n_max: 1, ..Default::default() };
        let z = z_reduced(&model, &bc, t, &quad).unwrap();
        let w_free = crate::model::ad_hs_propagator(&model, t).unwrap();
        let first_order = z.z.sub(&w_free); // W(t)·(order-1 integral)
        // oracle: W(t) ∫_0^t du ∫_u^t dv Σ_{k_u,k_v} M_{k_v}(iD(v)) M_{k_u}(iD(u)) G
        let lam = model.lambda;
        let dd = 4;
        let mut oracle: CMat = Array2::zeros((dd, dd));
        let factor = |tt: f64, k: KLabel| -> Superoperator {
            let u = crate::linalg::expm_herm(&model.h_s, c(0.0, tt)).unwrap();
            let dt = u.dot(&model.couplings[0]).dot(&dagger(&u)).mapv(|z| c(0.0, 1.0) * z);
            match k {
                KLabel::Le => crate::model::left_mult(&dt).unwrap(),
                KLabel::Ri => crate::model::right_mult(&dt).unwrap(),
            }
        };
        for r in 0..dd {
            for cc in 0..dd {
                let g = |u: f64| -> C64 {
                    let inner = |v: f64| -> C64 {
                        let f = bc.correlation(0, 0, v - u).unwrap();
                        let mut acc = c(0.0, 0.0);
                        for (ku, wgt) in [(KLabel::Le, lam * lam * f), (KLabel::Ri, lam * lam * f.conj())] {
                            for kv in [KLabel::Le, KLabel::Ri] {
                                let m = factor(v, kv).compose(&factor(u, ku));
                                acc += m.mat[[r, cc]] * wgt;
                            }
                        }
                        acc
                    };
                    crate::quad::adaptive_gk(&inner, u, t, 1e-10).unwrap().0
                };
                oracle[[r, cc]] = crate::quad::adaptive_gk(&g, 0.0, t, 1e-9).unwrap().0;
            }
        }
        let w_oracle = w_free.mat.dot(&oracle);
        let dev = frobenius(&(&first_order.mat - &w_oracle));
        assert!(dev < 5e-7, "order-1 quadrature deviation {dev:.3e}");
    }

    #[test]
    fn z_reduced_matches_finite_bath_oracle() {
        // weakly coupled two-mode bath: truncated Dyson vs exact reduced
        // dynamics within the analytic certificate
        let modes = vec![
            crate::bath::DiscreteMode { omega: 0.9, eta: 0.4, phi: vec![[0.08, 0.0]] },
            crate::bath::DiscreteMode { omega: 1.15, eta: 0.3, phi: vec![[0.06, 0.02]] },
        ];
        let bc = BathCorrelation::new(BathConfig::Fewmode { modes: modes.clone() }).unwrap();
        let model = two_level(0.3);
        let t = 2.5;
        let quad = QuadConfig { n_max: 3, qmc_log2: 13, ..Default::default() };
        let z = z_reduced(&model, &bc, t, &quad).unwrap();
        let bath = crate::oracle::FiniteBath::new(modes, 8).unwrap();
        let rho0 = ndarray::array![[c(0.7, 0.0), c(0.15, 0.1)], [c(0.15, -0.1), c(0.3, 0.0)]];
        let exact = crate::oracle::exact_reduced_dynamics(&model, &bath, &rho0, &[t]).unwrap();
        let dev = crate::linalg::trace_norm(&(&z.z.apply(&rho0) - &exact.reduced_states[0]));
        let tol = (z.bound_tail + 1e-4).max(5e-4);
        assert!(
            dev <= tol,
            "finite-bath oracle deviation {dev:.3e} vs certificate {:.3e}",
            z.bound_tail
        );
    }

    #[test]
    fn integrand_norm_dominated_by_h_legs() {
        // per-sample bound: |weight|·‖op‖ ≤ Π λ² h(v-u) with unit couplings
        let model = two_level(0.25);
        let bc = exp_bath();
        let lam = model.lambda;
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(8);
        for _ in 0..50 {
            use rand::Rng;
            let u1: f64 = rng.gen_range(0.0..1.0);
            let v1: f64 = u1 + rng.gen_range(0.01..1.5);
            let u2: f64 = u1 + rng.gen_range(1e-4..0.5);
            let v2: f64 = u2 + rng.gen_range(0.01..1.5);
            let ks = [KLabel::Le, KLabel::Ri];
            use rand::prelude::SliceRandom;
            let dg = Diagram::new(vec![
                DiagramPair { u: u1, v: v1, k_u: *ks.choose(&mut rng).unwrap(), k_v: *ks.choose(&mut rng).unwrap(), ch_u: 0, ch_v: 0 },
                DiagramPair { u: u2, v: v2, k_u: *ks.choose(&mut rng).unwrap(), k_v: *ks.choose(&mut rng).unwrap(), ch_u: 0, ch_v: 0 },
            ])
            .unwrap();
            let w = diagram_weight(&dg, &bc, lam).unwrap();
            let op = diagram_operator(&dg, &model).unwrap();
            let bound = lam * lam * bc.correlation(0, 0, v1 - u1).unwrap().norm()
                * lam
                * lam
                * bc.correlation(0, 0, v2 - u2).unwrap().norm();
            assert!(
                w.norm() * spectral_norm(&op.mat) <= bound * 1.0 + 1e-12,
                "domination failed"
            );
        }
    }

    #[test]
    fn qmc_and_gl_agree_on_order_two() {
        let model = two_level(0.3);
        let bc = exp_bath();
        let t = 1.8;
        let frame = EigenFrame::new(&model).unwrap();
        let mk_job = |quad: QuadConfig| CellJob {
            frame: &frame,
            bc: &bc,
            lambda: model.lambda,
            cells: vec![(0.0, t)],
            constraint: CellConstraint::All,
            quad,
        };
        let gl = mk_job(QuadConfig { n_max: 2, ..Default::default() }).run(2).unwrap();
        assert_eq!(gl.orders.last().unwrap().method, "gl");
        let qmc = mk_job(QuadConfig { n_max: 2, gl_budget: 0, qmc_log2: 16, ..Default::default() })
            .run(2)
            .unwrap();
        assert_eq!(qmc.orders.last().unwrap().method, "qmc");
        let dev = frobenius(&(&gl.op_eig - &qmc.op_eig));
        assert!(
            dev < 3.0 * qmc.stat_err.max(1e-5),
            "GL vs QMC deviation {dev:.3e}, stat {:.3e}",
            qmc.stat_err
        );
        let _ = vec_mat(&identity(2));
    }
}
