//! Brute-force ground truth: exact simulation of a finite bosonic bath on a
//! truncated Fock space, Wick/Gaussianity checks, and small combinatorial
//! enumerators (pairings, set partitions, labeled spanning trees).

use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::bath::DiscreteMode;
use crate::error::{Error, Result};
use crate::linalg::{dagger, frobenius, herm_eig, identity, kron, trace, CMat};
use crate::model::SystemModel;

/// A finite collection of bath modes with occupations and form factors.
#[derive(Debug, Clone)]
pub struct FiniteBath {
    pub modes: Vec<DiscreteMode>,
    /// Max occupation per mode; local mode dimension is fock_cut + 1.
    pub fock_cut: usize,
}

/// Default cap on the total Hilbert-space dimension of the simulator.
pub const DIM_CAP: usize = 4096;

impl FiniteBath {
    pub fn new(modes: Vec<DiscreteMode>, fock_cut: usize) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Invalid("finite bath needs at least one mode".into()));
        }
        if modes.iter().any(|m| m.eta < 0.0) {
            return Err(Error::Invalid("mode occupation eta must be ≥ 0".into()));
        }
        let nc = modes[0].phi.len();
        if nc == 0 || modes.iter().any(|m| m.phi.len() != nc) {
            return Err(Error::Invalid(
                "all modes must carry the same channel count".into(),
            ));
        }
        Ok(FiniteBath { modes, fock_cut })
    }

    pub fn n_channels(&self) -> usize {
        self.modes[0].phi.len()
    }

    pub fn bath_dim(&self) -> usize {
        (self.fock_cut + 1).pow(self.modes.len() as u32)
    }

    fn with_fock_cut(&self, fock_cut: usize) -> Self {
        FiniteBath {
            modes: self.modes.clone(),
            fock_cut,
        }
    }
}

/// Annihilation operator on one truncated mode.
fn annihilator(n_max: usize) -> CMat {
    let dim = n_max + 1;
    let mut a = Array2::zeros((dim, dim));
    for n in 1..dim {
        a[[n - 1, n]] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

/// Geometric (thermal-like) single-mode state with mean occupation η,
/// renormalized on the truncated space.
fn mode_state(n_max: usize, eta: f64) -> CMat {
    let dim = n_max + 1;
    let mut rho = Array2::zeros((dim, dim));
    if eta == 0.0 {
        rho[[0, 0]] = C64::new(1.0, 0.0);
        return rho;
    }
    let x = eta / (1.0 + eta);
    let mut norm = 0.0;
    for n in 0..dim {
        let w = x.powi(n as i32);
        rho[[n, n]] = C64::new(w, 0.0);
        norm += w;
    }
    rho.mapv(|z| z / norm)
}

/// Operators on the full space H_S ⊗ ⊗_q Fock(fock_cut).
pub struct BathOperators {
    /// a_q embedded in the bath factor (no system factor).
    pub lowering: Vec<CMat>,
    pub h_bath: CMat,
    pub rho_ref: CMat,
    pub bath_dim: usize,
}

pub fn bath_operators(bath: &FiniteBath) -> BathOperators {
    let local = bath.fock_cut + 1;
    let nm = bath.modes.len();
    let bdim = local.pow(nm as u32);
    let mut lowering = Vec::with_capacity(nm);
    for q in 0..nm {
        let mut op: CMat = identity(1);
        for k in 0..nm {
            let factor = if k == q {
                annihilator(bath.fock_cut)
            } else {
                identity(local)
            };
            op = kron(&op, &factor);
        }
        lowering.push(op);
    }
    let mut h_bath: CMat = Array2::zeros((bdim, bdim));
    for (q, m) in bath.modes.iter().enumerate() {
        let num = dagger(&lowering[q]).dot(&lowering[q]);
        h_bath += &num.mapv(|z| z * m.omega);
    }
    let mut rho_ref: CMat = identity(1);
    for m in &bath.modes {
        rho_ref = kron(&rho_ref, &mode_state(bath.fock_cut, m.eta));
    }
    BathOperators {
        lowering,
        h_bath,
        rho_ref,
        bath_dim: bdim,
    }
}

/// Smeared field operator Φ(φ) = Σ_q (φ(q) a†_q + φ̄(q) a_q) on the bath factor.
pub fn field_operator(ops: &BathOperators, phi: &[C64]) -> CMat {
    let mut f: CMat = Array2::zeros((ops.bath_dim, ops.bath_dim));
    for (q, a) in ops.lowering.iter().enumerate() {
        f += &dagger(a).mapv(|z| z * phi[q]);
        f += &a.mapv(|z| z * phi[q].conj());
    }
    f
}

/// Partial trace over the bath factor of a (d·b)×(d·b) matrix.
pub fn partial_trace_bath(m: &CMat, d: usize, b: usize) -> CMat {
    let mut out = Array2::zeros((d, d));
    for r in 0..d {
        for c in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..b {
                acc += m[[r * b + k, c * b + k]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Reduced trajectory from exact diagonalization of the coupled Hamiltonian.
#[derive(Debug, Clone)]
pub struct ExactTrajectory {
    pub times: Vec<f64>,
    pub reduced_states: Vec<CMat>,
    pub fock_cut_used: usize,
    /// True when doubling the Fock cut moved the trajectory by < 1e-6.
    pub convergence_flag: bool,
}

fn evolve_reduced(
    model: &SystemModel,
    bath: &FiniteBath,
    rho0: &CMat,
    times: &[f64],
) -> Result<Vec<CMat>> {
    let d = model.dim;
    let total = d * bath.bath_dim();
    if total > DIM_CAP {
        return Err(Error::CapExceeded {
            dim: total,
            cap: DIM_CAP,
            hint: format!(
                "reduce fock_cut (currently {}) or the number of modes (currently {})",
                bath.fock_cut,
                bath.modes.len()
            ),
        });
    }
    let ops = bath_operators(bath);
    let b = ops.bath_dim;
    // H = H_S ⊗ 1 + 1 ⊗ H_R + λ Σ_i D_i ⊗ Φ(φ_i)
    let mut h = kron(&model.h_s, &identity(b));
    h += &kron(&identity(d), &ops.h_bath);
    for (i, di) in model.couplings.iter().enumerate() {
        let phi: Vec<C64> = bath.modes.iter().map(|m| m.phi_c(i)).collect();
        let f = field_operator(&ops, &phi);
        h += &kron(di, &f).mapv(|z| z * model.lambda);
    }
    let (vals, vecs) = herm_eig(&h)?;
    let vd = dagger(&vecs);
    let rho_init = kron(rho0, &ops.rho_ref);
    let rho_eig = vd.dot(&rho_init).dot(&vecs);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        // e^{-itH} ρ e^{itH} in the eigenbasis is a phase twist
        let mut twisted = rho_eig.clone();
        for r in 0..total {
            for c in 0..total {
                twisted[[r, c]] *= C64::new(0.0, -t * (vals[r] - vals[c])).exp();
            }
        }
        let rho_t = vecs.dot(&twisted).dot(&vd);
        out.push(partial_trace_bath(&rho_t, d, b));
    }
    Ok(out)
}

/// Exact reduced dynamics with an automatic Fock-cut doubling test.
pub fn exact_reduced_dynamics(
    model: &SystemModel,
    bath: &FiniteBath,
    rho0: &CMat,
    times: &[f64],
) -> Result<ExactTrajectory> {
    if rho0.nrows() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            got: rho0.nrows(),
        });
    }
    let mut cut = bath.fock_cut;
    let mut states = evolve_reduced(model, &bath.with_fock_cut(cut), rho0, times)?;
    let mut converged = false;
    loop {
        let next_cut = cut * 2;
        let d = model.dim;
        let next_total = d * (next_cut + 1).pow(bath.modes.len() as u32);
        if next_total > DIM_CAP {
            break;
        }
        let refined = evolve_reduced(model, &bath.with_fock_cut(next_cut), rho0, times)?;
        let change = states
            .iter()
            .zip(&refined)
            .map(|(a, b)| frobenius(&(a - b)))
            .fold(0.0, f64::max);
        states = refined;
        cut = next_cut;
        if change < 1e-6 {
            converged = true;
            break;
        }
    }
    Ok(ExactTrajectory {
        times: times.to_vec(),
        reduced_states: states,
        fock_cut_used: cut,
        convergence_flag: converged,
    })
}

/// Deviation of direct 2k-point field traces from the Wick pairing sum.
#[derive(Debug, Clone)]
pub struct GaussianReport {
    pub order: usize,
    pub direct: C64,
    pub wick_sum: C64,
    pub deviation: f64,
}

/// Compare Tr[ρ_ref Φ(φ_1)…Φ(φ_n)] against the pairing sum of two-point
/// functions on the truncated space. Exact Gaussianity holds only in the
/// untruncated limit, so the deviation must shrink as fock_cut grows.
pub fn gaussian_moments_check(
    bath: &FiniteBath,
    test_functions: &[Vec<C64>],
    order: usize,
) -> Result<GaussianReport> {
    if order != test_functions.len() {
        return Err(Error::Invalid("order must match the function count".into()));
    }
    if order > 6 {
        return Err(Error::Invalid("gaussian check capped at order 6".into()));
    }
    let ops = bath_operators(bath);
    let fields: Vec<CMat> = test_functions
        .iter()
        .map(|phi| field_operator(&ops, phi))
        .collect();
    let mut prod = ops.rho_ref.clone();
    for f in fields.iter().rev() {
        prod = f.dot(&prod);
    }
    let direct = trace(&prod);
    let two_point = |i: usize, j: usize| -> C64 { trace(&fields[i].dot(&fields[j]).dot(&ops.rho_ref)) };
    let wick_sum = if order % 2 == 1 {
        C64::new(0.0, 0.0)
    } else {
        let pairings = enumerate_pairings(order / 2)?;
        let mut acc = C64::new(0.0, 0.0);
        for p in &pairings {
            let mut term = C64::new(1.0, 0.0);
            for &(i, j) in p {
                term *= two_point(i - 1, j - 1);
            }
            acc += term;
        }
        acc
    };
    Ok(GaussianReport {
        order,
        direct,
        wick_sum,
        deviation: (direct - wick_sum).norm(),
    })
}

/// All perfect matchings of {1..2n}, pairs as (i, j) with i < j, in
/// lexicographic order. Count is (2n-1)!!.
pub fn enumerate_pairings(n: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    if n > 8 {
        return Err(Error::Invalid("pairing enumeration capped at n = 8".into()));
    }
    let mut out = Vec::new();
    let mut items: Vec<usize> = (1..=2 * n).collect();
    let mut current = Vec::new();
    fn rec(items: &mut Vec<usize>, current: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if items.is_empty() {
            out.push(current.clone());
            return;
        }
        let first = items[0];
        for k in 1..items.len() {
            let second = items[k];
            let mut rest: Vec<usize> = items
                .iter()
                .cloned()
                .filter(|&x| x != first && x != second)
                .collect();
            current.push((first, second));
            rec(&mut rest, current, out);
            current.pop();
        }
    }
    rec(&mut items, &mut current, &mut out);
    Ok(out)
}

/// All partitions of `a_set` into nonempty blocks (blocks and partition in
/// canonical order). Count is the Bell number.
pub fn enumerate_partitions(a_set: &[usize]) -> Result<Vec<Vec<Vec<usize>>>> {
    if a_set.len() > 8 {
        return Err(Error::Invalid("partition enumeration capped at 8 elements".into()));
    }
    if a_set.is_empty() {
        return Ok(vec![vec![]]);
    }
    let mut out = Vec::new();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    fn rec(rest: &[usize], blocks: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if rest.is_empty() {
            out.push(blocks.clone());
            return;
        }
        let x = rest[0];
        for k in 0..blocks.len() {
            blocks[k].push(x);
            rec(&rest[1..], blocks, out);
            blocks[k].pop();
        }
        blocks.push(vec![x]);
        rec(&rest[1..], blocks, out);
        blocks.pop();
    }
    rec(a_set, &mut blocks, &mut out);
    Ok(out)
}

/// All labeled spanning trees on the complete graph over `a_set`, as edge
/// lists. Count is |A|^{|A|-2} (Cayley), via Prüfer sequences.
pub fn enumerate_spanning_trees(a_set: &[usize]) -> Result<Vec<Vec<(usize, usize)>>> {
    let n = a_set.len();
    if n > 7 {
        return Err(Error::Invalid("tree enumeration capped at 7 vertices".into()));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    if n == 1 {
        return Ok(vec![vec![]]);
    }
    if n == 2 {
        return Ok(vec![vec![(a_set[0], a_set[1])]]);
    }
    let mut out = Vec::new();
    let seq_len = n - 2;
    let total = n.pow(seq_len as u32);
    for code in 0..total {
        let mut seq = Vec::with_capacity(seq_len);
        let mut c = code;
        for _ in 0..seq_len {
            seq.push(c % n);
            c /= n;
        }
        out.push(prufer_to_tree(&seq, a_set));
    }
    Ok(out)
}

fn prufer_to_tree(seq: &[usize], labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    let mut degree_mut = degree;
    let mut used = vec![false; n];
    for &s in seq {
        let leaf = (0..n).find(|&v| degree_mut[v] == 1 && !used[v]).unwrap();
        edges.push((labels[leaf.min(s)], labels[leaf.max(s)]));
        used[leaf] = true;
        degree_mut[s] -= 1;
        if degree_mut[s] == 1 {
            // may become a leaf later
        }
        degree_mut[leaf] = 0;
    }
    let remaining: Vec<usize> = (0..n).filter(|&v| !used[v] && degree_mut[v] >= 1).collect();
    debug_assert_eq!(remaining.len(), 2);
    edges.push((
        labels[remaining[0].min(remaining[1])],
        labels[remaining[0].max(remaining[1])],
    ));
    edges
}

/// Two-point function of the truncated reference state, for cross-checks
/// against [`crate::bath::finite_volume_correlation`].
pub fn exact_two_point(bath: &FiniteBath, i: usize, j: usize, t: f64) -> C64 {
    let ops = bath_operators(bath);
    let phi_i: Vec<C64> = bath.modes.iter().map(|m| m.phi_c(i)).collect();
    let phi_j: Vec<C64> = bath.modes.iter().map(|m| m.phi_c(j)).collect();
    // Φ(e^{itω}φ_i): evolve the form factor
    let phi_i_t: Vec<C64> = bath
        .modes
        .iter()
        .zip(&phi_i)
        .map(|(m, p)| *p * C64::new(0.0, m.omega * t).exp())
        .collect();
    let f1 = field_operator(&ops, &phi_i_t);
    let f2 = field_operator(&ops, &phi_j);
    trace(&f1.dot(&f2).dot(&ops.rho_ref))
}
