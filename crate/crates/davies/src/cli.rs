//! Experiment orchestration: the `run` pipeline, the `verify` invariant
//! suite, subcommand plumbing, and reproducible run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::bath::{check_zeta_integrability, envelope, BathConfig, DecayProfile};
use crate::config::{sha256_file, OracleBathConfig, RunConfig};
use crate::dyson::{z_reduced, QuadConfig};
use crate::error::{Error, Result};
use crate::linalg::{expm, frobenius, spectral_norm, trace_norm, CMat};
use crate::model::{ad_hs_propagator, mat_to_rowmajor, Superoperator};
use crate::oracle::{exact_reduced_dynamics, FiniteBath};
use crate::polymer::{
    build_excitation_table, excitation_connected, one_step_t, polymer_sum, speed_bound,
    steady_state, TimeGrid, TSpectral,
};

#[derive(Parser)]
#[command(name = "davies", version, about = "Weak-coupling open-system dynamics with certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// QMC seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single coupling strength override (replaces the sweep).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Macroscopic cell length ℓ override.
    #[arg(long)]
    pub ell: Option<f64>,
    /// Number of macroscopic steps override.
    #[arg(long, value_name = "N")]
    pub n_steps: Option<usize>,
    /// Diagram order cap override.
    #[arg(long)]
    pub nmax: Option<usize>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Full pipeline: certificates, Lindblad generator, polymer resummation.
    Run(CommonArgs),
    /// Markov generator only: L, gap, mixing time, stationary state, rates.
    Lindblad(CommonArgs),
    /// Truncated Dyson propagator over [0, t].
    Dyson {
        #[command(flatten)]
        common: CommonArgs,
        /// Final microscopic time.
        #[arg(long)]
        t: f64,
        /// log2 of the QMC point count.
        #[arg(long, value_name = "LOG2")]
        quad_points: Option<u32>,
    },
    /// Polymer resummation of Z_N with certificates and trajectory CSV.
    Polymer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        amax_size: Option<usize>,
        #[arg(long)]
        amax_span: Option<usize>,
    },
    /// Exact finite-bath reduced dynamics, trajectory CSV.
    Oracle(CommonArgs),
    /// Machine-readable invariant suite with measured residuals.
    Verify(CommonArgs),
}

fn apply_overrides(cfg: &mut RunConfig, args: &CommonArgs) {
    if let Some(out) = &args.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = args.seed {
        cfg.controls.seed = seed;
    }
    if let Some(lam) = args.lambda {
        cfg.grid.lambdas = vec![lam];
    }
    if let Some(ell) = args.ell {
        cfg.grid.ell = Some(ell);
        cfg.grid.ell_times_tchar = None;
    }
    if let Some(n) = args.n_steps {
        cfg.grid.n_steps = n;
    }
    if let Some(nmax) = args.nmax {
        cfg.controls.n_max = nmax;
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    apply_overrides(&mut cfg, args);
    cfg.validate()?;
    Ok(cfg)
}

pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => load_config(args).and_then(|cfg| run_pipeline(&cfg).map(|_| ())),
        Command::Lindblad(args) => load_config(args).and_then(|cfg| cmd_lindblad(&cfg)),
        Command::Dyson { common, t, quad_points } => load_config(common).and_then(|mut cfg| {
            if let Some(q) = quad_points {
                cfg.controls.qmc_log2 = *q;
            }
            cmd_dyson(&cfg, *t)
        }),
        Command::Polymer { common, amax_size, amax_span } => load_config(common).and_then(|mut cfg| {
            if let Some(s) = amax_size {
                cfg.controls.a_max_size = *s;
            }
            if let Some(s) = amax_span {
                cfg.controls.a_max_span = *s;
            }
            run_pipeline(&cfg).map(|_| ())
        }),
        Command::Oracle(args) => load_config(args).and_then(|cfg| cmd_oracle(&cfg)),
        Command::Verify(args) => load_config(args).and_then(|cfg| {
            let report = verify(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Output records
// ---------------------------------------------------------------------------

fn superop_json(s: &Superoperator) -> Vec<[f64; 2]> {
    mat_to_rowmajor(&s.mat)
}

#[derive(Debug, Serialize)]
pub struct BathStage {
    pub h_l1: f64,
    pub h_l1_error: f64,
    pub zeta_ok: bool,
    pub h_zeta: f64,
    pub zeta_detail: String,
    pub zeta_certificate: String,
}

#[derive(Debug, Serialize)]
pub struct LindbladStage {
    pub gap: f64,
    pub t_char: f64,
    pub c_l: f64,
    pub rho_inv: Vec<[f64; 2]>,
    pub l_matrix: Vec<[f64; 2]>,
    pub rates: Option<Vec<Vec<f64>>>,
    pub ergodic: Option<bool>,
    pub stationary: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct TrajectoryRow {
    pub n: usize,
    pub distance_to_rank_one: f64,
    pub rate_certificate: f64,
    pub speed_bound: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct LambdaBlock {
    pub lambda: f64,
    pub ell: f64,
    pub nu: f64,
    pub within_mixing_range: bool,
    pub t_bound_tail: f64,
    pub t_stat_err: f64,
    /// ‖e^{iℓλ⁻² ad H} T - e^{ℓL}‖: the measured weak-coupling deviation.
    pub weak_coupling_deviation: f64,
    pub g: f64,
    pub c_g: f64,
    pub epsilon: f64,
    pub epsilon1: f64,
    pub delta_n: f64,
    pub rho_inv: Vec<[f64; 2]>,
    pub distance_to_markov: f64,
    pub consistency: f64,
    pub rate_coefficient: f64,
    pub polymer_terms: usize,
    pub pruned_bound: f64,
    pub trajectory: Vec<TrajectoryRow>,
}

#[derive(Debug, Serialize)]
pub struct RunResults {
    pub bath: BathStage,
    pub lindblad: LindbladStage,
    pub lambdas: Vec<LambdaBlock>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub timestamp_unix: u64,
    pub stages: serde_json::Value,
    /// Output file name → sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Execute the full pipeline in dependency order, aborting at the first
/// failed assumption certificate, and write results + manifest.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest> {
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let bc = cfg.build_bath()?;
    let zp = cfg.zeta.clone();

    // Stage 1: bath certificates (integrability of h, ζ-weighted variant)
    let model0 = cfg.build_model(cfg.grid.lambdas[0])?;
    let env = envelope(&bc, &model0).map_err(|e| stage_err("bath (Assumption 1)", e))?;
    let zrep = check_zeta_integrability(&env, &zp);
    if !zrep.ok {
        return Err(Error::Certificate {
            stage: "bath (ζ-integrability)".into(),
            detail: zrep.detail,
        });
    }
    let bath_stage = BathStage {
        h_l1: env.h_l1,
        h_l1_error: env.h_l1_error,
        zeta_ok: zrep.ok,
        h_zeta: zrep.h_zeta,
        zeta_detail: zrep.detail.clone(),
        zeta_certificate: zp.subexponential_certificate().into(),
    };

    // Stage 2: Markov generator and its spectral certificates
    let gen = crate::lindblad::build_generator(&model0, &bc)
        .map_err(|e| stage_err("lindblad (Assumption 2 / FGR)", e))?;
    let lindblad_stage = LindbladStage {
        gap: gen.gap,
        t_char: gen.t_char,
        c_l: gen.c_l,
        rho_inv: mat_to_rowmajor(&gen.rho_inv_markov),
        l_matrix: superop_json(&gen.l),
        rates: gen.rates.as_ref().map(|r| r.rates.clone()),
        ergodic: gen.rates.as_ref().map(|r| r.ergodic),
        stationary: gen.rates.as_ref().map(|r| r.stationary.clone()),
    };

    // Stage 3+: per-λ polymer pipeline
    let quad = cfg.quad();
    let controls = cfg.polymer_controls();
    let mut lambda_blocks = Vec::new();
    let mut csv_paths = Vec::new();
    for (li, &lambda) in cfg.grid.lambdas.iter().enumerate() {
        let model = cfg.build_model(lambda)?;
        let ell = match (cfg.grid.ell, cfg.grid.ell_times_tchar) {
            (Some(e), _) => e,
            (None, Some(x)) => x * gen.t_char,
            _ => unreachable!("validated"),
        };
        let grid = TimeGrid::unrestricted(cfg.grid.n_steps, ell, lambda, gen.t_char)?;
        let t = one_step_t(&model, &bc, &grid, &quad)
            .map_err(|e| stage_err("one-step map T", e))?;
        let tspec = TSpectral::compute(&t.op).map_err(|e| stage_err("dissipativity of T", e))?;
        // measured weak-coupling deviation
        let w_back = ad_hs_propagator(&model, -grid.nu)?;
        let e_ll = expm(&gen.l.mat.mapv(|z| z * ell));
        let weak_dev = spectral_norm(&(&w_back.compose(&t.op).mat - &e_ll));
        let table = build_excitation_table(&model, &bc, &grid, &controls, &quad)?;
        let sum = polymer_sum(&t.op, &tspec, &table, &grid, &controls)?;
        let steady = steady_state(
            &model,
            &gen.rho_inv_markov,
            gen.gap,
            &sum,
            &tspec,
            &table,
            &env,
            &zp,
            &grid,
        )
        .map_err(|e| stage_err("steady state", e))?;
        // trajectory over N' ≤ N
        let r_inv = Superoperator::rank_one(&steady.rho_inv, &crate::linalg::identity(model.dim));
        let mut trajectory = Vec::new();
        for n_prime in 1..=cfg.grid.n_steps {
            let sub_grid = TimeGrid::unrestricted(n_prime, ell, lambda, gen.t_char)?;
            let sub = polymer_sum(&t.op, &tspec, &table, &sub_grid, &controls)?;
            let dist = spectral_norm(&(&sub.z_n.mat - &r_inv.mat));
            let sb = speed_bound(
                &grid,
                tspec.g,
                gen.t_char,
                &steady.certificate,
                n_prime as f64 * grid.nu,
            )
            .ok()
            .map(|b| b.value);
            trajectory.push(TrajectoryRow {
                n: n_prime,
                distance_to_rank_one: dist,
                rate_certificate: steady.certificate.eval(n_prime),
                speed_bound: sb,
            });
        }
        // CSV emission
        let csv_path = out_dir.join(format!("trajectory_{li}.csv"));
        let mut csv = String::from("n,distance_to_rank_one,rate_certificate,speed_bound\n");
        for row in &trajectory {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.n,
                row.distance_to_rank_one,
                row.rate_certificate,
                row.speed_bound.map(|x| x.to_string()).unwrap_or_default()
            ));
        }
        std::fs::write(&csv_path, csv)?;
        csv_paths.push(csv_path);
        lambda_blocks.push(LambdaBlock {
            lambda,
            ell,
            nu: grid.nu,
            within_mixing_range: grid.within_mixing_range,
            t_bound_tail: t.bound_tail,
            t_stat_err: t.stat_err,
            weak_coupling_deviation: weak_dev,
            g: tspec.g,
            c_g: tspec.c_g,
            epsilon: steady.epsilon.epsilon,
            epsilon1: steady.epsilon.epsilon1,
            delta_n: sum.report.delta_n,
            rho_inv: mat_to_rowmajor(&steady.rho_inv),
            distance_to_markov: steady.distance_to_markov,
            consistency: steady.consistency,
            rate_coefficient: steady.certificate.coefficient,
            polymer_terms: sum.report.n_terms,
            pruned_bound: sum.report.pruned_bound,
            trajectory,
        });
    }

    let results = RunResults {
        bath: bath_stage,
        lindblad: lindblad_stage,
        lambdas: lambda_blocks,
    };
    let results_path = out_dir.join("results.json");
    std::fs::write(&results_path, serde_json::to_string_pretty(&results)?)?;

    // manifest with per-file hashes
    let mut outputs = BTreeMap::new();
    outputs.insert("results.json".to_string(), sha256_file(&results_path)?);
    for p in &csv_paths {
        outputs.insert(
            p.file_name().unwrap().to_string_lossy().into_owned(),
            sha256_file(p)?,
        );
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        stages: serde_json::json!({
            "bath": { "h_l1": results.bath.h_l1, "zeta_ok": results.bath.zeta_ok },
            "lindblad": { "gap": results.lindblad.gap, "t_char": results.lindblad.t_char },
            "lambdas": results.lambdas.iter().map(|b| serde_json::json!({
                "lambda": b.lambda,
                "epsilon": b.epsilon,
                "g": b.g,
                "delta_n": b.delta_n,
            })).collect::<Vec<_>>(),
        }),
        outputs,
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        Error::AssumptionViolated { assumption, detail } => Error::AssumptionViolated {
            assumption: format!("{stage}: {assumption}"),
            detail,
        },
        Error::FgrFails(msg) => Error::FgrFails(format!("{stage}: {msg}")),
        Error::Certificate { stage: s, detail } => Error::Certificate {
            stage: format!("{stage}/{s}"),
            detail,
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_lindblad(cfg: &RunConfig) -> Result<()> {
    let model = cfg.build_model(cfg.grid.lambdas[0])?;
    let bc = cfg.build_bath()?;
    let gen = crate::lindblad::build_generator(&model, &bc)?;
    let out = serde_json::json!({
        "l_matrix": superop_json(&gen.l),
        "l_tilde_matrix": superop_json(&gen.l_tilde),
        "gap": gen.gap,
        "t_char": gen.t_char,
        "c_l": gen.c_l,
        "rho_inv": mat_to_rowmajor(&gen.rho_inv_markov),
        "rates": gen.rates.as_ref().map(|r| r.rates.clone()),
        "ergodic": gen.rates.as_ref().map(|r| r.ergodic),
        "stationary": gen.rates.as_ref().map(|r| r.stationary.clone()),
    });
    emit(cfg, "lindblad.json", &serde_json::to_string_pretty(&out)?)
}

fn cmd_dyson(cfg: &RunConfig, t: f64) -> Result<()> {
    let model = cfg.build_model(cfg.grid.lambdas[0])?;
    let bc = cfg.build_bath()?;
    let z = z_reduced(&model, &bc, t, &cfg.quad())?;
    let out = serde_json::json!({
        "t": t,
        "n_max": cfg.quad().n_max,
        "z_matrix": superop_json(&z.z),
        "bound_tail": z.bound_tail,
        "stat_err": z.stat_err,
        "orders": z.orders,
    });
    emit(cfg, "dyson.json", &serde_json::to_string_pretty(&out)?)
}

fn cmd_oracle(cfg: &RunConfig) -> Result<()> {
    let ob: &OracleBathConfig = cfg.oracle_bath.as_ref().ok_or_else(|| {
        Error::Invalid("oracle subcommand needs an oracle_bath section".into())
    })?;
    let model = cfg.build_model(cfg.grid.lambdas[0])?;
    let bath = FiniteBath::new(ob.modes.clone(), ob.fock_cut)?;
    let d = model.dim;
    let rho0 = {
        let mut m: CMat = ndarray::Array2::zeros((d, d));
        m[[0, 0]] = C64::new(1.0, 0.0);
        m
    };
    let traj = exact_reduced_dynamics(&model, &bath, &rho0, &ob.times)?;
    let mut csv = String::from("t,entries_rowmajor_re_im\n");
    for (k, t) in traj.times.iter().enumerate() {
        let flat: Vec<String> = mat_to_rowmajor(&traj.reduced_states[k])
            .iter()
            .flat_map(|e| vec![e[0].to_string(), e[1].to_string()])
            .collect();
        csv.push_str(&format!("{},{}\n", t, flat.join(",")));
    }
    emit(cfg, "oracle_trajectory.csv", &csv)
}

fn emit(cfg: &RunConfig, name: &str, content: &str) -> Result<()> {
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(name), content)?;
    println!("wrote {}", out_dir.join(name).display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Invariant suite
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub residual: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
}

fn check(name: &str, residual: f64, tolerance: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass: residual <= tolerance,
        residual,
        tolerance,
        detail: detail.into(),
    }
}

fn check_fail(name: &str, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass: false,
        residual: f64::NAN,
        tolerance: 0.0,
        detail: detail.into(),
    }
}

/// Run the machine-readable invariant suite: bath symmetries, Ward identity,
/// cumulant round-trip, tree inequality, hook tiling, and the finite-bath
/// cross-check when a discrete bath is configured.
pub fn verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let bc = match cfg.build_bath() {
        Ok(b) => b,
        Err(e) => {
            return Ok(VerifyReport {
                checks: vec![check_fail("bath_validation", e.to_string())],
                all_pass: false,
            })
        }
    };
    let lambda = cfg.grid.lambdas[0];
    let model = cfg.build_model(lambda)?;

    // bath Hermitian symmetry at sampled times
    {
        let mut worst: f64 = 0.0;
        for &t in &[0.0, 0.3, 1.1, 2.7] {
            for i in 0..bc.n_channels {
                for j in 0..bc.n_channels {
                    if let (Ok(f), Ok(g)) = (bc.correlation(i, j, t), bc.correlation(j, i, -t)) {
                        worst = worst.max((f.conj() - g).norm());
                    }
                }
            }
        }
        checks.push(check(
            "bath_hermitian_symmetry",
            worst,
            1e-10,
            "conj f_{ij}(t) = f_{ji}(-t) sampled",
        ));
    }

    // spectral function nonnegativity (single channel) where defined
    if bc.n_channels == 1 {
        let mut worst: f64 = 0.0;
        let mut defined = true;
        for k in -20..=20 {
            let w = k as f64 * 0.35;
            match bc.spectral(0, 0, w) {
                Ok(v) => worst = worst.min(v.re).min(0.0).abs().max(worst),
                Err(_) => defined = false,
            }
        }
        if defined {
            checks.push(check(
                "spectral_function_nonnegative",
                worst,
                1e-12,
                "f̂(ω) ≥ 0 on the sampled grid",
            ));
        }
    }

    // Assumption 1 + ζ-integrability
    let env = match envelope(&bc, &model) {
        Ok(env) => {
            checks.push(check("assumption1_h_integrable", 0.0, 1.0, format!("‖h‖₁ = {}", env.h_l1)));
            Some(env)
        }
        Err(e) => {
            checks.push(check_fail("assumption1_h_integrable", e.to_string()));
            None
        }
    };
    if let Some(env) = &env {
        let zrep = check_zeta_integrability(env, &cfg.zeta);
        checks.push(CheckResult {
            name: "zeta_integrability".into(),
            pass: zrep.ok,
            residual: if zrep.ok { 0.0 } else { f64::NAN },
            tolerance: 0.0,
            detail: zrep.detail,
        });
    }

    // Ward identity on truncated excitations; certificate-relative
    if env.is_some() {
        let quad = cfg.quad();
        match crate::lindblad::build_generator(&model, &bc) {
            Ok(gen) => {
                let ell = match (cfg.grid.ell, cfg.grid.ell_times_tchar) {
                    (Some(e), _) => e,
                    (None, Some(x)) => x * gen.t_char,
                    _ => unreachable!(),
                };
                let grid = TimeGrid::unrestricted(4, ell, lambda, gen.t_char)?;
                for a_set in [vec![1usize, 2], vec![1, 3], vec![1, 2, 3]] {
                    match excitation_connected(&model, &bc, &grid, &a_set, &quad) {
                        Ok(exc) => {
                            let cert = (exc.bound_tail + 3.0 * exc.stat_err).max(1e-9);
                            checks.push(check(
                                &format!("ward_identity_{a_set:?}"),
                                exc.ward_residual(),
                                cert,
                                "⟨vec(1)| contraction on the max leg",
                            ));
                        }
                        Err(e) => checks.push(check_fail(&format!("ward_identity_{a_set:?}"), e.to_string())),
                    }
                }
                // truncation sensitivity: order-1 build must be no better
                let coarse = excitation_connected(
                    &model,
                    &bc,
                    &grid,
                    &[1, 2],
                    &QuadConfig { n_max: 1, ..quad.clone() },
                )?;
                let fine = excitation_connected(&model, &bc, &grid, &[1, 2], &quad)?;
                checks.push(CheckResult {
                    name: "ward_nmax_sensitivity".into(),
                    pass: fine.ward_residual() <= coarse.ward_residual() * 1.5 + 1e-12,
                    residual: fine.ward_residual(),
                    tolerance: coarse.ward_residual() * 1.5,
                    detail: format!(
                        "residual at n_max=1: {:.3e}, at n_max={}: {:.3e}",
                        coarse.ward_residual(),
                        quad.n_max,
                        fine.ward_residual()
                    ),
                });
            }
            Err(e) => checks.push(check_fail("ward_identity", e.to_string())),
        }
    }

    // cumulant round-trip on random three-leg operators
    {
        use rand::Rng;
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(cfg.controls.seed);
        let d2 = 4usize;
        let all_sets: Vec<Vec<usize>> = vec![
            vec![1], vec![2], vec![3],
            vec![1, 2], vec![1, 3], vec![2, 3],
            vec![1, 2, 3],
        ];
        let mut full: BTreeMap<Vec<usize>, CMat> = BTreeMap::new();
        for s in &all_sets {
            let dim = d2.pow(s.len() as u32);
            let mut m: CMat = ndarray::Array2::zeros((dim, dim));
            for r in 0..dim {
                for c in 0..dim {
                    m[[r, c]] = C64::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                }
            }
            full.insert(s.clone(), m);
        }
        let mut conn: BTreeMap<Vec<usize>, CMat> = BTreeMap::new();
        for s in &all_sets {
            conn.insert(s.clone(), crate::polymer::cumulant_invert(&full, s, d2)?);
        }
        let mut worst: f64 = 0.0;
        for s in &all_sets {
            let dim = d2.pow(s.len() as u32);
            let mut recon: CMat = ndarray::Array2::zeros((dim, dim));
            for p in crate::oracle::enumerate_partitions(s)? {
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
                recon += &crate::polymer::tensor_embed(&parts, s.len(), d2);
            }
            worst = worst.max(frobenius(&(&recon - &full[s])));
        }
        checks.push(check("cumulant_roundtrip", worst, 1e-10, "partition reassembly on subsets of {1,2,3}"));
    }

    // tree inequality for the configured ζ (exact with 1e-12 slack)
    {
        let zp = if matches!(cfg.zeta, DecayProfile::Constant) {
            DecayProfile::Power { alpha: 1.3 }
        } else {
            cfg.zeta.clone()
        };
        let mut worst: f64 = 0.0;
        for set in subsets_up_to(6, 5) {
            if set.len() < 2 {
                continue;
            }
            let lin = crate::polymer::dist_zeta(&zp, &set);
            for tree in crate::oracle::enumerate_spanning_trees(&set)? {
                let prod: f64 = tree
                    .iter()
                    .map(|&(a, b)| zp.eval((b as f64 - a as f64).abs()))
                    .product();
                worst = worst.max(lin - prod);
            }
        }
        checks.push(check(
            "tree_inequality",
            worst,
            1e-12,
            "dist_ζ(A) ≤ Π ζ over every spanning tree, A ⊂ {1..6}, |A| ≤ 5",
        ));
    }

    // hook bookkeeping tiles the time axis
    {
        let poly = crate::polymer::PolymerSet::with_hooks(
            vec![vec![3, 4, 6], vec![5, 10, 11, 13], vec![16, 17]],
            20,
        );
        checks.push(CheckResult {
            name: "hook_tiling".into(),
            pass: poly.tiles(20),
            residual: 0.0,
            tolerance: 0.0,
            detail: "parts, hooks and free cells tile {1..N}".into(),
        });
    }

    // finite-bath cross-check when a discrete bath is available
    if let Some(ob) = &cfg.oracle_bath {
        let bath = FiniteBath::new(ob.modes.clone(), ob.fock_cut)?;
        let bc_modes = crate::bath::BathCorrelation::new(BathConfig::Fewmode { modes: ob.modes.clone() })?;
        let t = ob.times.last().cloned().unwrap_or(1.0).min(5.0);
        let z = z_reduced(&model, &bc_modes, t, &cfg.quad())?;
        let d = model.dim;
        let rho0 = {
            let mut m: CMat = ndarray::Array2::zeros((d, d));
            m[[0, 0]] = C64::new(1.0, 0.0);
            m
        };
        let exact = exact_reduced_dynamics(&model, &bath, &rho0, &[t])?;
        let dev = trace_norm(&(&z.z.apply(&rho0) - &exact.reduced_states[0]));
        checks.push(check(
            "oracle_cross_check",
            dev,
            z.bound_tail.max(5e-3),
            format!("z_reduced vs exact finite bath at t = {t}"),
        ));
    }

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { checks, all_pass })
}

fn subsets_up_to(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 1u32..(1 << n) {
        if (mask.count_ones() as usize) <= max_size {
            let set: Vec<usize> = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| k + 1).collect();
            out.push(set);
        }
    }
    out
}
