//! Run configuration: JSON schema, validation, and canonical hashing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bath::{BathConfig, BathCorrelation, DecayProfile, DiscreteMode};
use crate::dyson::QuadConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SystemModel};
use crate::polymer::PolymerControls;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub n_steps: usize,
    /// Macroscopic cell length ℓ (microscopic ν = λ⁻²ℓ). Exactly one of
    /// `ell` and `ell_times_tchar` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<f64>,
    /// ℓ as a multiple of the measured mixing time 𝔱_L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell_times_tchar: Option<f64>,
    /// Coupling strengths for the sweep; single-element for one run.
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlsConfig {
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_a_max_size")]
    pub a_max_size: usize,
    #[serde(default = "default_a_max_span")]
    pub a_max_span: usize,
    #[serde(default = "default_max_parts")]
    pub max_parts: usize,
    #[serde(default = "default_prune_tol")]
    pub prune_tol: f64,
    #[serde(default = "default_qmc_log2")]
    pub qmc_log2: u32,
    #[serde(default = "default_qmc_replicates")]
    pub qmc_replicates: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_n_max() -> usize {
    3
}
fn default_a_max_size() -> usize {
    3
}
fn default_a_max_span() -> usize {
    6
}
fn default_max_parts() -> usize {
    3
}
fn default_prune_tol() -> f64 {
    1e-12
}
fn default_qmc_log2() -> u32 {
    13
}
fn default_qmc_replicates() -> u32 {
    8
}
fn default_seed() -> u64 {
    7
}

impl Default for ControlsConfig {
    fn default() -> Self {
        ControlsConfig {
            n_max: default_n_max(),
            a_max_size: default_a_max_size(),
            a_max_span: default_a_max_span(),
            max_parts: default_max_parts(),
            prune_tol: default_prune_tol(),
            qmc_log2: default_qmc_log2(),
            qmc_replicates: default_qmc_replicates(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleBathConfig {
    pub modes: Vec<DiscreteMode>,
    pub fock_cut: usize,
    /// Sample times for the emitted trajectory.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub bath: BathConfig,
    pub zeta: DecayProfile,
    pub grid: GridConfig,
    #[serde(default)]
    pub controls: ControlsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_bath: Option<OracleBathConfig>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "out".into()
}

impl RunConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.zeta.validate()?;
        if self.grid.lambdas.is_empty() {
            return Err(Error::Invalid("grid.lambdas must be nonempty".into()));
        }
        if self.grid.n_steps == 0 {
            return Err(Error::Invalid("grid.n_steps must be ≥ 1".into()));
        }
        match (self.grid.ell, self.grid.ell_times_tchar) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Invalid(
                    "grid needs exactly one of ell / ell_times_tchar".into(),
                ))
            }
        }
        // the builders run the deep checks
        self.model.build()?;
        BathCorrelation::new(self.bath.clone())?;
        Ok(())
    }

    pub fn build_model(&self, lambda: f64) -> Result<SystemModel> {
        let mut m = self.model.build()?;
        m.lambda = lambda;
        Ok(m)
    }

    pub fn build_bath(&self) -> Result<BathCorrelation> {
        BathCorrelation::new(self.bath.clone())
    }

    pub fn quad(&self) -> QuadConfig {
        QuadConfig {
            n_max: self.controls.n_max,
            qmc_log2: self.controls.qmc_log2,
            qmc_replicates: self.controls.qmc_replicates,
            seed: self.controls.seed,
            ..QuadConfig::default()
        }
    }

    pub fn polymer_controls(&self) -> PolymerControls {
        PolymerControls {
            a_max_size: self.controls.a_max_size,
            a_max_span: self.controls.a_max_span,
            max_parts: self.controls.max_parts,
            prune_tol: self.controls.prune_tol,
        }
    }

    /// Canonical hash of the configuration (serialized JSON bytes).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &std::path::Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}
