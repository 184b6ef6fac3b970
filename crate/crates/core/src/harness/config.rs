use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::environment::{derive_seed, EnvironmentConfig};
use crate::markov::{JumpQuery, Window};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 1;

/// Named groups of acceptance criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Theorem1,
    Jumps,
    Oracle,
    Diffusion,
    Properties,
    All,
}

impl Scenario {
    pub const NAMES: [&'static str; 6] = ["theorem1", "jumps", "oracle", "diffusion", "properties", "all"];

    pub fn parse(name: &str) -> Result<Self, HarnessError> {
        match name {
            "theorem1" => Ok(Self::Theorem1),
            "jumps" => Ok(Self::Jumps),
            "oracle" => Ok(Self::Oracle),
            "diffusion" => Ok(Self::Diffusion),
            "properties" => Ok(Self::Properties),
            "all" => Ok(Self::All),
            other => Err(HarnessError::UnknownScenario(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Theorem1 => "theorem1",
            Self::Jumps => "jumps",
            Self::Oracle => "oracle",
            Self::Diffusion => "diffusion",
            Self::Properties => "properties",
            Self::All => "all",
        }
    }

    pub fn criteria(self) -> Vec<u8> {
        match self {
            Self::Theorem1 => vec![1, 2, 3, 4],
            Self::Jumps => vec![5, 6],
            Self::Oracle => vec![7],
            Self::Diffusion => vec![8, 9],
            Self::Properties => vec![10],
            Self::All => (1..=10).collect(),
        }
    }

    /// The scenario that owns a criterion.
    pub fn of_criterion(c: u8) -> Self {
        match c {
            1..=4 => Self::Theorem1,
            5 | 6 => Self::Jumps,
            7 => Self::Oracle,
            8 | 9 => Self::Diffusion,
            _ => Self::Properties,
        }
    }
}

/// Two symbols with `(a, b) = (0.5, 1.5)` and `(1.5, 0.5)` at `q = ½`, so
/// `ā = b̄ = 1`.
pub fn two_symbol_tents() -> EnvironmentConfig {
    let mut cfg = EnvironmentConfig::paired_tent(&[("lo", 0.5, 0.5, 1.5), ("hi", 0.5, 1.5, 0.5)], DEFAULT_SEED);
    cfg.beta_star = Some(0.5);
    cfg
}

pub fn unit_tent() -> EnvironmentConfig {
    EnvironmentConfig::paired_tent(&[("unit", 1.0, 1.0, 1.0)], DEFAULT_SEED)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoleConfig {
    pub a: f64,
    pub b: f64,
    pub eps: Vec<f64>,
    pub cells: usize,
    pub tol: f64,
}

impl Default for HoleConfig {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, eps: vec![0.1, 0.04, 0.01], cells: 1 << 10, tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionConfig {
    pub env: EnvironmentConfig,
    pub eps: f64,
    pub n: Vec<usize>,
    pub cells: usize,
    pub tol: f64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self { env: two_symbol_tents(), eps: 0.1, n: vec![1, 2, 3], cells: 1 << 10, tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiplierConfig {
    pub env: EnvironmentConfig,
    pub eps: Vec<f64>,
    pub cells: usize,
    pub band: [f64; 2],
}

impl Default for MultiplierConfig {
    fn default() -> Self {
        Self { env: unit_tent(), eps: vec![0.04, 0.02, 0.01], cells: 1 << 14, band: [0.95, 1.05] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BirkhoffConfig {
    pub env: EnvironmentConfig,
    pub eps: f64,
    pub t: f64,
    pub cells: usize,
    pub rel_tol: f64,
}

impl Default for BirkhoffConfig {
    fn default() -> Self {
        Self { env: two_symbol_tents(), eps: 0.005, t: 1.0, cells: 1 << 12, rel_tol: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Theorem1Config {
    pub holes: HoleConfig,
    pub composition: CompositionConfig,
    pub multiplier: MultiplierConfig,
    pub birkhoff: BirkhoffConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoldingConfig {
    pub env: EnvironmentConfig,
    pub eps: f64,
    pub j0: usize,
    pub samples: u64,
    pub t_grid: Vec<f64>,
    pub tol: f64,
}

impl Default for HoldingConfig {
    fn default() -> Self {
        Self {
            env: unit_tent(),
            eps: 0.01,
            j0: 0,
            samples: 100_000,
            t_grid: (1..=30).map(|k| k as f64 / 10.0).collect(),
            tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoJumpConfig {
    pub env: EnvironmentConfig,
    pub eps: f64,
    pub samples: u64,
    pub query: JumpQuery,
    pub ctmc_samples: u64,
}

impl Default for TwoJumpConfig {
    fn default() -> Self {
        let beta = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]];
        Self {
            env: EnvironmentConfig::m_well(&[("w", 1.0, beta)], DEFAULT_SEED),
            eps: 0.005,
            samples: 100_000,
            query: JumpQuery {
                j0: 1,
                deltas: vec![Window { a: 0.0, b: 1.0 }, Window { a: 0.0, b: 0.5 }],
                targets: vec![2, 1],
            },
            ctmc_samples: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct JumpsConfig {
    pub holding: HoldingConfig,
    pub two_jump: TwoJumpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// `(ā, b̄)` pairs for the two-state closed-form comparison.
    pub two_state_grid: Vec<[f64; 2]>,
    /// Further generators (as `β̄`) for the semigroup, stationarity and
    /// fundamental-solve checks.
    pub generators: Vec<Vec<Vec<f64>>>,
    pub semigroup_tol: f64,
    pub stationary_tol: f64,
    pub quadrature_tol: f64,
    pub limit_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            two_state_grid: vec![[1.0, 1.0], [2.0, 1.0], [0.5, 3.0], [1.0, 0.25], [4.0, 2.0]],
            generators: vec![
                vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]],
                vec![
                    vec![0.0, 0.7, 0.0, 0.0],
                    vec![1.3, 0.0, 0.4, 0.0],
                    vec![0.0, 2.2, 0.0, 0.9],
                    vec![0.0, 0.0, 1.1, 0.0],
                ],
            ],
            semigroup_tol: 1e-10,
            stationary_tol: 1e-12,
            quadrature_tol: 1e-8,
            limit_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub env: EnvironmentConfig,
    /// Observable value on each state, the same for every symbol.
    pub psi_states: Vec<f64>,
    pub eps_list: Vec<f64>,
    /// Birkhoff length `n = ⌈n_scale/ε⌉`.
    pub n_scale: f64,
    pub replicas: usize,
    pub inner: usize,
    pub target_eps: f64,
    pub rel_tol: f64,
    /// Normal quantile for "within error bars".
    pub z: f64,
    pub series_cells: usize,
    pub fiber_samples: usize,
    pub clt_eps: f64,
    pub clt_n: usize,
    pub clt_samples: usize,
    pub clt_cells: usize,
    pub ks_tol: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            env: two_symbol_tents(),
            psi_states: vec![-1.0, 1.0],
            eps_list: vec![0.04, 0.02, 0.01],
            n_scale: 400.0,
            replicas: 2000,
            inner: 8,
            target_eps: 0.02,
            rel_tol: 0.15,
            z: 1.96,
            series_cells: 1 << 12,
            fiber_samples: 16,
            clt_eps: 0.02,
            clt_n: 10_000,
            clt_samples: 10_000,
            clt_cells: 1 << 12,
            ks_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropertiesConfig {
    pub cases: usize,
}

impl Default for PropertiesConfig {
    fn default() -> Self {
        Self { cases: 200 }
    }
}

/// Everything a run needs. Environment seeds inside the sub-configurations
/// are replaced by seeds derived from the master `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub theorem1: Theorem1Config,
    #[serde(default)]
    pub jumps: JumpsConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub properties: PropertiesConfig,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario,
            seed,
            output_dir: None,
            theorem1: Default::default(),
            jumps: Default::default(),
            oracle: Default::default(),
            diffusion: Default::default(),
            properties: Default::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "schema version {} (supported: {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    /// Seed of the random streams used for criterion `c`.
    pub fn criterion_seed(&self, c: u8) -> u64 {
        derive_seed(self.seed, c as u64)
    }

    /// An environment configuration with its seed tied to criterion `c`.
    pub fn seeded(&self, env: &EnvironmentConfig, c: u8) -> EnvironmentConfig {
        EnvironmentConfig { seed: self.criterion_seed(c), ..env.clone() }
    }
}
