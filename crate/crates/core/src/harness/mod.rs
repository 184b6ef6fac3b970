//! Configuration, orchestration and persistence of the acceptance
//! experiments.

pub mod artifacts;
pub mod config;
pub mod ctmc;
pub mod properties;
pub mod scenarios;
pub mod verdicts;

use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

pub use artifacts::{Manifest, Status, Verdict};
pub use config::{ExperimentConfig, Scenario, DEFAULT_SEED, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown scenario '{0}' (expected one of theorem1, jumps, oracle, diffusion, properties, all)")]
    UnknownScenario(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt artifact {file}: recorded sha256 {expected}, found {found}")]
    HashMismatch { file: String, expected: String, found: String },
    #[error("corrupt bundle: {0}")]
    Artifact(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Map(#[from] crate::map::MapError),
    #[error(transparent)]
    Env(#[from] crate::environment::EnvError),
    #[error(transparent)]
    Ulam(#[from] crate::ulam::UlamError),
    #[error(transparent)]
    Markov(#[from] crate::markov::MarkovError),
    #[error(transparent)]
    Jumps(#[from] crate::jumps::JumpError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Run every criterion of the configured scenario, writing artifacts and a
/// manifest into `out`. Verdicts are read back from the written files.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, HarnessError> {
    let criteria = cfg.scenario.criteria();
    run_criteria(cfg, &criteria, out)
}

pub fn run_criteria(cfg: &ExperimentConfig, criteria: &[u8], out: &Path) -> Result<Manifest, HarnessError> {
    let mut collector = artifacts::Collector::new(out)?;
    let mut timings = Vec::new();
    for &c in criteria {
        let start = Instant::now();
        scenarios::produce(c, cfg, &mut collector)?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("criterion {c} computed in {secs:.2}s");
        timings.push((c, secs));
    }
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        artifacts: collector.into_records(),
        timings,
        verdicts: Vec::new(),
    };
    manifest.verdicts = evaluate_all(&manifest, out)?;
    manifest.save(out)?;
    Ok(manifest)
}

fn evaluate_all(manifest: &Manifest, dir: &Path) -> Result<Vec<Verdict>, HarnessError> {
    manifest
        .timings
        .iter()
        .map(|&(c, secs)| verdicts::evaluate(c, dir, &manifest.config, secs))
        .collect()
}

/// Stored and recomputed verdicts of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub recorded: Vec<Verdict>,
    pub recomputed: Vec<Verdict>,
}

impl VerifyReport {
    /// Criteria whose recomputed status differs from the recorded one.
    pub fn changed(&self) -> Vec<u8> {
        self.recomputed
            .iter()
            .filter(|v| {
                self.recorded
                    .iter()
                    .find(|r| r.criterion == v.criterion)
                    .is_none_or(|r| r.status != v.status)
            })
            .map(|v| v.criterion)
            .collect()
    }
}

/// Check artifact hashes and recompute all verdicts without simulating.
/// A missing artifact makes the criteria that read it "skipped".
pub fn verify(dir: &Path) -> Result<VerifyReport, HarnessError> {
    let manifest = Manifest::load(dir)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(HarnessError::HashMismatch {
            file: artifacts::MANIFEST.into(),
            expected: manifest.config_hash.clone(),
            found: manifest.config.hash(),
        });
    }
    for a in &manifest.artifacts {
        let path = dir.join(&a.file);
        if !path.exists() {
            continue;
        }
        let found = artifacts::sha256_file(&path)?;
        if found != a.sha256 {
            return Err(HarnessError::HashMismatch { file: a.file.clone(), expected: a.sha256.clone(), found });
        }
    }
    let recomputed = evaluate_all(&manifest, dir)?;
    Ok(VerifyReport { recorded: manifest.verdicts, recomputed })
}

/// `0` if every verdict passes, `2` otherwise.
pub fn exit_code(verdicts: &[Verdict]) -> i32 {
    if verdicts.iter().all(|v| v.status == Status::Pass) { 0 } else { 2 }
}

/// One line per verdict.
pub fn format_verdict(v: &Verdict) -> String {
    let status = match v.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skipped => "SKIP",
    };
    format!("criterion {:>2} [{}] {status} ({:.2}s) {}", v.criterion, v.scenario, v.runtime_s, v.detail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn oracle_bundle() -> (tempfile::TempDir, Manifest) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::new(Scenario::Oracle, 3);
        let m = run(&cfg, dir.path()).unwrap();
        (dir, m)
    }

    #[test]
    fn oracle_scenario_passes() {
        let (_dir, m) = oracle_bundle();
        assert_eq!(m.verdicts.len(), 1);
        assert_eq!(m.verdicts[0].status, Status::Pass, "{}", m.verdicts[0].detail);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let (a, ma) = oracle_bundle();
        let (b, mb) = oracle_bundle();
        assert_eq!(ma.artifacts, mb.artifacts);
        for r in &ma.artifacts {
            assert_eq!(fs::read(a.path().join(&r.file)).unwrap(), fs::read(b.path().join(&r.file)).unwrap());
        }
    }

    #[test]
    fn untouched_bundle_verifies_identically() {
        let (dir, _) = oracle_bundle();
        let r = verify(dir.path()).unwrap();
        assert!(r.changed().is_empty());
        assert_eq!(exit_code(&r.recomputed), 0);
    }

    #[test]
    fn edited_artifact_is_a_hash_mismatch() {
        let (dir, _) = oracle_bundle();
        let path = dir.path().join("c7_oracle.csv");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push('\n');
        fs::write(&path, text).unwrap();
        assert!(matches!(verify(dir.path()), Err(HarnessError::HashMismatch { .. })));
    }

    #[test]
    fn missing_artifact_is_skipped() {
        let (dir, _) = oracle_bundle();
        fs::remove_file(dir.path().join("c7_oracle.csv")).unwrap();
        let r = verify(dir.path()).unwrap();
        assert_eq!(r.recomputed[0].status, Status::Skipped);
        assert_eq!(exit_code(&r.recomputed), 2);
    }

    #[test]
    fn unwritable_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain_file");
        fs::write(&file, "x").unwrap();
        let cfg = ExperimentConfig::new(Scenario::Oracle, 3);
        assert!(matches!(run(&cfg, &file.join("sub")), Err(HarnessError::Io { .. })));
    }

    #[test]
    fn hole_and_composition_criteria_pass() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::new(Scenario::Theorem1, 3);
        let m = run_criteria(&cfg, &[1, 2], dir.path()).unwrap();
        for v in &m.verdicts {
            assert_eq!(v.status, Status::Pass, "{}", format_verdict(v));
        }
    }
}
