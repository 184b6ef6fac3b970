use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metastable::diffusion::{diffusion_sweep, Observable, TrajectoryOptions};
use metastable::harness::artifacts::fmt_f64;
use metastable::harness::{self, format_verdict, ExperimentConfig, HarnessError, Scenario, DEFAULT_SEED};
use metastable::markov::{self, Generator, JumpQuery};

#[derive(Parser)]
#[command(name = "metastable", version, about = "Metastability experiments for random interval maps")]
struct Cli {
    /// Worker threads (METASTABLE_JOBS takes precedence).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write a result bundle.
    Run {
        #[command(flatten)]
        common: Common,
        /// theorem1 | jumps | oracle | diffusion | properties | all
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Recompute verdicts of an existing bundle from its artifacts.
    Verify {
        /// Bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate jump-path probabilities of an averaged chain.
    Oracle {
        /// JSON with `beta_bar` (matrix) and optional `queries`; defaults to
        /// the symmetric two-state chain.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trajectory variance sweep over the diffusion configuration's ε list.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(serde::Deserialize)]
struct OracleRequest {
    beta_bar: Vec<Vec<f64>>,
    #[serde(default)]
    queries: Vec<JumpQuery>,
}

fn load_config(common: &Common, scenario: Option<&str>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(Scenario::All, DEFAULT_SEED),
    };
    if let Some(name) = scenario {
        cfg.scenario = Scenario::parse(name)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"))
}

fn write_or_print(out: Option<&Path>, file: &str, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            let path = dir.join(file);
            std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Run { common, scenario } => {
            let cfg = load_config(&common, scenario.as_deref())?;
            let dir = output_dir(&cfg);
            let manifest = harness::run(&cfg, &dir)?;
            for v in &manifest.verdicts {
                println!("{}", format_verdict(v));
            }
            println!("bundle: {}", dir.display());
            Ok(harness::exit_code(&manifest.verdicts))
        }
        Command::Verify { out } => {
            let report = harness::verify(&out)?;
            for v in &report.recomputed {
                println!("{}", format_verdict(v));
            }
            for c in report.changed() {
                println!("criterion {c}: recomputed status differs from the recorded one");
            }
            Ok(harness::exit_code(&report.recomputed))
        }
        Command::Oracle { config, out } => {
            let req = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
                    serde_json::from_str(&text)?
                }
                None => OracleRequest { beta_bar: vec![vec![0.0, 1.0], vec![1.0, 0.0]], queries: vec![] },
            };
            let g = Generator::new(&req.beta_bar)?;
            let report = markov::oracle_report(&g, &req.queries)?;
            write_or_print(out.as_deref(), "oracle.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
            Ok(0)
        }
        Command::Sweep { common } => {
            let cfg = load_config(&common, None)?;
            let d = &cfg.diffusion;
            let env = cfg.seeded(&d.env, 8).build()?;
            let map = env.maps(0.0)?.remove(0);
            let psi = Observable::state_values(env.alphabet.len(), map.boundary_points(), &d.psi_states)?;
            let opts = TrajectoryOptions { n: 0, replicas: d.replicas, inner: d.inner, depth: 0, seed: cfg.criterion_seed(8) };
            let report = diffusion_sweep(&env, &psi, &d.eps_list, d.n_scale, &opts)?;
            let mut csv = String::from("eps,sigma2,eps_sigma2,stderr,route,limit_value\n");
            for r in &report.rows {
                csv.push_str(&format!(
                    "{},{},{},{},trajectory,{}\n",
                    fmt_f64(r.eps),
                    fmt_f64(r.sigma2),
                    fmt_f64(r.eps_sigma2),
                    fmt_f64(r.stderr),
                    fmt_f64(r.limit_value)
                ));
            }
            let meta = serde_json::json!({
                "config_hash": cfg.hash(),
                "seed": cfg.seed,
                "environment_seed": env.seed,
                "n_scale": d.n_scale,
                "replicas": d.replicas,
                "inner": d.inner,
                "limit_value": report.limit_value,
                "richardson": report.richardson,
            });
            let dir = output_dir(&cfg);
            write_or_print(Some(&dir), "sweep.csv", &csv)?;
            write_or_print(Some(&dir), "sweep.json", &(serde_json::to_string_pretty(&meta)? + "\n"))?;
            print!("{csv}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let jobs = std::env::var("METASTABLE_JOBS").ok().and_then(|v| v.parse::<usize>().ok()).or(cli.jobs);
    if let Some(n) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
