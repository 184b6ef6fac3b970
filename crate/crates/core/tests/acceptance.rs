//! Runs the ten acceptance criteria through the harness, prints one line per
//! criterion, and cross-checks the persisted numbers against oracles written
//! out independently here.

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use metastable::harness::artifacts::Table;
use metastable::harness::{self, format_verdict, ExperimentConfig, Scenario, Status, DEFAULT_SEED};
use statrs::distribution::{ContinuousCDF, Normal};

type Oracle = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Oracle {
    if cond { Ok(()) } else { Err(msg()) }
}

fn table(dir: &Path, file: &str) -> Table {
    Table::read(&dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

/// `Leb(H_L) = εb/(1+εb)` for the paired tent.
fn oracle_1(dir: &Path, _: &ExperimentConfig) -> Oracle {
    let t = table(dir, "c1_holes.csv");
    let (eps, b) = (t.floats("eps").unwrap(), t.floats("b").unwrap());
    for (col, tol) in [("interval_measure", 1e-12), ("ulam_deficiency", 1e-12)] {
        for (i, v) in t.floats(col).unwrap().iter().enumerate() {
            let exact = eps[i] * b[i] / (1.0 + eps[i] * b[i]);
            ensure((v - exact).abs() <= tol, || format!("{col} at eps {}: {v} vs {exact}", eps[i]))?;
        }
    }
    Ok(())
}

/// The survivor set of `n` open steps on `I_L` has measure
/// `Π_k 1/(1+εb_k)` (each full-branch step keeps uniform measure uniform),
/// and `Π_k 1/(1+εa_k)` on `I_R`.
fn oracle_2(dir: &Path, cfg: &ExperimentConfig) -> Oracle {
    let c = &cfg.theorem1.composition;
    let env = cfg.seeded(&c.env, 2).build().unwrap();
    let path = env.path(0, 8).unwrap();
    let ab: Vec<(f64, f64)> = env
        .alphabet
        .symbols()
        .iter()
        .map(|s| match &c.env.params[s] {
            metastable::environment::SymbolParams::Tent { a, b } => (*a, *b),
            _ => panic!("tent parameters expected"),
        })
        .collect();
    let t = table(dir, "c2_composition.csv");
    let (ns, states, meas) = (t.floats("n").unwrap(), t.floats("state").unwrap(), t.floats("survivor_measure").unwrap());
    for i in 0..ns.len() {
        let exact: f64 = (0..ns[i] as i64)
            .map(|k| {
                let (a, b) = ab[path.at(k)];
                1.0 / (1.0 + c.eps * if states[i] == 0.0 { b } else { a })
            })
            .product();
        ensure((meas[i] - exact).abs() <= 1e-12, || format!("survivor measure {} vs {exact}", meas[i]))?;
    }
    Ok(())
}

/// Uniform density is exactly equivariant for the open unit tent, so
/// `λ = 1/(1+ε)`.
fn oracle_3(dir: &Path, _: &ExperimentConfig) -> Oracle {
    let t = table(dir, "c3_multiplier.csv");
    for (e, l) in t.floats("eps").unwrap().iter().zip(t.floats("lambda").unwrap()) {
        ensure((l - 1.0 / (1.0 + e)).abs() <= 1e-12, || format!("lambda {l} at eps {e}"))?;
    }
    Ok(())
}

/// `λ_k = 1/(1+εb_{ω_k})` fibre by fibre.
fn oracle_4(dir: &Path, cfg: &ExperimentConfig) -> Oracle {
    let b = &cfg.theorem1.birkhoff;
    let t = table(dir, "c4_lambda.csv");
    for (s, l) in t.strings("symbol").unwrap().iter().zip(t.floats("lambda").unwrap()) {
        let bs = match &b.env.params[*s] {
            metastable::environment::SymbolParams::Tent { b, .. } => *b,
            _ => panic!("tent parameters expected"),
        };
        ensure((l - 1.0 / (1.0 + b.eps * bs)).abs() <= 1e-12, || format!("lambda {l} for symbol {s}"))?;
    }
    Ok(())
}

/// Mean of `ε𝒯_1` near `1/b̄ = 1`.
fn oracle_5(dir: &Path, cfg: &ExperimentConfig) -> Oracle {
    let h = &cfg.jumps.holding;
    let t = table(dir, "c5_samples.csv");
    let times: Vec<f64> = t
        .strings("t_1")
        .unwrap()
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| h.eps * s.parse::<f64>().unwrap())
        .collect();
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    ensure((mean - 1.0).abs() <= 0.05, || format!("mean rescaled holding time {mean}"))
}

/// `(1 − e^{−3}) · (2/3) · (1 − e^{−1/2})` for the three-well query.
fn oracle_6(dir: &Path, _: &ExperimentConfig) -> Oracle {
    let exact = (1.0 - (-3.0f64).exp()) * (2.0 / 3.0) * (1.0 - (-0.5f64).exp());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("c6_oracle.json")).unwrap()).unwrap();
    let got = report["queries"][0]["prob"].as_f64().unwrap();
    ensure((got - exact).abs() <= 1e-14, || format!("oracle {got} vs {exact}"))
}

/// The symmetric two-state chain has `p = (½, ½)` and unit rates.
fn oracle_7(dir: &Path, _: &ExperimentConfig) -> Oracle {
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("c7_symmetric.json")).unwrap()).unwrap();
    let p: Vec<f64> = report["p"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let rates: Vec<f64> = report["rates"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    ensure(p.iter().all(|x| (x - 0.5).abs() <= 1e-15) && rates.iter().all(|r| (r - 1.0).abs() <= 1e-15), || {
        format!("p {p:?}, rates {rates:?}")
    })
}

/// The limit `2āb̄(ψ̄_L − ψ̄_R)²/(ā+b̄)³` equals 1 for `ā = b̄ = 1`, `ψ̄ = ±1`.
fn oracle_8(dir: &Path, _: &ExperimentConfig) -> Oracle {
    let t = table(dir, "c8_sweep.csv");
    let lim = t.floats("limit_value").unwrap();
    ensure(lim.iter().all(|l| (l - 1.0).abs() <= 1e-12), || format!("limit column {lim:?}"))?;
    let se = t.floats("stderr").unwrap();
    ensure(se.iter().all(|s| s.is_finite() && *s > 0.0), || format!("stderr column {se:?}"))
}

/// Kolmogorov–Smirnov distance recomputed here from the raw sums.
fn oracle_9(dir: &Path, cfg: &ExperimentConfig) -> Oracle {
    let t = table(dir, "c9_sums.csv");
    let mut x = t.floats("scaled_sum").unwrap();
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    x.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, var.sqrt()).unwrap();
    let mut ks: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = normal.cdf(*v);
        ks = ks.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    ensure(ks <= cfg.diffusion.ks_tol, || format!("KS {ks}"))
}

fn oracle_10(dir: &Path, cfg: &ExperimentConfig) -> Oracle {
    let t = table(dir, "c10_properties.csv");
    let cases = t.floats("cases").unwrap();
    let fails = t.floats("failures").unwrap();
    ensure(
        cases.iter().all(|c| *c >= cfg.properties.cases as f64) && fails.iter().all(|f| *f == 0.0),
        || format!("cases {cases:?}, failures {fails:?}"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let cfg = ExperimentConfig::new(Scenario::All, DEFAULT_SEED);
    let oracles: [fn(&Path, &ExperimentConfig) -> Oracle; 10] = [
        oracle_1, oracle_2, oracle_3, oracle_4, oracle_5, oracle_6, oracle_7, oracle_8, oracle_9, oracle_10,
    ];
    let mut failed = 0;
    println!("acceptance suite (seed {DEFAULT_SEED})");
    for c in Scenario::All.criteria() {
        let bundle = dir.path().join(format!("c{c}"));
        let manifest = match harness::run_criteria(&cfg, &[c], &bundle) {
            Ok(m) => m,
            Err(e) => {
                println!("criterion {c:>2} FAIL error: {e}");
                failed += 1;
                continue;
            }
        };
        let v = &manifest.verdicts[0];
        let oracle = oracles[c as usize - 1](&bundle, &cfg);
        let pass = v.status == Status::Pass && oracle.is_ok();
        println!("{}", format_verdict(v));
        if let Err(msg) = oracle {
            println!("             independent oracle disagrees: {msg}");
        }
        match harness::verify(&bundle) {
            Ok(r) if r.changed().is_empty() => {}
            Ok(r) => println!("             verification changed the status of {:?}", r.changed()),
            Err(e) => println!("             verification failed: {e}"),
        }
        if !pass {
            failed += 1;
        }
    }
    println!("{} of 10 criteria passed", 10 - failed.min(10));
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
