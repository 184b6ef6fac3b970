//! Pass/fail decisions computed from persisted artifacts only.

use std::fs;
use std::path::Path;

use super::artifacts::{Status, Table, Verdict};
use super::config::{ExperimentConfig, Scenario};
use super::HarnessError;
use crate::diffusion::normality;
use crate::jumps::{query_hit, wilson, SampleOutcome, Z95};
use crate::markov::{self, Generator, JumpOracle};
use crate::ulam::window_len;

/// Wall-clock limit of each criterion, in seconds.
pub fn runtime_limit(c: u8) -> f64 {
    match c {
        1 | 7 => 1.0,
        2 => 10.0,
        3 | 4 => 120.0,
        5 | 10 => 300.0,
        6 => 600.0,
        8 => 1800.0,
        9 => 900.0,
        _ => f64::INFINITY,
    }
}

/// Files each criterion reads.
pub fn inputs(c: u8) -> &'static [&'static str] {
    match c {
        1 => &["c1_holes.csv"],
        2 => &["c2_composition.csv"],
        3 => &["c3_multiplier.csv"],
        4 => &["c4_lambda.csv"],
        5 => &["c5_samples.csv"],
        6 => &["c6_samples.csv", "c6_ctmc.csv"],
        7 => &["c7_oracle.csv"],
        8 => &["c8_sweep.csv", "c8_series.json"],
        9 => &["c9_sums.csv"],
        10 => &["c10_properties.csv"],
        _ => &[],
    }
}

/// `(passed, detail)` for one criterion.
type Check = Result<(bool, String), HarnessError>;

pub fn evaluate(c: u8, dir: &Path, cfg: &ExperimentConfig, runtime_s: f64) -> Result<Verdict, HarnessError> {
    let limit = runtime_limit(c);
    let mut verdict = Verdict {
        criterion: c,
        scenario: Scenario::of_criterion(c).name().into(),
        status: Status::Skipped,
        detail: String::new(),
        runtime_s,
        runtime_limit_s: limit,
    };
    let missing: Vec<&str> = inputs(c).iter().copied().filter(|f| !dir.join(f).exists()).collect();
    if !missing.is_empty() {
        verdict.detail = format!("missing artifact(s): {}", missing.join(", "));
        return Ok(verdict);
    }
    let (ok, mut detail) = match c {
        1 => holes(dir, cfg),
        2 => composition(dir, cfg),
        3 => multiplier(dir, cfg),
        4 => birkhoff(dir, cfg),
        5 => holding(dir, cfg),
        6 => two_jump(dir, cfg),
        7 => oracle(dir),
        8 => variance(dir, cfg),
        9 => clt(dir, cfg),
        10 => properties(dir, cfg),
        _ => Err(HarnessError::Config(format!("no criterion {c}"))),
    }?;
    let fast = runtime_s <= limit;
    if !fast {
        detail.push_str(&format!("; runtime {runtime_s:.1}s exceeds {limit}s"));
    }
    verdict.status = if ok && fast { Status::Pass } else { Status::Fail };
    verdict.detail = detail;
    Ok(verdict)
}

fn holes(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let t = Table::read(&dir.join("c1_holes.csv"))?;
    let (eps, b) = (t.floats("eps")?, t.floats("b")?);
    let (iv, ul) = (t.floats("interval_measure")?, t.floats("ulam_deficiency")?);
    let tol = cfg.theorem1.holes.tol;
    let mut worst: f64 = 0.0;
    let mut ratio_ok = true;
    for i in 0..eps.len() {
        let exact = eps[i] * b[i] / (1.0 + eps[i] * b[i]);
        worst = worst.max((iv[i] - exact).abs()).max((ul[i] - exact).abs());
        ratio_ok &= (iv[i] / eps[i] - b[i]).abs() <= eps[i];
    }
    let ok = !eps.is_empty() && worst <= tol && ratio_ok;
    Ok((ok, format!("max |mu - eps b/(1+eps b)| = {worst:.2e}; |mu/eps - b| <= eps: {ratio_ok}")))
}

fn composition(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let t = Table::read(&dir.join("c2_composition.csv"))?;
    let d = t.floats("max_discrepancy")?;
    let ns: Vec<usize> = t.floats("n")?.into_iter().map(|x| x as usize).collect();
    let worst = d.iter().copied().fold(0.0, f64::max);
    let covered = cfg.theorem1.composition.n.iter().all(|n| ns.contains(n));
    let ok = covered && d.iter().all(|x| *x <= cfg.theorem1.composition.tol);
    Ok((ok, format!("max discrepancy {worst:.2e} over {} compositions", d.len())))
}

fn multiplier(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let t = Table::read(&dir.join("c3_multiplier.csv"))?;
    let (eps, lambda) = (t.floats("eps")?, t.floats("lambda")?);
    let mut pairs: Vec<(f64, f64)> = eps.iter().zip(&lambda).map(|(e, l)| (*e, (1.0 - l) / e)).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let [lo, hi] = cfg.theorem1.multiplier.band;
    let in_band = pairs.iter().all(|p| lo <= p.1 && p.1 <= hi);
    let decreasing = pairs.windows(2).all(|w| (w[1].1 - 1.0).abs() < (w[0].1 - 1.0).abs());
    let shown: Vec<String> = pairs.iter().map(|p| format!("{}:{:.5}", p.0, p.1)).collect();
    Ok((
        !pairs.is_empty() && in_band && decreasing,
        format!("(1-lambda)/eps = [{}]; in band {in_band}, error decreasing {decreasing}", shown.join(", ")),
    ))
}

/// Exit rate of state `from` in the averaged chain.
fn averaged_rate(env: &crate::environment::EnvironmentConfig, from: usize) -> Result<f64, HarnessError> {
    let beta = env.build()?.averaged_beta()?;
    Ok(Generator::new(&beta)?.exit_rate(from))
}

fn birkhoff(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let b = &cfg.theorem1.birkhoff;
    let t = Table::read(&dir.join("c4_lambda.csv"))?;
    let lambda = t.floats("lambda")?;
    let n = window_len(b.eps, b.t);
    if lambda.len() < n {
        return Ok((false, format!("only {} multipliers for a window of {n}", lambda.len())));
    }
    let product: f64 = lambda[..n].iter().product();
    let target = (-b.t * averaged_rate(&b.env, 0)?).exp();
    let rel = (product - target).abs() / target;
    Ok((rel <= b.rel_tol, format!("product {product:.6} vs {target:.6}, relative error {rel:.4}")))
}

/// Sample rows of a `write_samples_csv` file.
fn read_samples(path: &Path, p: usize) -> Result<Vec<SampleOutcome>, HarnessError> {
    let t = Table::read(path)?;
    let ids = t.strings("sample_id")?;
    let censored = t.strings("censored")?;
    let times: Vec<Vec<&str>> = (1..=p).map(|k| t.strings(&format!("t_{k}"))).collect::<Result<_, _>>()?;
    let states: Vec<Vec<&str>> = (1..=p).map(|k| t.strings(&format!("z_{k}"))).collect::<Result<_, _>>()?;
    let bad = |what: &str, s: &str| HarnessError::Artifact(format!("bad {what} '{s}'"));
    (0..ids.len())
        .map(|i| {
            let mut s = SampleOutcome {
                id: ids[i].parse().map_err(|_| bad("id", ids[i]))?,
                times: vec![],
                states: vec![],
                censored: censored[i] == "1",
                boundary_hits: 0,
                fixed_point_hits: 0,
            };
            for k in 0..p {
                if !times[k][i].is_empty() {
                    s.times.push(times[k][i].parse().map_err(|_| bad("time", times[k][i]))?);
                    s.states.push(states[k][i].parse().map_err(|_| bad("state", states[k][i]))?);
                }
            }
            Ok(s)
        })
        .collect()
}

fn holding(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let h = &cfg.jumps.holding;
    let samples = read_samples(&dir.join("c5_samples.csv"), 1)?;
    let rate = averaged_rate(&h.env, h.j0)?;
    let report = crate::jumps::holding_survival(h.eps, &samples, &h.t_grid, rate);
    Ok((
        report.n_used > 0 && report.sup_distance <= h.tol,
        format!(
            "sup |P(eps T > t) - exp(-{rate} t)| = {:.4} over {} samples ({} censored)",
            report.sup_distance, report.n_used, report.censored
        ),
    ))
}

fn two_jump(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let t = &cfg.jumps.two_jump;
    let samples = read_samples(&dir.join("c6_samples.csv"), t.query.p())?;
    let used: Vec<&SampleOutcome> = samples.iter().filter(|s| !s.censored).collect();
    let hits = used.iter().filter(|s| query_hit(&t.query, t.eps, s)).count() as u64;
    let (lo, hi) = wilson(hits, used.len() as u64, Z95);
    let g = Generator::new(&t.env.build()?.averaged_beta()?)?;
    let exact = markov::jump_path_probability(&JumpOracle::new(&g)?, &t.query)?;
    let ctmc = Table::read(&dir.join("c6_ctmc.csv"))?;
    let (cn, ch) = (ctmc.floats("samples")?[0] as u64, ctmc.floats("hits")?[0] as u64);
    let (clo, chi) = wilson(ch, cn, Z95);
    let inside = lo <= exact && exact <= hi;
    let cross = clo <= exact && exact <= chi;
    Ok((
        inside && cross,
        format!(
            "empirical {:.5} in [{lo:.5}, {hi:.5}] (n = {}), oracle {exact:.5}; direct chain {:.5} in [{clo:.5}, {chi:.5}]",
            hits as f64 / used.len().max(1) as f64,
            used.len(),
            ch as f64 / cn as f64
        ),
    ))
}

fn oracle(dir: &Path) -> Check {
    let t = Table::read(&dir.join("c7_oracle.csv"))?;
    let checks = t.strings("check")?;
    let (v, tol) = (t.floats("value")?, t.floats("tolerance")?);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut ok = !v.is_empty();
    for i in 0..v.len() {
        ok &= v[i] <= tol[i];
        match worst.iter_mut().find(|w| w.0 == checks[i]) {
            Some(w) => w.1 = w.1.max(v[i]),
            None => worst.push((checks[i].to_string(), v[i])),
        }
    }
    let shown: Vec<String> = worst.iter().map(|w| format!("{} {:.1e}", w.0, w.1)).collect();
    Ok((ok, shown.join(", ")))
}

fn variance(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let d = &cfg.diffusion;
    let t = Table::read(&dir.join("c8_sweep.csv"))?;
    let routes = t.strings("route")?;
    let (eps, es2, se, lim) = (t.floats("eps")?, t.floats("eps_sigma2")?, t.floats("stderr")?, t.floats("limit_value")?);
    let meta: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join("c8_series.json")).map_err(|e| HarnessError::io(&dir.join("c8_series.json"), e))?,
    )?;
    let mut traj: Vec<usize> = (0..eps.len()).filter(|&i| routes[i] == "trajectory").collect();
    traj.sort_by(|&a, &b| eps[b].total_cmp(&eps[a]));
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    let Some(&at) = traj.iter().find(|&&i| close(eps[i], d.target_eps)) else {
        return Ok((false, "no trajectory row at the target eps".into()));
    };
    let Some(series) = (0..eps.len()).find(|&i| routes[i] == "operator_series" && close(eps[i], d.target_eps)) else {
        return Ok((false, "no series row at the target eps".into()));
    };
    let limit = lim[at];
    let rel = (es2[at] - limit).abs() / limit;
    let near = rel <= d.rel_tol;
    let trend = traj.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        (es2[b] - limit).abs() <= (es2[a] - limit).abs() + d.z * (se[a].powi(2) + se[b].powi(2)).sqrt()
    });
    let tail = meta["tail_bound"].as_f64().unwrap_or(f64::INFINITY) * eps[series];
    let gap = (es2[series] - es2[at]).abs();
    let allowed = d.z * (se[series].powi(2) + se[at].powi(2)).sqrt() + tail;
    let agree = gap <= allowed;
    let sweep: Vec<String> = traj.iter().map(|&i| format!("{}:{:.4}±{:.4}", eps[i], es2[i], se[i])).collect();
    Ok((
        near && trend && agree,
        format!(
            "eps*Sigma2 = [{}] vs {limit:.4} (rel {rel:.3}, within tol {near}); trend {trend}; series {:.4}±{:.4}, |diff| {gap:.4} <= {allowed:.4}: {agree}",
            sweep.join(", "),
            es2[series],
            se[series]
        ),
    ))
}

fn clt(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let d = &cfg.diffusion;
    let t = Table::read(&dir.join("c9_sums.csv"))?;
    let sums = t.floats("scaled_sum")?;
    let r = normality(d.clt_eps, d.clt_n, &sums, 0.0)?;
    Ok((
        r.ks_distance <= d.ks_tol,
        format!(
            "KS {:.4} (N = {}), Sigma2 {:.3}, skewness {:.3}, excess kurtosis {:.3}",
            r.ks_distance, r.samples, r.sigma2, r.skewness, r.excess_kurtosis
        ),
    ))
}

fn properties(dir: &Path, cfg: &ExperimentConfig) -> Check {
    let t = Table::read(&dir.join("c10_properties.csv"))?;
    let names = t.strings("property")?;
    let (cases, fails) = (t.floats("cases")?, t.floats("failures")?);
    let need = cfg.properties.cases as f64;
    let all_present = super::properties::PROPERTIES.iter().all(|p| names.contains(p));
    let failing: Vec<&str> = (0..names.len()).filter(|&i| fails[i] > 0.0 || cases[i] < need).map(|i| names[i]).collect();
    Ok((
        all_present && failing.is_empty(),
        if failing.is_empty() {
            format!("{} properties x {} cases", names.len(), need)
        } else {
            format!("failing: {}", failing.join(", "))
        },
    ))
}
