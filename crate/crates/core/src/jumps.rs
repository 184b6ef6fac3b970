//! Orbits of the random maps, their metastable jump sequences, and Monte
//! Carlo estimates of jump laws.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{derive_seed, EnvError, Environment, FiberPath, SymbolStream};
use crate::map::PiecewiseAffineMap;
use crate::markov::{self, JumpQuery, MarkovError};
use crate::ulam::{DensityVector, Grid};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Stream offset separating initial-point draws from path draws.
const X0_STREAM: u64 = 0x5851_F42D_4C95_7F2D;

#[derive(Debug, Error)]
pub enum JumpError {
    #[error("initial point {0} outside the state space")]
    OutsideStateSpace(f64),
    #[error("jump from state {from} to non-neighbour {to} at step {step}")]
    NonNeighbour { from: usize, to: usize, step: usize },
    #[error("path window does not cover steps 0..{0}")]
    Window(usize),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Orbit record of one initial point along one fibre path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub eps: f64,
    pub x0: f64,
    pub n: usize,
    /// `z(T^{(k)} x0)` for `k = 0..=n`.
    pub labels: Vec<u32>,
    pub final_x: f64,
    pub boundary_hits: u64,
    pub fixed_point_hits: u64,
}

/// Iterate `x0` through the fibre maps `maps[path(k)]`, `k = 0..n`.
pub fn simulate(
    maps: &[PiecewiseAffineMap],
    path: &FiberPath,
    eps: f64,
    x0: f64,
    n: usize,
) -> Result<Trajectory, JumpError> {
    let first = maps.first().ok_or_else(|| JumpError::Invalid("no maps".into()))?;
    if !first.state_space().contains(x0) {
        return Err(JumpError::OutsideStateSpace(x0));
    }
    if n > 0 && !path.contains(0, n as i64 - 1) {
        return Err(JumpError::Window(n));
    }
    let mut labels = Vec::with_capacity(n + 1);
    labels.push(first.label(x0) as u32);
    let mut x = x0;
    let (mut boundary_hits, mut fixed_point_hits) = (0, 0);
    for k in 0..n {
        let map = &maps[path.at(k as i64)];
        x = map.eval_unchecked(x);
        if map.on_interior_boundary(x) {
            boundary_hits += 1;
        }
        if map.fixed_points().contains(&x) {
            fixed_point_hits += 1;
        }
        labels.push(map.label(x) as u32);
    }
    Ok(Trajectory { seed: path.seed(), eps, x0, n, labels, final_x: x, boundary_hits, fixed_point_hits })
}

/// Jump times `t_i`, holding times `𝒯_i = t_i − t_{i−1}` and visited states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JumpTrace {
    pub times: Vec<usize>,
    pub holding: Vec<usize>,
    pub states: Vec<u32>,
}

/// First-difference scan of a label sequence.
pub fn extract_jumps(labels: &[u32]) -> Result<JumpTrace, JumpError> {
    let mut trace = JumpTrace { times: vec![], holding: vec![], states: vec![] };
    let mut last_t = 0;
    for t in 1..labels.len() {
        let (a, b) = (labels[t - 1], labels[t]);
        if a != b {
            if a.abs_diff(b) != 1 {
                return Err(JumpError::NonNeighbour { from: a as usize, to: b as usize, step: t });
            }
            trace.times.push(t);
            trace.holding.push(t - last_t);
            trace.states.push(b);
            last_t = t;
        }
    }
    Ok(trace)
}

/// How initial points are drawn from `μ_{j0}`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Uniform on `I_{j0}`; the ACIM for the built-in families.
    Uniform,
    /// Piecewise-constant density (for example an unperturbed Ulam density).
    Density { grid: Grid, density: DensityVector },
}

impl InitialLaw {
    fn label(&self) -> &'static str {
        match self {
            InitialLaw::Uniform => "uniform",
            InitialLaw::Density { .. } => "ulam_density",
        }
    }
}

/// Sampler for `x0` on `I_j`.
struct X0Sampler {
    lo: f64,
    hi: f64,
    /// `(cumulative mass, cell lo, cell hi)` when a density is supplied.
    cells: Vec<(f64, f64, f64)>,
}

impl X0Sampler {
    fn new(map: &PiecewiseAffineMap, j: usize, law: &InitialLaw) -> Result<Self, JumpError> {
        let state = map.state(j).map_err(EnvError::from)?;
        let mut cells = Vec::new();
        if let InitialLaw::Density { grid, density } = law {
            let mut acc = 0.0;
            for k in grid.overlapping(&state) {
                let c = grid.cell(k);
                if let Some(piece) = c.intersect(&state) {
                    acc += density.weights()[k] * piece.len();
                    cells.push((acc, piece.lo, piece.hi));
                }
            }
            if !(acc > 0.0) {
                return Err(JumpError::Invalid(format!("initial density has no mass on state {j}")));
            }
            for c in &mut cells {
                c.0 /= acc;
            }
        }
        Ok(Self { lo: state.lo, hi: state.hi, cells })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        if self.cells.is_empty() {
            return self.lo + (self.hi - self.lo) * u;
        }
        let i = self.cells.partition_point(|c| c.0 <= u).min(self.cells.len() - 1);
        let (_, a, b) = self.cells[i];
        a + (b - a) * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One fibre path `ω` shared by all samples.
    #[default]
    Quenched,
    /// A fresh path per sample.
    Annealed,
}

/// First `p` jumps of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub id: u64,
    pub times: Vec<usize>,
    pub states: Vec<u32>,
    pub censored: bool,
    pub boundary_hits: u64,
    pub fixed_point_hits: u64,
}

impl SampleOutcome {
    pub fn holding(&self) -> Vec<usize> {
        let mut prev = 0;
        self.times
            .iter()
            .map(|&t| {
                let h = t - prev;
                prev = t;
                h
            })
            .collect()
    }
}

/// Options shared by the Monte Carlo jump experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpSampling {
    pub eps: f64,
    pub j0: usize,
    pub n_samples: u64,
    pub seed: u64,
    pub mode: SamplingMode,
    pub law: InitialLaw,
    /// Steps allowed per required jump; defaults to `⌈50/(ε β*)⌉`.
    pub budget_per_jump: Option<u64>,
}

impl JumpSampling {
    pub fn new(eps: f64, j0: usize, n_samples: u64, seed: u64) -> Self {
        Self { eps, j0, n_samples, seed, mode: SamplingMode::Quenched, law: InitialLaw::Uniform, budget_per_jump: None }
    }

    fn budget(&self, env: &Environment, p: usize) -> u64 {
        let per = self
            .budget_per_jump
            .unwrap_or_else(|| (50.0 / (self.eps * env.beta_star)).ceil() as u64);
        per.saturating_mul(p as u64)
    }
}

enum Driver<'a> {
    Window(&'a FiberPath),
    Stream(SymbolStream<'a>),
}

impl Driver<'_> {
    #[inline]
    fn symbol(&mut self, k: u64) -> usize {
        match self {
            Driver::Window(p) => p.at(k as i64),
            Driver::Stream(s) => s.next_symbol(),
        }
    }
}

/// Simulate samples until `p` jumps each (or the budget runs out).
pub fn sample_jumps(env: &Environment, opts: &JumpSampling, p: usize) -> Result<Vec<SampleOutcome>, JumpError> {
    if !(opts.eps > 0.0) {
        return Err(JumpError::Invalid("eps = 0 has no jumps".into()));
    }
    if p == 0 {
        return Err(JumpError::Invalid("need at least one jump".into()));
    }
    let maps = env.maps(opts.eps)?;
    if opts.j0 >= maps[0].m() {
        return Err(JumpError::Invalid(format!("no state {}", opts.j0)));
    }
    let sampler = X0Sampler::new(&maps[0], opts.j0, &opts.law)?;
    let budget = opts.budget(env, p);
    let shared = match opts.mode {
        SamplingMode::Quenched => Some(env.path(0, budget as i64)?),
        SamplingMode::Annealed => None,
    };
    (0..opts.n_samples)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed ^ X0_STREAM, id));
            let x0 = sampler.draw(&mut rng);
            let mut driver = match &shared {
                Some(path) => Driver::Window(path),
                None => Driver::Stream(SymbolStream::new(&env.alphabet, derive_seed(env.seed, id), 0)),
            };
            run_sample(&maps, &mut driver, id, x0, p, budget)
        })
        .collect()
}

fn run_sample(
    maps: &[PiecewiseAffineMap],
    driver: &mut Driver<'_>,
    id: u64,
    x0: f64,
    p: usize,
    budget: u64,
) -> Result<SampleOutcome, JumpError> {
    let mut out = SampleOutcome {
        id,
        times: Vec::with_capacity(p),
        states: Vec::with_capacity(p),
        censored: false,
        boundary_hits: 0,
        fixed_point_hits: 0,
    };
    let mut x = x0;
    let mut z = maps[0].label(x0) as u32;
    for k in 0..budget {
        let map = &maps[driver.symbol(k)];
        x = map.eval_unchecked(x);
        if map.on_interior_boundary(x) {
            out.boundary_hits += 1;
        }
        if !map.fixed_points().is_empty() && map.fixed_points().contains(&x) {
            out.fixed_point_hits += 1;
        }
        let nz = map.label(x) as u32;
        if nz != z {
            if nz.abs_diff(z) != 1 {
                return Err(JumpError::NonNeighbour { from: z as usize, to: nz as usize, step: k as usize + 1 });
            }
            out.times.push(k as usize + 1);
            out.states.push(nz);
            z = nz;
            if out.times.len() == p {
                return Ok(out);
            }
        }
    }
    out.censored = true;
    Ok(out)
}

/// Wilson score interval at normal quantile `z`.
pub fn wilson(hits: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Empirical probability of a jump query with its Wilson interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalJumpDist {
    pub query: JumpQuery,
    pub eps: f64,
    pub mode: SamplingMode,
    pub initial_law: String,
    pub n_samples: u64,
    pub n_used: u64,
    pub censored: u64,
    pub hits: u64,
    pub estimate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub oracle_value: Option<f64>,
    pub boundary_hits: u64,
    pub fixed_point_hits: u64,
}

impl EmpiricalJumpDist {
    pub fn oracle_inside(&self) -> Option<bool> {
        self.oracle_value.map(|v| self.wilson_lo <= v && v <= self.wilson_hi)
    }
}

/// Does an uncensored sample satisfy `ε𝒯_k ∈ Δ_k` and `z_k = r_k` for all `k`?
pub fn query_hit(query: &JumpQuery, eps: f64, sample: &SampleOutcome) -> bool {
    sample
        .holding()
        .iter()
        .zip(&sample.states)
        .zip(query.deltas.iter().zip(&query.targets))
        .all(|((&h, &z), (w, &r))| w.contains(eps * h as f64) && z as usize == r)
}

/// Tally samples against a query. The oracle value comes from the averaged
/// chain when the environment carries a β prescription.
pub fn summarize(
    env: &Environment,
    opts: &JumpSampling,
    query: &JumpQuery,
    samples: &[SampleOutcome],
) -> Result<EmpiricalJumpDist, JumpError> {
    let used: Vec<&SampleOutcome> = samples.iter().filter(|s| !s.censored).collect();
    let hits = used.iter().filter(|s| query_hit(query, opts.eps, s)).count() as u64;
    let n_used = used.len() as u64;
    let (lo, hi) = wilson(hits, n_used, Z95);
    let oracle_value = match env.averaged_beta() {
        Ok(beta) => {
            let o = markov::JumpOracle::new(&markov::Generator::new(&beta)?)?;
            Some(markov::jump_path_probability(&o, query)?)
        }
        Err(_) => None,
    };
    Ok(EmpiricalJumpDist {
        query: query.clone(),
        eps: opts.eps,
        mode: opts.mode,
        initial_law: opts.law.label().into(),
        n_samples: samples.len() as u64,
        n_used,
        censored: samples.len() as u64 - n_used,
        hits,
        estimate: if n_used > 0 { hits as f64 / n_used as f64 } else { 0.0 },
        wilson_lo: lo,
        wilson_hi: hi,
        oracle_value,
        boundary_hits: samples.iter().map(|s| s.boundary_hits).sum(),
        fixed_point_hits: samples.iter().map(|s| s.fixed_point_hits).sum(),
    })
}

/// Simulate and tally in one call.
pub fn jump_distribution(
    env: &Environment,
    opts: &JumpSampling,
    query: &JumpQuery,
) -> Result<(EmpiricalJumpDist, Vec<SampleOutcome>), JumpError> {
    if query.j0 != opts.j0 {
        return Err(JumpError::Invalid(format!("query starts in {} but sampling in {}", query.j0, opts.j0)));
    }
    let samples = sample_jumps(env, opts, query.p())?;
    Ok((summarize(env, opts, query, &samples)?, samples))
}

/// One CSV row per sample: `sample_id, t_1..t_p, z_1..z_p, censored`.
/// Missing jumps of censored samples are left empty.
pub fn write_samples_csv<W: Write>(out: W, p: usize, samples: &[SampleOutcome]) -> Result<(), JumpError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=p).map(|k| format!("t_{k}")));
    header.extend((1..=p).map(|k| format!("z_{k}")));
    header.push("censored".into());
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.id.to_string()];
        for k in 0..p {
            row.push(s.times.get(k).map(|t| t.to_string()).unwrap_or_default());
        }
        for k in 0..p {
            row.push(s.states.get(k).map(|z| z.to_string()).unwrap_or_default());
        }
        row.push(u8::from(s.censored).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Survival of `ε𝒯_1` against `e^{−t r_{j0}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldingLawReport {
    pub eps: f64,
    pub rate: f64,
    pub degenerate: bool,
    pub n_used: u64,
    pub censored: u64,
    /// `(t, empirical survival, e^{−t r})`.
    pub rows: Vec<(f64, f64, f64)>,
    pub sup_distance: f64,
}

/// Empirical survival function of `ε𝒯_1` from samples with one jump each.
pub fn holding_survival(eps: f64, samples: &[SampleOutcome], t_grid: &[f64], rate: f64) -> HoldingLawReport {
    let mut scaled: Vec<f64> = samples
        .iter()
        .filter(|s| !s.censored)
        .map(|s| eps * s.times[0] as f64)
        .collect();
    scaled.sort_by(f64::total_cmp);
    let n = scaled.len() as f64;
    let rows: Vec<(f64, f64, f64)> = t_grid
        .iter()
        .map(|&t| {
            let above = scaled.len() - scaled.partition_point(|&v| v <= t);
            (t, above as f64 / n, (-t * rate).exp())
        })
        .collect();
    let sup_distance = rows.iter().map(|r| (r.1 - r.2).abs()).fold(0.0, f64::max);
    HoldingLawReport {
        eps,
        rate,
        degenerate: false,
        n_used: scaled.len() as u64,
        censored: samples.len() as u64 - scaled.len() as u64,
        rows,
        sup_distance,
    }
}

/// `sup_t |ℙ̂(ε𝒯_1 > t) − e^{−t r_{j0}}|` over `t_grid`. At `ε = 0` nothing
/// ever jumps and the report is flagged degenerate.
pub fn compare_holding_law(env: &Environment, opts: &JumpSampling, t_grid: &[f64]) -> Result<HoldingLawReport, JumpError> {
    let beta = env.averaged_beta()?;
    let rate = markov::Generator::new(&beta)?.exit_rate(opts.j0);
    if opts.eps == 0.0 {
        return Ok(HoldingLawReport {
            eps: 0.0,
            rate,
            degenerate: true,
            n_used: 0,
            censored: 0,
            rows: vec![],
            sup_distance: f64::NAN,
        });
    }
    let samples = sample_jumps(env, opts, 1)?;
    Ok(holding_survival(opts.eps, &samples, t_grid, rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::EnvironmentConfig;
    use crate::map::{paired_tent, PairedTentParams};
    use crate::markov::Window;
    use proptest::prelude::*;

    fn tent_env(b: f64) -> Environment {
        Environment::paired_tent(&[("x", 1.0, 1.0, b)], 42).unwrap()
    }

    fn testbed() -> Environment {
        let beta = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]];
        EnvironmentConfig::m_well(&[("s", 1.0, beta)], 9).build().unwrap()
    }

    #[test]
    fn unperturbed_orbit_never_leaves() {
        let env = tent_env(1.0);
        let maps = env.maps(0.0).unwrap();
        let path = env.path(0, 10_000).unwrap();
        let tr = simulate(&maps, &path, 0.0, -0.3141, 10_000).unwrap();
        assert!(tr.labels.iter().all(|&z| z == 0));
        let tr = simulate(&maps, &path, 0.0, -0.3141, 0).unwrap();
        assert_eq!(tr.labels, vec![0]);
        assert!(simulate(&maps, &path, 0.0, 1.5, 3).is_err());
    }

    #[test]
    fn long_orbit_stays_in_range() {
        let env = Environment::paired_tent(&[("lo", 0.5, 1.0, 0.5), ("hi", 0.5, 1.0, 1.5)], 3).unwrap();
        let maps = env.maps(0.05).unwrap();
        let path = env.path(0, 1_000_000).unwrap();
        let tr = simulate(&maps, &path, 0.05, 0.123, 1_000_000).unwrap();
        assert!((-1.0..=1.0).contains(&tr.final_x));
        assert!(tr.labels.iter().all(|&z| z < 2));
        extract_jumps(&tr.labels).unwrap();
    }

    #[test]
    fn extraction_examples() {
        let t = extract_jumps(&[0, 0, 1, 1, 0]).unwrap();
        assert_eq!(t.times, vec![2, 4]);
        assert_eq!(t.holding, vec![2, 2]);
        assert_eq!(t.states, vec![1, 0]);
        assert_eq!(extract_jumps(&[1, 1, 1]).unwrap().times, Vec::<usize>::new());
        assert!(matches!(extract_jumps(&[0, 2]), Err(JumpError::NonNeighbour { .. })));
    }

    #[test]
    fn mean_holding_time_is_inverse_rate() {
        let env = tent_env(1.0);
        let opts = JumpSampling::new(0.01, 0, 100_000, 5);
        let samples = sample_jumps(&env, &opts, 1).unwrap();
        let mean = samples.iter().map(|s| 0.01 * s.times[0] as f64).sum::<f64>() / samples.len() as f64;
        assert!((0.97..=1.03).contains(&mean), "mean {mean}");
    }

    #[test]
    fn single_jump_probability() {
        let env = tent_env(1.0);
        let opts = JumpSampling::new(0.01, 0, 100_000, 6);
        let q = JumpQuery::new(0, vec![Window::new(0.0, 1.0).unwrap()], vec![1]).unwrap();
        let (d, _) = jump_distribution(&env, &opts, &q).unwrap();
        let oracle = 1.0 - (-1.0f64).exp();
        assert_eq!(d.oracle_value, Some(oracle));
        assert!((d.estimate - oracle).abs() <= 0.01, "{}", d.estimate);
        let q0 = JumpQuery::new(0, vec![Window::new(0.0, 0.0).unwrap()], vec![1]).unwrap();
        let opts = JumpSampling::new(0.01, 0, 1000, 6);
        assert_eq!(jump_distribution(&env, &opts, &q0).unwrap().0.hits, 0);
    }

    #[test]
    fn middle_well_target_probability() {
        let env = testbed();
        let opts = JumpSampling::new(0.01, 1, 20_000, 7);
        let q = JumpQuery::new(1, vec![Window::new(0.0, f64::INFINITY).unwrap()], vec![2]).unwrap();
        let (d, _) = jump_distribution(&env, &opts, &q).unwrap();
        assert!((d.estimate - 2.0 / 3.0).abs() <= 0.01, "{}", d.estimate);
    }

    #[test]
    fn holding_law_sup_distance() {
        let env = tent_env(1.0);
        let grid: Vec<f64> = (1..=30).map(|i| 0.1 * i as f64).collect();
        let r = compare_holding_law(&env, &JumpSampling::new(0.01, 0, 100_000, 8), &grid).unwrap();
        assert!(r.sup_distance <= 0.02, "{}", r.sup_distance);
        let r0 = compare_holding_law(&env, &JumpSampling::new(0.0, 0, 10, 8), &grid).unwrap();
        assert!(r0.degenerate);
    }

    #[test]
    fn annealed_and_quenched_are_deterministic() {
        let env = Environment::paired_tent(&[("lo", 0.5, 1.0, 0.5), ("hi", 0.5, 1.0, 1.5)], 3).unwrap();
        for mode in [SamplingMode::Quenched, SamplingMode::Annealed] {
            let mut opts = JumpSampling::new(0.05, 0, 500, 11);
            opts.mode = mode;
            let a = sample_jumps(&env, &opts, 2).unwrap();
            let b = sample_jumps(&env, &opts, 2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn censoring_is_counted() {
        let env = tent_env(1.0);
        let mut opts = JumpSampling::new(0.01, 0, 2000, 12);
        opts.budget_per_jump = Some(5);
        let q = JumpQuery::new(0, vec![Window::new(0.0, f64::INFINITY).unwrap()], vec![1]).unwrap();
        let (d, samples) = jump_distribution(&env, &opts, &q).unwrap();
        assert!(d.censored > 1500 && d.censored + d.n_used == 2000);
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, 1, &samples).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,t_1,z_1,censored\n"));
        assert_eq!(text.lines().count(), 2001);
    }

    #[test]
    fn density_law_samples_inside_state() {
        let t = paired_tent(PairedTentParams::new(1.0, 1.0).unwrap(), 0.0).unwrap();
        let grid = Grid::for_maps(std::slice::from_ref(&t), 8).unwrap();
        let mut w = vec![0.0; 8];
        w[5] = 4.0;
        let law = InitialLaw::Density { grid: grid.clone(), density: DensityVector::new(&grid, w).unwrap() };
        let s = X0Sampler::new(&t, 1, &law).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let x = s.draw(&mut rng);
            assert!((0.25..=0.5).contains(&x));
        }
    }

    #[test]
    fn wilson_interval_contains_estimate() {
        let (lo, hi) = wilson(50, 100, Z95);
        assert!(lo < 0.5 && 0.5 < hi);
        assert!((hi - lo - 2.0 * 0.0962).abs() < 1e-3);
        assert_eq!(wilson(0, 0, Z95), (0.0, 1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn prop_trace_round_trip(steps in proptest::collection::vec((1usize..20, any::<bool>()), 0..30), start in 1u32..4) {
            let mut labels = vec![start];
            let mut z = start;
            let mut times = vec![];
            let mut states = vec![];
            for (hold, up) in steps {
                for _ in 1..hold {
                    labels.push(z);
                }
                z = if up || z == 0 { z + 1 } else { z - 1 };
                labels.push(z);
                times.push(labels.len() - 1);
                states.push(z);
            }
            let t = extract_jumps(&labels).unwrap();
            prop_assert_eq!(t.times, times);
            prop_assert_eq!(t.states, states);
            prop_assert!(t.holding.iter().all(|&h| h >= 1));
        }

        #[test]
        fn prop_random_orbits_jump_to_neighbours(seed in any::<u64>(), eps in 0.01f64..0.2, x0 in 0.0f64..3.0) {
            let beta = vec![vec![0.0, 1.0, 0.0], vec![1.5, 0.0, 2.0], vec![0.0, 0.7, 0.0]];
            let env = EnvironmentConfig::m_well(&[("s", 1.0, beta)], seed).build().unwrap();
            let maps = env.maps(eps).unwrap();
            let path = env.path(0, 2000).unwrap();
            let tr = simulate(&maps, &path, eps, x0, 2000).unwrap();
            prop_assert!(extract_jumps(&tr.labels).is_ok());
        }
    }
}
