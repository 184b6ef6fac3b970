//! Randomised invariant checks run by the `properties` scenario.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scenario};
use crate::diffusion::{center_fibrewise, Observable, PiecewiseCubic, StateDensities};
use crate::environment::{derive_seed, EnvironmentConfig};
use crate::jumps::{extract_jumps, simulate};
use crate::map::{mwell, paired_tent, MWellSpec, PairedTentParams, PiecewiseAffineMap};
use crate::ulam::{build_closed, build_open, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub max_violation: f64,
}

pub const PROPERTIES: [&str; 6] = [
    "row_stochastic",
    "substochastic_ordering",
    "neighbour_only_transitions",
    "centering_idempotence",
    "config_round_trip",
    "path_determinism",
];

fn random_tent(rng: &mut ChaCha8Rng) -> PiecewiseAffineMap {
    let a = rng.random_range(0.1..3.0);
    let b = rng.random_range(0.1..3.0);
    let eps = rng.random_range(0.0..0.3);
    paired_tent(PairedTentParams::new(a, b).unwrap(), eps).unwrap()
}

fn random_mwell(rng: &mut ChaCha8Rng) -> (PiecewiseAffineMap, usize) {
    let m = rng.random_range(2..=5);
    let mut beta = vec![vec![0.0; m]; m];
    for i in 0..m {
        if i > 0 {
            beta[i][i - 1] = rng.random_range(0.2..3.0);
        }
        if i + 1 < m {
            beta[i][i + 1] = rng.random_range(0.2..3.0);
        }
    }
    let spec = MWellSpec { m, well_slope: rng.random_range(1.5..4.0), hole_lengths: beta };
    (mwell(&spec, rng.random_range(0.01..0.15), 1.0).unwrap(), m)
}

fn random_map(rng: &mut ChaCha8Rng) -> PiecewiseAffineMap {
    if rng.random_bool(0.5) {
        random_tent(rng)
    } else {
        random_mwell(rng).0
    }
}

fn random_grid(rng: &mut ChaCha8Rng, map: &PiecewiseAffineMap) -> Grid {
    let n = rng.random_range(16..256);
    Grid::for_maps(std::slice::from_ref(map), n).unwrap()
}

fn run_one(name: &str, cases: usize, seed: u64, check: impl Fn(&mut ChaCha8Rng) -> f64) -> PropertyOutcome {
    let mut failures = 0;
    let mut max_violation: f64 = 0.0;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, case as u64));
        let v = check(&mut rng);
        if !(v <= 0.0) {
            failures += 1;
        }
        max_violation = max_violation.max(if v.is_nan() { f64::INFINITY } else { v });
    }
    PropertyOutcome { name: name.into(), cases, failures, max_violation }
}

/// Each check returns how far the case is from satisfying its property
/// (zero or negative means satisfied).
pub fn run_properties(cfg: &ExperimentConfig) -> Vec<PropertyOutcome> {
    let cases = cfg.properties.cases;
    let seed = cfg.criterion_seed(10);
    let s = |k: u64| derive_seed(seed, 1000 + k);
    vec![
        run_one(PROPERTIES[0], cases, s(0), |rng| {
            let map = random_map(rng);
            let grid = random_grid(rng, &map);
            let op = build_closed(&map, &grid).unwrap();
            let dev = op.matrix.row_sums().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
            let neg = op.matrix.coo().iter().any(|e| e.2 < 0.0);
            if neg { 1.0 } else { dev - 1e-12 }
        }),
        run_one(PROPERTIES[1], cases, s(1), |rng| {
            let map = random_map(rng);
            let grid = random_grid(rng, &map);
            let closed = build_closed(&map, &grid).unwrap();
            let j = rng.random_range(0..map.m());
            let open = build_open(&map, j, &grid).unwrap();
            let over = open
                .matrix
                .coo()
                .iter()
                .map(|&(r, c, v)| v - closed.matrix.get(r, c))
                .fold(0.0, f64::max);
            let rows = open.matrix.row_sums().iter().map(|r| r - 1.0).fold(0.0, f64::max);
            over.max(rows) - 1e-12
        }),
        run_one(PROPERTIES[2], cases, s(2), |rng| {
            let (map, _) = random_mwell(rng);
            let path = crate::environment::FiberPath::sample(
                &crate::environment::Alphabet::constant("w"),
                rng.random(),
                0,
                5000,
            )
            .unwrap();
            let x0 = rng.random_range(0.0..map.state_space().hi);
            let traj = simulate(std::slice::from_ref(&map), &path, 0.0, x0, 5000).unwrap();
            if extract_jumps(&traj.labels).is_ok() { 0.0 } else { 1.0 }
        }),
        run_one(PROPERTIES[3], cases, s(3), |rng| {
            let map = paired_tent(PairedTentParams::new(1.0, 1.0).unwrap(), 0.0).unwrap();
            let dens = StateDensities::uniform(&map).unwrap();
            let mut coeff = || [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0, 0.0];
            let f = PiecewiseCubic::new(vec![-1.0, -0.4, 0.0, 1.0], vec![coeff(), coeff(), coeff()]).unwrap();
            let g = PiecewiseCubic::new(vec![-1.0, 1.0], vec![coeff()]).unwrap();
            let psi = Observable::new(vec![f, g]).unwrap();
            let p0 = rng.random_range(0.05..0.95);
            let p = [p0, 1.0 - p0];
            let once = center_fibrewise(&psi, &p, &dens).unwrap();
            let twice = center_fibrewise(&once, &p, &dens).unwrap();
            if once == twice { 0.0 } else { 1.0 }
        }),
        run_one(PROPERTIES[4], cases, s(4), |rng| {
            let k = rng.random_range(1..4);
            let rows: Vec<(String, f64, f64, f64)> = (0..k)
                .map(|i| (format!("s{i}"), 1.0 / k as f64, rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)))
                .collect();
            let refs: Vec<(&str, f64, f64, f64)> = rows.iter().map(|r| (r.0.as_str(), r.1, r.2, r.3)).collect();
            let env = EnvironmentConfig::paired_tent(&refs, rng.random());
            let mut exp = ExperimentConfig::new(Scenario::Properties, rng.random());
            exp.diffusion.env = env.clone();
            exp.jumps.holding.eps = rng.random_range(0.001..0.1);
            let env_back: EnvironmentConfig = serde_json::from_str(&serde_json::to_string(&env).unwrap()).unwrap();
            let exp_back = ExperimentConfig::from_json(&exp.to_json()).unwrap();
            if env_back == env && exp_back == exp && exp_back.hash() == exp.hash() { 0.0 } else { 1.0 }
        }),
        run_one(PROPERTIES[5], cases, s(5), |rng| {
            let q = rng.random_range(0.05..0.95);
            let cfg = EnvironmentConfig::paired_tent(&[("x", q, 1.0, 1.0), ("y", 1.0 - q, 2.0, 0.5)], rng.random());
            let env = cfg.build().unwrap();
            let lo = rng.random_range(-500..0);
            let hi = rng.random_range(1..500);
            let a = env.path(lo, hi).unwrap();
            let b = env.path(lo, hi).unwrap();
            // a sub-window agrees with the big one
            let c = env.path(lo / 2, hi / 2).unwrap();
            let same = a == b && (lo / 2..=hi / 2).all(|k| c.at(k) == a.at(k));
            if same { 0.0 } else { 1.0 }
        }),
    ]
}
