//! Observables, fibrewise centring, and quenched variance estimates for
//! Birkhoff sums of the random maps.
//!
//! Two independent routes estimate the same variance: direct simulation of
//! Birkhoff sums over many fibre paths, and the autocovariance series
//! evaluated with Ulam transfer operators of the closed cocycle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::environment::{derive_seed, EnvError, Environment, FiberPath};
use crate::map::{Interval, PiecewiseAffineMap};
use crate::markov::{self, MarkovError};
use crate::ulam::{self, Cocycle, DensityVector, Grid, UlamError};

/// Stream offset for initial-point draws in the variance experiments.
const X0_STREAM: u64 = 0x2545_F491_4F6C_DD1D;

/// Minimum number of expected jumps a Birkhoff sum must span.
pub const MIN_EXPECTED_JUMPS: f64 = 20.0;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid observable: {0}")]
    Observable(String),
    #[error("n = {n} spans only {expected:.1} expected jumps; need n >= {required}")]
    TooShort { n: usize, expected: f64, required: usize },
    #[error("no observed decay of the autocovariances (fitted rate {theta})")]
    NoDecay { theta: f64 },
    #[error("degenerate variance {0:e}")]
    Degenerate(f64),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ulam(#[from] UlamError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// Piecewise cubic `Σ_i c_i x^i` on consecutive pieces `[breaks[k], breaks[k+1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCubic {
    pub breaks: Vec<f64>,
    pub coeffs: Vec<[f64; 4]>,
}

fn horner(c: &[f64; 4], x: f64) -> f64 {
    ((c[3] * x + c[2]) * x + c[1]) * x + c[0]
}

fn antiderivative(c: &[f64; 4], x: f64) -> f64 {
    (((c[3] / 4.0 * x + c[2] / 3.0) * x + c[1] / 2.0) * x + c[0]) * x
}

/// Points of `[a, b]` where a cubic can attain a local extremum.
fn critical_points(c: &[f64; 4], a: f64, b: f64) -> Vec<f64> {
    // p'(x) = 3 c3 x² + 2 c2 x + c1
    let (qa, qb, qc) = (3.0 * c[3], 2.0 * c[2], c[1]);
    let mut roots = Vec::new();
    if qa.abs() > 0.0 {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let r = disc.sqrt();
            roots.push((-qb - r) / (2.0 * qa));
            roots.push((-qb + r) / (2.0 * qa));
        }
    } else if qb.abs() > 0.0 {
        roots.push(-qc / qb);
    }
    let mut pts = vec![a];
    pts.extend(roots.into_iter().filter(|&r| r > a && r < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    pts
}

impl PiecewiseCubic {
    pub fn new(breaks: Vec<f64>, coeffs: Vec<[f64; 4]>) -> Result<Self, DiffusionError> {
        if breaks.len() < 2 || coeffs.len() + 1 != breaks.len() {
            return Err(DiffusionError::Observable("need one coefficient row per piece".into()));
        }
        if breaks.windows(2).any(|w| !(w[0] < w[1])) || breaks.iter().any(|b| !b.is_finite()) {
            return Err(DiffusionError::Observable("breaks must be finite and increasing".into()));
        }
        if coeffs.iter().flatten().any(|c| !c.is_finite()) {
            return Err(DiffusionError::Observable("coefficients must be finite".into()));
        }
        Ok(Self { breaks, coeffs })
    }

    pub fn constant(lo: f64, hi: f64, c: f64) -> Self {
        Self { breaks: vec![lo, hi], coeffs: vec![[c, 0.0, 0.0, 0.0]] }
    }

    /// Constant `values[j]` on `[bounds[j], bounds[j+1]]`.
    pub fn step(bounds: &[f64], values: &[f64]) -> Result<Self, DiffusionError> {
        Self::new(bounds.to_vec(), values.iter().map(|&v| [v, 0.0, 0.0, 0.0]).collect())
    }

    fn piece(&self, x: f64) -> usize {
        let i = self.breaks[1..].partition_point(|&b| b <= x);
        i.min(self.coeffs.len() - 1)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        horner(&self.coeffs[self.piece(x)], x)
    }

    /// Exact `∫_iv p dLeb` (zero outside the breaks).
    pub fn integral(&self, iv: &Interval) -> f64 {
        let mut total = 0.0;
        for (k, c) in self.coeffs.iter().enumerate() {
            let lo = iv.lo.max(self.breaks[k]);
            let hi = iv.hi.min(self.breaks[k + 1]);
            if hi > lo {
                total += antiderivative(c, hi) - antiderivative(c, lo);
            }
        }
        total
    }

    /// Exact `∫_iv p² dLeb`.
    pub fn integral_sq(&self, iv: &Interval) -> f64 {
        let mut total = 0.0;
        for (k, c) in self.coeffs.iter().enumerate() {
            let lo = iv.lo.max(self.breaks[k]);
            let hi = iv.hi.min(self.breaks[k + 1]);
            if hi > lo {
                // square of a cubic has degree 6
                let mut sq = [0.0; 7];
                for i in 0..4 {
                    for j in 0..4 {
                        sq[i + j] += c[i] * c[j];
                    }
                }
                let f = |x: f64| sq.iter().enumerate().rev().fold(0.0, |acc, (i, a)| acc * x + a / (i as f64 + 1.0)) * x;
                total += f(hi) - f(lo);
            }
        }
        total
    }

    pub fn sup_norm(&self) -> f64 {
        let mut s: f64 = 0.0;
        for (k, c) in self.coeffs.iter().enumerate() {
            for x in critical_points(c, self.breaks[k], self.breaks[k + 1]) {
                s = s.max(horner(c, x).abs());
            }
        }
        s
    }

    /// Total variation including jumps at the breaks.
    pub fn variation(&self) -> f64 {
        let mut v = 0.0;
        for (k, c) in self.coeffs.iter().enumerate() {
            let pts = critical_points(c, self.breaks[k], self.breaks[k + 1]);
            v += pts.windows(2).map(|w| (horner(c, w[1]) - horner(c, w[0])).abs()).sum::<f64>();
            if k > 0 {
                let b = self.breaks[k];
                v += (horner(c, b) - horner(&self.coeffs[k - 1], b)).abs();
            }
        }
        v
    }

    fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.coeffs {
            row[0] -= c;
        }
        out
    }

    fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.coeffs {
            row.iter_mut().for_each(|v| *v *= s);
        }
        out
    }
}

/// Per-symbol observable `ψ_ω` with its sup norm and variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pieces: Vec<PiecewiseCubic>,
    sup_norm: f64,
    variation: f64,
}

impl Observable {
    pub fn new(pieces: Vec<PiecewiseCubic>) -> Result<Self, DiffusionError> {
        if pieces.is_empty() {
            return Err(DiffusionError::Observable("need one function per symbol".into()));
        }
        let sup_norm = pieces.iter().map(PiecewiseCubic::sup_norm).fold(0.0, f64::max);
        let variation = pieces.iter().map(PiecewiseCubic::variation).fold(0.0, f64::max);
        if !(sup_norm.is_finite() && variation.is_finite()) {
            return Err(DiffusionError::Observable("unbounded observable".into()));
        }
        Ok(Self { pieces, sup_norm, variation })
    }

    /// The same function for every symbol.
    pub fn uniform(n_symbols: usize, f: PiecewiseCubic) -> Result<Self, DiffusionError> {
        Self::new(vec![f; n_symbols])
    }

    /// Constant on each metastable state, the same for every symbol.
    pub fn state_values(n_symbols: usize, boundary: &[f64], values: &[f64]) -> Result<Self, DiffusionError> {
        Self::uniform(n_symbols, PiecewiseCubic::step(boundary, values)?)
    }

    pub fn n_symbols(&self) -> usize {
        self.pieces.len()
    }

    pub fn symbol(&self, s: usize) -> &PiecewiseCubic {
        &self.pieces[s]
    }

    #[inline]
    pub fn eval(&self, s: usize, x: f64) -> f64 {
        self.pieces[s].eval(x)
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn variation(&self) -> f64 {
        self.variation
    }

    pub fn is_zero(&self) -> bool {
        self.sup_norm == 0.0
    }

    /// `c·ψ`.
    pub fn scaled(&self, c: f64) -> Result<Self, DiffusionError> {
        Self::new(self.pieces.iter().map(|p| p.scaled(c)).collect())
    }

    fn shifted(&self, shifts: &[f64]) -> Result<Self, DiffusionError> {
        Self::new(self.pieces.iter().zip(shifts).map(|(p, &c)| p.shifted(c)).collect())
    }

    /// `∫_cell ψ_s` for every grid cell.
    pub fn cell_integrals(&self, s: usize, grid: &Grid) -> Vec<f64> {
        (0..grid.n_cells()).map(|k| self.pieces[s].integral(&grid.cell(k))).collect()
    }
}

/// Unperturbed state densities `φ_j` as piecewise-constant densities.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDensities {
    pub grid: Grid,
    pub phis: Vec<DensityVector>,
}

impl StateDensities {
    /// Normalised Lebesgue measure on each state (the ACIMs of the built-in
    /// families), on the coarsest grid carrying the boundary points.
    pub fn uniform(map: &PiecewiseAffineMap) -> Result<Self, DiffusionError> {
        let grid = Grid::from_edges(map.boundary_points().to_vec())?;
        let phis = map
            .states()
            .iter()
            .map(|s| DensityVector::uniform_on(&grid, s))
            .collect::<Result<_, _>>()?;
        Ok(Self { grid, phis })
    }
}

/// `Ψ_ω(j) = ∫_{I_j} ψ_ω φ_j` per symbol, and its `ℙ`-average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiVector {
    pub per_symbol: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
}

pub fn psi_vector(psi: &Observable, dens: &StateDensities, probs: &[f64]) -> Result<PsiVector, DiffusionError> {
    if probs.len() != psi.n_symbols() {
        return Err(DiffusionError::Invalid(format!("{} probabilities for {} symbols", probs.len(), psi.n_symbols())));
    }
    let per_symbol: Vec<Vec<f64>> = (0..psi.n_symbols())
        .map(|s| {
            let cells = psi.cell_integrals(s, &dens.grid);
            dens.phis
                .iter()
                .map(|phi| phi.weights().iter().zip(&cells).map(|(w, c)| w * c).sum())
                .collect()
        })
        .collect();
    let m = dens.phis.len();
    let averaged = (0..m)
        .map(|j| probs.iter().zip(&per_symbol).map(|(q, v)| q * v[j]).sum())
        .collect();
    Ok(PsiVector { per_symbol, averaged })
}

/// Subtract `c_ω = Σ_j p_j Ψ_ω(j)` from each symbol. Shifts at rounding
/// level are skipped, which makes the operation idempotent.
pub fn center_fibrewise(psi: &Observable, p: &[f64], dens: &StateDensities) -> Result<Observable, DiffusionError> {
    if p.len() != dens.phis.len() {
        return Err(DiffusionError::Invalid(format!("{} weights for {} states", p.len(), dens.phis.len())));
    }
    let uniform_q = vec![1.0 / psi.n_symbols() as f64; psi.n_symbols()];
    let v = psi_vector(psi, dens, &uniform_q)?;
    let shifts: Vec<f64> = v
        .per_symbol
        .iter()
        .map(|row| {
            let c: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
            if c.abs() <= 1e-14 * psi.sup_norm().max(1.0) {
                0.0
            } else {
                c
            }
        })
        .collect();
    if shifts.iter().all(|&c| c == 0.0) {
        return Ok(psi.clone());
    }
    psi.shifted(&shifts)
}

/// `ψ̃_{σ^kω} = ψ_{σ^kω} − μ_{σ^kω}(ψ_{σ^kω})` for fibres `k0..k0+len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberCentering {
    pub k0: i64,
    pub shifts: Vec<f64>,
    /// Largest `|∫ψ̃ dμ̂|` over the fibres.
    pub residual: f64,
}

impl FiberCentering {
    #[inline]
    pub fn shift(&self, k: i64) -> f64 {
        self.shifts[(k - self.k0) as usize]
    }
}

/// Default depth of the forward push that approximates `μ_ω^ε`.
pub fn default_depth(eps: f64) -> usize {
    ulam::TripleOptions::for_eps(eps, 0).depth
}

/// Closed-cocycle masses at fibres `0..len`, starting from the converged
/// density at fibre 0.
fn closed_masses(
    cocycle: &Cocycle,
    path: &FiberPath,
    depth: usize,
    len: usize,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let (mut m, _) = ulam::equivariant_masses(cocycle, path, 0, depth, 1e-10)?;
    let mut out = Vec::with_capacity(len);
    let mut buf = vec![0.0; m.len()];
    for k in 0..len as i64 {
        out.push(m.clone());
        cocycle.push(path.at(k), &m, &mut buf);
        std::mem::swap(&mut m, &mut buf);
    }
    Ok(out)
}

/// Quenched means `μ̂_{σ^kω}^ε(ψ)` for `k = 0..len` from the Ulam equivariant
/// density of the closed cocycle; fails if that density has not converged.
pub fn eps_center(
    psi: &Observable,
    cocycle: &Cocycle,
    path: &FiberPath,
    depth: usize,
    len: usize,
) -> Result<FiberCentering, DiffusionError> {
    let grid = cocycle.grid();
    let cells: Vec<Vec<f64>> = (0..psi.n_symbols()).map(|s| psi.cell_integrals(s, grid)).collect();
    let (mut m, _) = ulam::equivariant_masses(cocycle, path, 0, depth, 1e-10)?;
    let mut buf = vec![0.0; m.len()];
    let mut shifts = Vec::with_capacity(len);
    let mut residual: f64 = 0.0;
    for k in 0..len as i64 {
        let s = path.at(k);
        let total: f64 = m.iter().sum();
        let mean: f64 = m
            .iter()
            .enumerate()
            .map(|(c, w)| w * cells[s][c] / grid.cell_len(c))
            .sum::<f64>()
            / total;
        let check: f64 = m
            .iter()
            .enumerate()
            .map(|(c, w)| w * (cells[s][c] / grid.cell_len(c) - mean))
            .sum::<f64>();
        residual = residual.max(check.abs());
        shifts.push(mean);
        cocycle.push(s, &m, &mut buf);
        std::mem::swap(&mut m, &mut buf);
    }
    Ok(FiberCentering { k0: 0, shifts, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Trajectory,
    OperatorSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub eps: f64,
    pub sigma2: f64,
    pub route: Route,
    /// Outer replicas (trajectory) or fibre samples (series).
    pub outer: usize,
    /// Initial points per replica (trajectory route only).
    pub inner: usize,
    /// Birkhoff length (trajectory) or truncation index (series).
    pub n: usize,
    pub stderr: f64,
    pub tail_bound: Option<f64>,
    pub theta: Option<f64>,
}

/// `Σ_j p_j r_j` of the averaged chain, if the environment has one.
fn mean_exit_rate(env: &Environment) -> Option<f64> {
    let beta = env.averaged_beta().ok()?;
    let g = markov::Generator::new(&beta).ok()?;
    let p = markov::stationary(&g).ok()?;
    Some((0..g.m()).map(|j| p.p[j] * g.exit_rate(j)).sum())
}

fn check_length(env: &Environment, eps: f64, n: usize) -> Result<(), DiffusionError> {
    if let Some(rate) = mean_exit_rate(env) {
        let expected = n as f64 * eps * rate;
        if expected < MIN_EXPECTED_JUMPS {
            return Err(DiffusionError::TooShort {
                n,
                expected,
                required: (MIN_EXPECTED_JUMPS / (eps * rate)).ceil() as usize,
            });
        }
    }
    Ok(())
}

fn check_symbols(env: &Environment, psi: &Observable) -> Result<(), DiffusionError> {
    if psi.n_symbols() != env.alphabet.len() {
        return Err(DiffusionError::Invalid(format!(
            "observable has {} symbols, environment {}",
            psi.n_symbols(),
            env.alphabet.len()
        )));
    }
    Ok(())
}

/// Birkhoff sum of `ψ` (minus optional per-fibre shifts) along fibres
/// `0..n`, after a burn-in from fibre `-depth` that carries a Lebesgue-random
/// initial point to the quenched stationary law.
fn birkhoff_sum(
    maps: &[PiecewiseAffineMap],
    psi: &Observable,
    path: &FiberPath,
    depth: usize,
    n: usize,
    x_init: f64,
    centering: Option<&FiberCentering>,
) -> f64 {
    let mut x = x_init;
    for k in -(depth as i64)..0 {
        x = maps[path.at(k)].eval_unchecked(x);
    }
    let mut sum = 0.0;
    for k in 0..n as i64 {
        let s = path.at(k);
        let mut v = psi.eval(s, x);
        if let Some(c) = centering {
            v -= c.shift(k);
        }
        sum += v;
        x = maps[s].eval_unchecked(x);
    }
    sum
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Settings of the trajectory route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOptions {
    pub n: usize,
    pub replicas: usize,
    pub inner: usize,
    pub depth: usize,
    pub seed: u64,
}

/// `Σ̂² = mean_r Var_r(S_n)/n`. Each replica is an independent fibre path;
/// within a replica `inner` initial points give an unbiased sample variance,
/// so the per-fibre centring constants cancel. The standard error is the
/// jackknife error of the replica mean (equal to the sample standard error).
pub fn variance_trajectory(
    env: &Environment,
    psi: &Observable,
    eps: f64,
    opts: &TrajectoryOptions,
) -> Result<VarianceEstimate, DiffusionError> {
    check_symbols(env, psi)?;
    if opts.inner < 2 || opts.replicas < 2 {
        return Err(DiffusionError::Invalid("need at least two replicas and two initial points".into()));
    }
    let base = VarianceEstimate {
        eps,
        sigma2: 0.0,
        route: Route::Trajectory,
        outer: opts.replicas,
        inner: opts.inner,
        n: opts.n,
        stderr: 0.0,
        tail_bound: None,
        theta: None,
    };
    if psi.is_zero() {
        return Ok(base);
    }
    check_length(env, eps, opts.n)?;
    let maps = env.maps(eps)?;
    let space = maps[0].state_space();
    let per_replica: Vec<f64> = (0..opts.replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<f64, DiffusionError> {
            let path = env.replica_path(r, -(opts.depth as i64), opts.n as i64)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed ^ X0_STREAM, r));
            let sums: Vec<f64> = (0..opts.inner)
                .map(|_| {
                    let x = space.lo + space.len() * rng.random::<f64>();
                    birkhoff_sum(&maps, psi, &path, opts.depth, opts.n, x, None)
                })
                .collect();
            let m = sums.iter().sum::<f64>() / sums.len() as f64;
            let var = sums.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (sums.len() as f64 - 1.0);
            Ok(var / opts.n as f64)
        })
        .collect::<Result<_, _>>()?;
    let (sigma2, stderr) = mean_and_stderr(&per_replica);
    Ok(VarianceEstimate { sigma2, stderr, ..base })
}

/// Settings of the operator-series route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesOptions {
    pub n_max: usize,
    pub fiber_samples: usize,
    pub depth: usize,
}

impl SeriesOptions {
    /// `n_max = ⌈8/(ε β*)⌉`.
    pub fn for_eps(eps: f64, beta_star: f64, fiber_samples: usize) -> Self {
        Self { n_max: (8.0 / (eps * beta_star)).ceil() as usize, fiber_samples, depth: default_depth(eps) }
    }
}

/// Autocovariances `C_n = ∫ L^{(n)}(ψ̃_0 φ_0) ψ̃_n`, `n = 0..=n_max`, along one path.
pub fn autocovariances(
    psi: &Observable,
    cocycle: &Cocycle,
    path: &FiberPath,
    depth: usize,
    n_max: usize,
) -> Result<Vec<f64>, DiffusionError> {
    let grid = cocycle.grid();
    let n_cells = grid.n_cells();
    let cells: Vec<Vec<f64>> = (0..psi.n_symbols()).map(|s| psi.cell_integrals(s, grid)).collect();
    let masses = closed_masses(cocycle, path, depth, n_max + 1)?;
    let avg = |s: usize, c: usize| cells[s][c] / grid.cell_len(c);
    let shift = |k: usize| -> f64 {
        let s = path.at(k as i64);
        let m = &masses[k];
        m.iter().enumerate().map(|(c, w)| w * avg(s, c)).sum::<f64>() / m.iter().sum::<f64>()
    };
    let s0 = path.at(0);
    let c0 = shift(0);
    let phi0 = &masses[0];
    // ∫ψ̃²φ uses the exact square on each cell
    let var0: f64 = (0..n_cells)
        .map(|c| {
            let cell = grid.cell(c);
            let len = cell.len();
            let sq = psi.symbol(s0).integral_sq(&cell) - 2.0 * c0 * cells[s0][c] + c0 * c0 * len;
            phi0[c] / len * sq
        })
        .sum();
    let mut g: Vec<f64> = (0..n_cells).map(|c| phi0[c] * (avg(s0, c) - c0)).collect();
    let mut buf = vec![0.0; n_cells];
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(var0);
    for k in 1..=n_max {
        cocycle.push(path.at(k as i64 - 1), &g, &mut buf);
        std::mem::swap(&mut g, &mut buf);
        let s = path.at(k as i64);
        let ck = shift(k);
        out.push(g.iter().enumerate().map(|(c, w)| w * (avg(s, c) - ck)).sum());
    }
    Ok(out)
}

/// Geometric rate of `|C_n|` fitted on the stretch where it is above the
/// noise floor (a fraction of `|C_0|`).
fn fit_rate(c: &[f64]) -> Option<f64> {
    let floor = c[0].abs() * 1e-9;
    let pts: Vec<(f64, f64)> = c
        .iter()
        .enumerate()
        .skip(1)
        .take_while(|(_, v)| v.abs() > floor)
        .map(|(i, v)| (i as f64, v.abs().ln()))
        .collect();
    if pts.len() < 5 {
        return None;
    }
    // use the second half, where the slowest mode dominates
    let pts = &pts[pts.len() / 2..];
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| (sxy / sxx).exp())
}

/// `Σ̂² = C_0 + 2 Σ_{n=1}^{n_max} C_n`, averaged over independent fibre
/// paths, with a geometric bound on the discarded tail.
pub fn variance_series(
    env: &Environment,
    psi: &Observable,
    eps: f64,
    opts: &SeriesOptions,
    grid: &Grid,
) -> Result<VarianceEstimate, DiffusionError> {
    check_symbols(env, psi)?;
    let base = VarianceEstimate {
        eps,
        sigma2: 0.0,
        route: Route::OperatorSeries,
        outer: opts.fiber_samples,
        inner: 1,
        n: opts.n_max,
        stderr: 0.0,
        tail_bound: Some(0.0),
        theta: None,
    };
    if psi.is_zero() {
        return Ok(base);
    }
    if opts.fiber_samples < 2 {
        return Err(DiffusionError::Invalid("need at least two fibre samples".into()));
    }
    let maps = env.maps(eps)?;
    let cocycle = Cocycle::closed(&maps, grid)?;
    let series: Vec<Vec<f64>> = (0..opts.fiber_samples as u64)
        .into_par_iter()
        .map(|f| {
            let path = env.replica_path(f, -(opts.depth as i64), opts.n_max as i64)?;
            autocovariances(psi, &cocycle, &path, opts.depth, opts.n_max)
        })
        .collect::<Result<_, DiffusionError>>()?;
    let sums: Vec<f64> = series
        .iter()
        .map(|c| c[0] + 2.0 * c[1..].iter().sum::<f64>())
        .collect();
    let (sigma2, stderr) = mean_and_stderr(&sums);
    let mean_c: Vec<f64> = (0..=opts.n_max)
        .map(|k| series.iter().map(|c| c[k]).sum::<f64>() / series.len() as f64)
        .collect();
    let theta = fit_rate(&mean_c);
    let tail_bound = match theta {
        Some(t) if t >= 1.0 => return Err(DiffusionError::NoDecay { theta: t }),
        Some(t) => {
            let last = mean_c.last().unwrap().abs();
            2.0 * last * t / (1.0 - t) + 1e-12 * sigma2.abs()
        }
        // decayed below the noise floor well before n_max
        None if mean_c.last().unwrap().abs() <= 1e-9 * mean_c[0].abs() => 1e-12 * sigma2.abs(),
        None => return Err(DiffusionError::NoDecay { theta: f64::NAN }),
    };
    Ok(VarianceEstimate { sigma2, stderr, tail_bound: Some(tail_bound), theta, ..base })
}

/// Normality diagnostics of `S_n/√n` along one quenched fibre path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub eps: f64,
    pub n: usize,
    pub samples: usize,
    pub sigma2: f64,
    pub mean: f64,
    pub ks_distance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub centering_residual: f64,
}

/// Kolmogorov–Smirnov distance of sorted data against a continuous CDF.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CltOptions {
    pub n: usize,
    pub samples: usize,
    pub depth: usize,
    pub seed: u64,
}

/// Birkhoff sums of `ψ̃^ε` (centred by [`eps_center`]) for many initial
/// points on the fixed path of `env`, compared with `N(0, Σ̂²)` where
/// `Σ̂² = mean S_n²/n`.
pub fn clt_check(
    env: &Environment,
    psi: &Observable,
    eps: f64,
    opts: &CltOptions,
    grid: &Grid,
) -> Result<(CltReport, Vec<f64>), DiffusionError> {
    check_symbols(env, psi)?;
    if psi.is_zero() {
        return Err(DiffusionError::Degenerate(0.0));
    }
    let maps = env.maps(eps)?;
    let path = env.path(-(opts.depth as i64), opts.n as i64)?;
    let cocycle = Cocycle::closed(&maps, grid)?;
    let centering = eps_center(psi, &cocycle, &path, opts.depth, opts.n)?;
    let space = maps[0].state_space();
    let scaled: Vec<f64> = (0..opts.samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed ^ X0_STREAM, i));
            let x = space.lo + space.len() * rng.random::<f64>();
            birkhoff_sum(&maps, psi, &path, opts.depth, opts.n, x, Some(&centering)) / (opts.n as f64).sqrt()
        })
        .collect();
    let report = normality(eps, opts.n, &scaled, centering.residual)?;
    Ok((report, scaled))
}

/// Moments and KS distance of samples of `S_n/√n` against `N(0, mean S²/n)`.
pub fn normality(eps: f64, n: usize, scaled: &[f64], centering_residual: f64) -> Result<CltReport, DiffusionError> {
    let k = scaled.len() as f64;
    let sigma2 = scaled.iter().map(|v| v * v).sum::<f64>() / k;
    if !(sigma2 > 1e-300) {
        return Err(DiffusionError::Degenerate(sigma2));
    }
    let mean = scaled.iter().sum::<f64>() / k;
    let m2 = scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    let m3 = scaled.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / k;
    let m4 = scaled.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / k;
    let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| DiffusionError::Invalid(e.to_string()))?;
    let mut sorted = scaled.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(CltReport {
        eps,
        n,
        samples: scaled.len(),
        sigma2,
        mean,
        ks_distance: ks_distance(&sorted, |x| normal.cdf(x)),
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        centering_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub sigma2: f64,
    pub eps_sigma2: f64,
    pub stderr: f64,
    pub route: Route,
    pub limit_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub limit_value: f64,
    /// `2 f(ε/2) − f(ε)` from the two smallest ε of the trajectory route.
    pub richardson: Option<f64>,
}

/// `lim ε Σ²` from the averaged chain: `2⟨p ⊙ ψ̄, ∫e^{tḠ}ψ̄⟩` with
/// `ψ̄ = ∫Ψ dℙ` for the unperturbed uniform state densities.
pub fn diffusion_limit(env: &Environment, psi: &Observable) -> Result<f64, DiffusionError> {
    let g = markov::Generator::new(&env.averaged_beta()?)?;
    let p = markov::stationary(&g)?;
    let dens = StateDensities::uniform(&env.maps(0.0)?[0])?;
    let v = psi_vector(psi, &dens, env.alphabet.probs())?;
    if v.averaged.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    Ok(markov::variance_limit(&p.p, &v.averaged, &g)?)
}

/// Trajectory estimates along `eps_list` with `n = ⌈n_scale/ε⌉`, the limit
/// value from the averaged chain, and a Richardson extrapolation.
pub fn diffusion_sweep(
    env: &Environment,
    psi: &Observable,
    eps_list: &[f64],
    n_scale: f64,
    opts: &TrajectoryOptions,
) -> Result<SweepReport, DiffusionError> {
    let limit_value = diffusion_limit(env, psi)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let o = TrajectoryOptions { n: (n_scale / eps).ceil() as usize, depth: default_depth(eps), ..*opts };
        let est = variance_trajectory(env, psi, eps, &o)?;
        rows.push(SweepRow {
            eps,
            sigma2: est.sigma2,
            eps_sigma2: eps * est.sigma2,
            stderr: eps * est.stderr,
            route: Route::Trajectory,
            limit_value,
        });
    }
    Ok(SweepReport { richardson: richardson(&rows), rows, limit_value })
}

/// Linear-in-ε extrapolation from the two smallest step sizes.
pub fn richardson(rows: &[SweepRow]) -> Option<f64> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.eps.total_cmp(&b.eps));
    let (a, b) = (sorted.first()?, sorted.get(1)?);
    let r = b.eps / a.eps;
    Some((r * a.eps_sigma2 - b.eps_sigma2) / (r - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::EnvironmentConfig;
    use crate::map::{paired_tent, PairedTentParams};
    use proptest::prelude::*;

    fn tent_env(rows: &[(&str, f64, f64, f64)], beta_star: f64) -> Environment {
        let mut cfg = EnvironmentConfig::paired_tent(rows, 17);
        cfg.beta_star = Some(beta_star);
        cfg.build().unwrap()
    }

    fn sign_psi(n: usize) -> Observable {
        Observable::state_values(n, &[-1.0, 0.0, 1.0], &[-1.0, 1.0]).unwrap()
    }

    fn tent_dens() -> StateDensities {
        StateDensities::uniform(&paired_tent(PairedTentParams::new(1.0, 1.0).unwrap(), 0.0).unwrap()).unwrap()
    }

    #[test]
    fn cubic_integrals_and_norms() {
        let p = PiecewiseCubic::new(vec![-1.0, 0.0, 1.0], vec![[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, -1.0]]).unwrap();
        assert!((p.integral(&Interval { lo: -1.0, hi: 1.0 }) - (-0.5 + 0.75)).abs() < 1e-15);
        assert!((p.integral_sq(&Interval { lo: -1.0, hi: 0.0 }) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.sup_norm(), 1.0);
        // -1 → 0 on the left, jump 1 at 0, then 1 → 0
        assert!((p.variation() - 3.0).abs() < 1e-15);
        let wiggle = PiecewiseCubic::new(vec![-1.0, 1.0], vec![[0.0, -3.0, 0.0, 4.0]]).unwrap();
        // 4x³ − 3x has extrema ±1 at x = ∓1/2
        assert!((wiggle.sup_norm() - 1.0).abs() < 1e-15);
        assert!((wiggle.variation() - 6.0).abs() < 1e-14);
        assert!(PiecewiseCubic::new(vec![0.0, 0.0], vec![[0.0; 4]]).is_err());
    }

    #[test]
    fn centering_examples() {
        let dens = tent_dens();
        let psi = sign_psi(1);
        assert_eq!(center_fibrewise(&psi, &[0.5, 0.5], &dens).unwrap(), psi);
        let one = Observable::uniform(1, PiecewiseCubic::constant(-1.0, 1.0, 1.0)).unwrap();
        let c = center_fibrewise(&one, &[0.5, 0.5], &dens).unwrap();
        assert!(c.is_zero());
        let x = Observable::uniform(1, PiecewiseCubic::new(vec![-1.0, 1.0], vec![[0.0, 1.0, 0.0, 0.0]]).unwrap()).unwrap();
        let v = psi_vector(&x, &dens, &[1.0]).unwrap();
        assert_eq!(v.per_symbol[0], vec![-0.5, 0.5]);
        assert_eq!(center_fibrewise(&x, &[0.5, 0.5], &dens).unwrap(), x);
    }

    #[test]
    fn eps_centering_constant_and_residual() {
        let env = tent_env(&[("lo", 0.5, 0.5, 1.5), ("hi", 0.5, 1.5, 0.5)], 0.5);
        let maps = env.maps(0.04).unwrap();
        let grid = Grid::for_maps(&maps, 1 << 10).unwrap();
        let coc = Cocycle::closed(&maps, &grid).unwrap();
        let path = env.path(-1000, 50).unwrap();
        let konst = Observable::uniform(2, PiecewiseCubic::constant(-1.0, 1.0, 3.0)).unwrap();
        let c = eps_center(&konst, &coc, &path, 1000, 50).unwrap();
        assert!(c.shifts.iter().all(|s| (s - 3.0).abs() < 1e-12));
        let c = eps_center(&sign_psi(2), &coc, &path, 1000, 50).unwrap();
        assert!(c.residual <= 1e-10);
        assert!(matches!(
            eps_center(&sign_psi(2), &coc, &path, 2, 50),
            Err(DiffusionError::Ulam(UlamError::NonConvergence { .. }))
        ));
    }

    #[test]
    fn eps_shift_approaches_fibrewise_constant() {
        // p = (2/3, 1/3) for ā = 2, b̄ = 1; ψ = x has c = −1/6
        let env = tent_env(&[("s", 1.0, 2.0, 1.0)], 0.5);
        let x = Observable::uniform(1, PiecewiseCubic::new(vec![-1.0, 1.0], vec![[0.0, 1.0, 0.0, 0.0]]).unwrap()).unwrap();
        let mut errs = Vec::new();
        for eps in [0.04, 0.02, 0.01] {
            let maps = env.maps(eps).unwrap();
            let grid = Grid::for_maps(&maps, 1 << 12).unwrap();
            let coc = Cocycle::closed(&maps, &grid).unwrap();
            let depth = default_depth(eps);
            let path = env.path(-(depth as i64), 1).unwrap();
            let c = eps_center(&x, &coc, &path, depth, 1).unwrap();
            errs.push((c.shifts[0] + 1.0 / 6.0).abs());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn zero_observable_gives_zero_variance() {
        let env = tent_env(&[("s", 1.0, 1.0, 1.0)], 0.5);
        let zero = Observable::uniform(1, PiecewiseCubic::constant(-1.0, 1.0, 0.0)).unwrap();
        let t = TrajectoryOptions { n: 10, replicas: 2, inner: 2, depth: 10, seed: 1 };
        assert_eq!(variance_trajectory(&env, &zero, 0.1, &t).unwrap().sigma2, 0.0);
        let grid = Grid::for_maps(&env.maps(0.1).unwrap(), 64).unwrap();
        let s = SeriesOptions { n_max: 10, fiber_samples: 2, depth: 10 };
        assert_eq!(variance_series(&env, &zero, 0.1, &s, &grid).unwrap().sigma2, 0.0);
        let c = CltOptions { n: 10, samples: 10, depth: 10, seed: 1 };
        assert!(matches!(clt_check(&env, &zero, 0.1, &c, &grid), Err(DiffusionError::Degenerate(_))));
    }

    #[test]
    fn short_sums_are_refused() {
        let env = tent_env(&[("s", 1.0, 1.0, 1.0)], 0.5);
        let t = TrajectoryOptions { n: 100, replicas: 2, inner: 2, depth: 10, seed: 1 };
        match variance_trajectory(&env, &sign_psi(1), 0.02, &t) {
            Err(DiffusionError::TooShort { required, .. }) => assert_eq!(required, 1000),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn limit_values() {
        let env = tent_env(&[("lo", 0.5, 0.5, 1.5), ("hi", 0.5, 1.5, 0.5)], 0.5);
        assert!((diffusion_limit(&env, &sign_psi(2)).unwrap() - 1.0).abs() < 1e-12);
        let env = tent_env(&[("s", 1.0, 2.0, 1.0)], 0.5);
        let psi = Observable::state_values(1, &[-1.0, 0.0, 1.0], &[-0.5, 1.0]).unwrap();
        assert!((diffusion_limit(&env, &psi).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let zero = Observable::state_values(1, &[-1.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(diffusion_limit(&env, &zero).unwrap(), 0.0);
    }

    #[test]
    fn series_and_trajectory_agree_at_moderate_eps() {
        let env = tent_env(&[("s", 1.0, 1.0, 1.0)], 0.5);
        let eps = 0.1;
        let psi = sign_psi(1);
        let grid = Grid::for_maps(&env.maps(eps).unwrap(), 1 << 11).unwrap();
        let s = variance_series(&env, &psi, eps, &SeriesOptions::for_eps(eps, 0.5, 4), &grid).unwrap();
        let t = TrajectoryOptions { n: 4000, replicas: 400, inner: 8, depth: 400, seed: 3 };
        let tr = variance_trajectory(&env, &psi, eps, &t).unwrap();
        let tol = 3.0 * (s.stderr.powi(2) + tr.stderr.powi(2)).sqrt() + s.tail_bound.unwrap();
        assert!((s.sigma2 - tr.sigma2).abs() <= tol, "series {s:?} trajectory {tr:?}");
        assert!(s.theta.unwrap() < 1.0);
        let doubled = SeriesOptions { n_max: 2 * s.n, ..SeriesOptions::for_eps(eps, 0.5, 4) };
        let s2 = variance_series(&env, &psi, eps, &doubled, &grid).unwrap();
        assert!((s2.sigma2 - s.sigma2).abs() <= s.tail_bound.unwrap());
    }

    #[test]
    fn ks_distance_of_exact_quantiles() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 1000;
        let q: Vec<f64> = (0..n).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
        assert!((ks_distance(&q, |x| normal.cdf(x)) - 0.5 / n as f64).abs() < 1e-9);
    }

    #[test]
    fn richardson_of_linear_data() {
        let row = |eps: f64| SweepRow {
            eps,
            sigma2: 0.0,
            eps_sigma2: 1.0 - 3.0 * eps,
            stderr: 0.0,
            route: Route::Trajectory,
            limit_value: 1.0,
        };
        let r = richardson(&[row(0.04), row(0.02), row(0.01)]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    fn random_observable(n_sym: usize) -> impl Strategy<Value = Observable> {
        proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 8), n_sym).prop_map(|rows| {
            Observable::new(
                rows.into_iter()
                    .map(|r| {
                        PiecewiseCubic::new(
                            vec![-1.0, -0.3, 0.0, 1.0],
                            vec![[r[0], r[1], 0.0, 0.0], [r[2], 0.0, r[3], 0.0], [r[4], r[5], r[6], r[7]]],
                        )
                        .unwrap()
                    })
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn prop_centering_is_idempotent(psi in random_observable(2), p0 in 0.05f64..0.95) {
            let dens = tent_dens();
            let p = [p0, 1.0 - p0];
            let once = center_fibrewise(&psi, &p, &dens).unwrap();
            let twice = center_fibrewise(&once, &p, &dens).unwrap();
            prop_assert_eq!(&once, &twice);
            let v = psi_vector(&once, &dens, &[0.5, 0.5]).unwrap();
            for row in &v.per_symbol {
                prop_assert!((row[0] * p[0] + row[1] * p[1]).abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_series_scales_quadratically(c in -3.0f64..3.0, seed in any::<u64>()) {
            let mut env = tent_env(&[("lo", 0.5, 0.5, 1.5), ("hi", 0.5, 1.5, 0.5)], 0.5);
            env.seed = seed;
            let maps = env.maps(0.2).unwrap();
            let grid = Grid::for_maps(&maps, 64).unwrap();
            let coc = Cocycle::closed(&maps, &grid).unwrap();
            let path = env.path(-200, 60).unwrap();
            let psi = sign_psi(2);
            let a = autocovariances(&psi, &coc, &path, 200, 60).unwrap();
            let b = autocovariances(&psi.scaled(c).unwrap(), &coc, &path, 200, 60).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y - c * c * x).abs() <= 1e-12 * (1.0 + x.abs()));
            }
            prop_assert!(a[0] >= 0.0);
        }
    }

    #[test]
    fn symbol_count_must_match() {
        let env = tent_env(&[("s", 1.0, 1.0, 1.0)], 0.5);
        let t = TrajectoryOptions { n: 10, replicas: 2, inner: 2, depth: 10, seed: 1 };
        assert!(variance_trajectory(&env, &sign_psi(2), 0.1, &t).is_err());
    }
}
