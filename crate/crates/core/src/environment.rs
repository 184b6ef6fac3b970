//! Bernoulli driving over a finite alphabet.
//!
//! The base system is the two-sided full shift with product measure. A fibre
//! `σ^k ω` is the symbol at index `k`; symbols are generated by a
//! counter-based stream keyed on `(seed, k)`, so any window (including
//! negative indices, the past of `ω`) is reproducible independently of the
//! order in which it was generated.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::{self, MWellSpec, MapError, PairedTentParams, PiecewiseAffineMap};

pub const DEFAULT_BETA_STAR: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid probabilities: {0}")]
    Probabilities(String),
    #[error("invalid window [{lo}, {hi}]")]
    Window { lo: i64, hi: i64 },
    #[error("index {k} outside path window [{lo}, {hi}]")]
    OutOfWindow { k: i64, lo: i64, hi: i64 },
    #[error("parameter assignment: {0}")]
    Assignment(String),
    #[error("beta[{i}][{j}] = {value} for symbol '{symbol}' is below the floor beta* = {floor}")]
    BelowFloor { symbol: String, i: usize, j: usize, value: f64, floor: f64 },
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Finite alphabet with i.i.d. symbol law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<String>,
    probs: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl Alphabet {
    pub fn new(symbols: Vec<String>, probs: Vec<f64>) -> Result<Self, EnvError> {
        if symbols.is_empty() {
            return Err(EnvError::Probabilities("alphabet needs at least one symbol".into()));
        }
        if symbols.len() != probs.len() {
            return Err(EnvError::Probabilities(format!(
                "{} symbols but {} probabilities",
                symbols.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(EnvError::Probabilities("probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EnvError::Probabilities(format!("probabilities sum to {total}")));
        }
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        Ok(Self { symbols, probs, cumulative })
    }

    /// Single-symbol alphabet.
    pub fn constant(name: &str) -> Self {
        Self::new(vec![name.to_string()], vec![1.0]).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// Inverse-CDF lookup for `u ∈ [0, 1)`.
    fn pick(&self, u: f64) -> u32 {
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.symbols.len() - 1) as u32
    }

    /// Probability-weighted average of a per-symbol quantity.
    pub fn average(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| p * f(i)).sum()
    }
}

/// Word position of index `k` in the keyed stream (two 32-bit words per draw).
fn word_pos(k: i64) -> u128 {
    ((k as i128 - i64::MIN as i128) as u128) * 2
}

fn unit_from(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Generate symbols for indices `lo..=hi`.
fn generate(alphabet: &Alphabet, seed: u64, lo: i64, hi: i64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(word_pos(lo));
    (lo..=hi).map(|_| alphabet.pick(unit_from(rng.next_u64()))).collect()
}

/// Symbol at a single index, without materialising a window.
pub fn symbol_at(alphabet: &Alphabet, seed: u64, k: i64) -> u32 {
    generate(alphabet, seed, k, k)[0]
}

/// Sequential reader of the driving sequence from index `k0` onwards,
/// producing the same symbols as [`FiberPath::sample`] without storing them.
#[derive(Debug, Clone)]
pub struct SymbolStream<'a> {
    alphabet: &'a Alphabet,
    rng: ChaCha8Rng,
}

impl<'a> SymbolStream<'a> {
    pub fn new(alphabet: &'a Alphabet, seed: u64, k0: i64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos(k0));
        Self { alphabet, rng }
    }

    #[inline]
    pub fn next_symbol(&mut self) -> usize {
        if self.alphabet.len() == 1 {
            return 0;
        }
        self.alphabet.pick(unit_from(self.rng.next_u64())) as usize
    }
}

/// A contiguous window `[k_lo, k_hi]` of the driving sequence `σ^k ω`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiberPath {
    seed: u64,
    k_lo: i64,
    symbols: Vec<u32>,
}

impl FiberPath {
    pub fn sample(alphabet: &Alphabet, seed: u64, k_lo: i64, k_hi: i64) -> Result<Self, EnvError> {
        if k_lo > k_hi {
            return Err(EnvError::Window { lo: k_lo, hi: k_hi });
        }
        Ok(Self { seed, k_lo, symbols: generate(alphabet, seed, k_lo, k_hi) })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn k_lo(&self) -> i64 {
        self.k_lo
    }

    pub fn k_hi(&self) -> i64 {
        self.k_lo + self.symbols.len() as i64 - 1
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn get(&self, k: i64) -> Result<usize, EnvError> {
        if k < self.k_lo || k > self.k_hi() {
            return Err(EnvError::OutOfWindow { k, lo: self.k_lo, hi: self.k_hi() });
        }
        Ok(self.symbols[(k - self.k_lo) as usize] as usize)
    }

    /// Unchecked lookup for hot loops; panics outside the window.
    #[inline]
    pub fn at(&self, k: i64) -> usize {
        self.symbols[(k - self.k_lo) as usize] as usize
    }

    /// Grow the window to cover `[lo, hi]`, keeping existing symbols.
    pub fn extend(&mut self, alphabet: &Alphabet, lo: i64, hi: i64) {
        if lo < self.k_lo {
            let mut front = generate(alphabet, self.seed, lo, self.k_lo - 1);
            front.extend_from_slice(&self.symbols);
            self.symbols = front;
            self.k_lo = lo;
        }
        let cur_hi = self.k_hi();
        if hi > cur_hi {
            self.symbols.extend(generate(alphabet, self.seed, cur_hi + 1, hi));
        }
    }

    pub fn contains(&self, lo: i64, hi: i64) -> bool {
        lo >= self.k_lo && hi <= self.k_hi()
    }
}

/// Per-symbol map parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamAssignment {
    /// `T_ω^ε = T_{ε a_ω, ε b_ω}`; β_{L,R} = b, β_{R,L} = a.
    PairedTent(Vec<PairedTentParams>),
    /// m-well testbed with a β matrix per symbol.
    MWell { m: usize, well_slope: f64, betas: Vec<Vec<Vec<f64>>> },
    /// User maps, independent of ε; β is not available in closed form.
    Custom(Vec<map::CustomMapParams>),
}

impl ParamAssignment {
    pub fn n_symbols(&self) -> usize {
        match self {
            ParamAssignment::PairedTent(v) => v.len(),
            ParamAssignment::MWell { betas, .. } => betas.len(),
            ParamAssignment::Custom(v) => v.len(),
        }
    }

    /// β matrix of symbol `s`.
    pub fn beta(&self, s: usize) -> Result<Vec<Vec<f64>>, EnvError> {
        match self {
            ParamAssignment::PairedTent(v) => {
                let p = v[s];
                Ok(vec![vec![0.0, p.b], vec![p.a, 0.0]])
            }
            ParamAssignment::MWell { betas, .. } => Ok(betas[s].clone()),
            ParamAssignment::Custom(_) => {
                Err(EnvError::Assignment("custom maps carry no beta prescription".into()))
            }
        }
    }

    pub fn m(&self) -> usize {
        match self {
            ParamAssignment::PairedTent(_) => 2,
            ParamAssignment::MWell { m, .. } => *m,
            ParamAssignment::Custom(v) => v.first().map(|c| c.boundary_points.len() - 1).unwrap_or(0),
        }
    }

    pub fn build_map(&self, s: usize, eps: f64) -> Result<PiecewiseAffineMap, EnvError> {
        Ok(match self {
            ParamAssignment::PairedTent(v) => map::paired_tent(v[s], eps)?,
            ParamAssignment::MWell { m, well_slope, betas } => {
                let spec = MWellSpec { m: *m, well_slope: *well_slope, hole_lengths: betas[s].clone() };
                map::mwell(&spec, eps, 1.0)?
            }
            ParamAssignment::Custom(v) => v[s].build()?,
        })
    }

    /// Check the β floor on every neighbour position, for every symbol.
    pub fn validate(&self, alphabet: &Alphabet, beta_star: f64) -> Result<(), EnvError> {
        if self.n_symbols() != alphabet.len() {
            return Err(EnvError::Assignment(format!(
                "{} parameter sets for {} symbols",
                self.n_symbols(),
                alphabet.len()
            )));
        }
        if let ParamAssignment::Custom(v) = self {
            for c in v {
                c.build()?;
            }
            return Ok(());
        }
        let m = self.m();
        for s in 0..self.n_symbols() {
            let beta = self.beta(s)?;
            if beta.len() != m || beta.iter().any(|r| r.len() != m) {
                return Err(EnvError::Assignment(format!("beta matrix of symbol {s} must be {m} x {m}")));
            }
            for i in 0..m {
                for j in 0..m {
                    let v = beta[i][j];
                    if i.abs_diff(j) == 1 {
                        if !(v >= beta_star) {
                            return Err(EnvError::BelowFloor {
                                symbol: alphabet.symbols()[s].clone(),
                                i,
                                j,
                                value: v,
                                floor: beta_star,
                            });
                        }
                    } else if v != 0.0 {
                        return Err(EnvError::Map(MapError::NonNeighbour { i, j, value: v }));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Driving system plus per-symbol map parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub alphabet: Alphabet,
    pub assignment: ParamAssignment,
    pub beta_star: f64,
    pub seed: u64,
}

impl Environment {
    pub fn new(alphabet: Alphabet, assignment: ParamAssignment, beta_star: f64, seed: u64) -> Result<Self, EnvError> {
        if !(beta_star > 0.0) {
            return Err(EnvError::Assignment(format!("beta* must be positive (got {beta_star})")));
        }
        assignment.validate(&alphabet, beta_star)?;
        Ok(Self { alphabet, assignment, beta_star, seed })
    }

    /// Paired tents with one `(a, b)` per symbol.
    pub fn paired_tent(symbols: &[(&str, f64, f64, f64)], seed: u64) -> Result<Self, EnvError> {
        let alphabet = Alphabet::new(
            symbols.iter().map(|s| s.0.to_string()).collect(),
            symbols.iter().map(|s| s.1).collect(),
        )?;
        let params = symbols
            .iter()
            .map(|s| PairedTentParams::new(s.2, s.3))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(alphabet, ParamAssignment::PairedTent(params), DEFAULT_BETA_STAR, seed)
    }

    pub fn m(&self) -> usize {
        self.assignment.m()
    }

    /// One map per symbol at perturbation size `eps`.
    pub fn maps(&self, eps: f64) -> Result<Vec<PiecewiseAffineMap>, EnvError> {
        (0..self.alphabet.len()).map(|s| self.assignment.build_map(s, eps)).collect()
    }

    pub fn path(&self, k_lo: i64, k_hi: i64) -> Result<FiberPath, EnvError> {
        FiberPath::sample(&self.alphabet, self.seed, k_lo, k_hi)
    }

    /// Path for an independent replica (a different ω).
    pub fn replica_path(&self, replica: u64, k_lo: i64, k_hi: i64) -> Result<FiberPath, EnvError> {
        FiberPath::sample(&self.alphabet, derive_seed(self.seed, replica), k_lo, k_hi)
    }

    pub fn averaged_beta(&self) -> Result<Vec<Vec<f64>>, EnvError> {
        averaged_beta(&self.assignment, &self.alphabet)
    }
}

/// `β̄_{ij} = Σ_α q_α β_{i,j,α}`.
pub fn averaged_beta(assignment: &ParamAssignment, alphabet: &Alphabet) -> Result<Vec<Vec<f64>>, EnvError> {
    let m = assignment.m();
    let mut out = vec![vec![0.0; m]; m];
    for (s, q) in alphabet.probs().iter().enumerate() {
        let beta = assignment.beta(s)?;
        for i in 0..m {
            for j in 0..m {
                out[i][j] += q * beta[i][j];
            }
        }
    }
    Ok(out)
}

/// The map attached to the symbol at fibre `k`.
pub fn fiber_map(env: &Environment, path: &FiberPath, k: i64, eps: f64) -> Result<PiecewiseAffineMap, EnvError> {
    env.assignment.build_map(path.get(k)?, eps)
}

/// SplitMix64 finaliser; derives independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-symbol parameters as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SymbolParams {
    Tent { a: f64, b: f64 },
    Beta { beta: Vec<Vec<f64>> },
    Custom { map: map::CustomMapParams },
}

/// `{symbols, probs, params: {symbol: {a,b} | {beta} | {map}}, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub symbols: Vec<String>,
    pub probs: Vec<f64>,
    pub params: BTreeMap<String, SymbolParams>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub well_slope: Option<f64>,
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<Environment, EnvError> {
        let alphabet = Alphabet::new(self.symbols.clone(), self.probs.clone())?;
        let per_symbol: Vec<&SymbolParams> = self
            .symbols
            .iter()
            .map(|s| {
                self.params
                    .get(s)
                    .ok_or_else(|| EnvError::Assignment(format!("no parameters for symbol '{s}'")))
            })
            .collect::<Result<_, _>>()?;
        let assignment = match per_symbol[0] {
            SymbolParams::Tent { .. } => ParamAssignment::PairedTent(
                per_symbol
                    .iter()
                    .map(|p| match p {
                        SymbolParams::Tent { a, b } => Ok(PairedTentParams::new(*a, *b)?),
                        _ => Err(EnvError::Assignment("mixed parameter kinds".into())),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            SymbolParams::Beta { beta } => ParamAssignment::MWell {
                m: beta.len(),
                well_slope: self.well_slope.unwrap_or_else(map::default_well_slope),
                betas: per_symbol
                    .iter()
                    .map(|p| match p {
                        SymbolParams::Beta { beta } => Ok(beta.clone()),
                        _ => Err(EnvError::Assignment("mixed parameter kinds".into())),
                    })
                    .collect::<Result<_, _>>()?,
            },
            SymbolParams::Custom { .. } => ParamAssignment::Custom(
                per_symbol
                    .iter()
                    .map(|p| match p {
                        SymbolParams::Custom { map } => Ok(map.clone()),
                        _ => Err(EnvError::Assignment("mixed parameter kinds".into())),
                    })
                    .collect::<Result<_, _>>()?,
            ),
        };
        Environment::new(alphabet, assignment, self.beta_star.unwrap_or(DEFAULT_BETA_STAR), self.seed)
    }

    /// Paired-tent configuration from `(symbol, prob, a, b)` rows.
    pub fn paired_tent(rows: &[(&str, f64, f64, f64)], seed: u64) -> Self {
        Self {
            symbols: rows.iter().map(|r| r.0.to_string()).collect(),
            probs: rows.iter().map(|r| r.1).collect(),
            params: rows
                .iter()
                .map(|r| (r.0.to_string(), SymbolParams::Tent { a: r.2, b: r.3 }))
                .collect(),
            seed,
            beta_star: None,
            well_slope: None,
        }
    }

    /// m-well configuration from `(symbol, prob, beta)` rows.
    pub fn m_well(rows: &[(&str, f64, Vec<Vec<f64>>)], seed: u64) -> Self {
        Self {
            symbols: rows.iter().map(|r| r.0.to_string()).collect(),
            probs: rows.iter().map(|r| r.1).collect(),
            params: rows
                .iter()
                .map(|r| (r.0.to_string(), SymbolParams::Beta { beta: r.2.clone() }))
                .collect(),
            seed,
            beta_star: None,
            well_slope: None,
        }
    }
}
