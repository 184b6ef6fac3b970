//! The averaged Markov jump process on the metastable states.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("eps = {eps} too large: diagonal entry {row} would be {value}")]
    EpsTooLarge { eps: f64, row: usize, value: f64 },
    #[error("invalid rates: {0}")]
    Rates(String),
    #[error("generator is reducible")]
    Reducible,
    #[error("vector is not centred: pi^T v = {0:e}")]
    NotCentred(f64),
    #[error("singular linear system")]
    Singular,
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("invalid query: {0}")]
    Query(String),
}

fn square(beta: &[Vec<f64>]) -> Result<usize, MarkovError> {
    let m = beta.len();
    if m == 0 || beta.iter().any(|r| r.len() != m) {
        return Err(MarkovError::Shape(format!("expected a square matrix, got {m} rows")));
    }
    Ok(m)
}

fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
}

/// Row-stochastic tridiagonal matrix `M^ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(pub DMatrix<f64>);

impl TransitionMatrix {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0)
    }
}

/// `M_{ij} = ε β_{ij}` off the diagonal, `1 - Σ_{j≠i} ε β_{ij}` on it.
pub fn build_m(beta: &[Vec<f64>], eps: f64) -> Result<TransitionMatrix, MarkovError> {
    let m = square(beta)?;
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut off = 0.0;
        for j in 0..m {
            if i != j {
                let v = eps * beta[i][j];
                out[(i, j)] = v;
                off += v;
            }
        }
        let diag = 1.0 - off;
        if diag < 0.0 {
            return Err(MarkovError::EpsTooLarge { eps, row: i, value: diag });
        }
        out[(i, i)] = diag;
    }
    Ok(TransitionMatrix(out))
}

/// Tridiagonal generator `Ḡ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator(DMatrix<f64>);

impl Generator {
    pub fn new(beta_bar: &[Vec<f64>]) -> Result<Self, MarkovError> {
        let m = square(beta_bar)?;
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            let mut exit = 0.0;
            for j in 0..m {
                let v = beta_bar[i][j];
                if i == j {
                    continue;
                }
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(MarkovError::Rates(format!("rate ({i},{j}) = {v}")));
                }
                if v != 0.0 && i.abs_diff(j) != 1 {
                    return Err(MarkovError::Rates(format!("rate ({i},{j}) = {v} is not between neighbours")));
                }
                g[(i, j)] = v;
                exit += v;
            }
            g[(i, i)] = -exit;
        }
        Ok(Self(g))
    }

    /// Two-state generator `[[−b, b], [a, −a]]`.
    pub fn two_state(a: f64, b: f64) -> Result<Self, MarkovError> {
        Self::new(&[vec![0.0, b], vec![a, 0.0]])
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0)
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Exit rate `r_i = −Ḡ_ii`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.0[(i, i)]
    }

    /// Every state reaches every other through positive rates.
    pub fn is_irreducible(&self) -> bool {
        let m = self.m();
        (0..m).all(|start| {
            let mut seen = vec![false; m];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                for j in 0..m {
                    if i != j && self.0[(i, j)] > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.iter().all(|&s| s)
        })
    }
}

/// Stationary law `p` with `pᵀḠ = 0`, `Σ p = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDist {
    pub p: Vec<f64>,
}

impl StationaryDist {
    /// `‖pᵀ Ḡ diag(Ḡ)^{-1}‖_∞`.
    pub fn residual(&self, g: &Generator) -> f64 {
        let m = g.m();
        (0..m)
            .map(|j| {
                let s: f64 = (0..m).map(|i| self.p[i] * g.rate(i, j)).sum();
                (s / g.rate(j, j)).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Solve the null-space problem with the last equation replaced by the
/// normalisation `Σ p = 1`.
pub fn stationary(g: &Generator) -> Result<StationaryDist, MarkovError> {
    if !g.is_irreducible() {
        return Err(MarkovError::Reducible);
    }
    let m = g.m();
    let mut a = g.0.transpose();
    for j in 0..m {
        a[(m - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(m);
    rhs[m - 1] = 1.0;
    let p = a.lu().solve(&rhs).ok_or(MarkovError::Singular)?;
    Ok(StationaryDist { p: p.iter().map(|v| v.max(0.0)).collect() })
}

/// Stationary law of a birth-death generator by detailed balance,
/// `p_{i+1} Ḡ_{i+1,i} = p_i Ḡ_{i,i+1}`.
pub fn stationary_detailed_balance(g: &Generator) -> Result<StationaryDist, MarkovError> {
    if !g.is_irreducible() {
        return Err(MarkovError::Reducible);
    }
    let m = g.m();
    let mut p = vec![1.0; m];
    for i in 0..m - 1 {
        p[i + 1] = p[i] * g.rate(i, i + 1) / g.rate(i + 1, i);
    }
    let s: f64 = p.iter().sum();
    Ok(StationaryDist { p: p.into_iter().map(|v| v / s).collect() })
}

/// Padé [6/6] coefficients `c_k` of `exp`.
const PADE6: [f64; 7] = [
    1.0,
    1.0 / 2.0,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// `e^{tA}` by scaling and squaring with a diagonal Padé approximant.
pub fn expm_matrix(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, MarkovError> {
    if !(t >= 0.0) {
        return Err(MarkovError::NegativeTime(t));
    }
    let n = a.nrows();
    let at = a * t;
    let norm = (0..n)
        .map(|j| at.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let x = at / 2f64.powi(squarings);
    let id = DMatrix::<f64>::identity(n, n);
    let mut num = id.clone() * PADE6[0];
    let mut den = id.clone() * PADE6[0];
    let mut pow = id;
    for (k, c) in PADE6.iter().enumerate().skip(1) {
        pow = &pow * &x;
        num += &pow * *c;
        den += &pow * (if k % 2 == 0 { *c } else { -*c });
    }
    let mut e = den.lu().solve(&num).ok_or(MarkovError::Singular)?;
    for _ in 0..squarings {
        e = &e * &e;
    }
    Ok(e)
}

/// `P(t) = e^{tḠ}`.
pub fn expm(g: &Generator, t: f64) -> Result<TransitionMatrix, MarkovError> {
    expm_matrix(&g.0, t).map(TransitionMatrix)
}

/// Exit rates and jump probabilities of the averaged chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpOracle {
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub rates: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
}

impl JumpOracle {
    pub fn new(g: &Generator) -> Result<Self, MarkovError> {
        let p = stationary(g)?;
        let m = g.m();
        let rates: Vec<f64> = (0..m).map(|i| g.exit_rate(i)).collect();
        let targets = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 0.0 } else { g.rate(i, j) / rates[i] }).collect())
            .collect();
        Ok(Self { g: g.rows(), p: p.p, rates, targets })
    }

    pub fn m(&self) -> usize {
        self.rates.len()
    }
}

/// Closed interval `[a, b]` for a rescaled holding time; `b` may be `∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub a: f64,
    #[serde(with = "crate::markov::inf_as_null")]
    pub b: f64,
}

impl Window {
    pub fn new(a: f64, b: f64) -> Result<Self, MarkovError> {
        if !(a >= 0.0 && b >= a) || a.is_infinite() {
            return Err(MarkovError::Query(format!("bad window [{a}, {b}]")));
        }
        Ok(Self { a, b })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.a <= x && x <= self.b
    }
}

/// JSON has no infinity; an unbounded right end is written as `null`.
pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// A `p`-step jump query: windows for the rescaled holding times and the
/// target states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpQuery {
    pub j0: usize,
    pub deltas: Vec<Window>,
    pub targets: Vec<usize>,
}

impl JumpQuery {
    pub fn new(j0: usize, deltas: Vec<Window>, targets: Vec<usize>) -> Result<Self, MarkovError> {
        if deltas.is_empty() || deltas.len() != targets.len() {
            return Err(MarkovError::Query("need one window per target, at least one".into()));
        }
        Ok(Self { j0, deltas, targets })
    }

    pub fn p(&self) -> usize {
        self.targets.len()
    }
}

/// `Π_k (e^{−a_k r} − e^{−b_k r}) · Ḡ_{s,r_k} / r` along `s_0 = j0, s_k = r_k`.
/// Non-neighbour or repeated targets have probability zero.
pub fn jump_path_probability(oracle: &JumpOracle, query: &JumpQuery) -> Result<f64, MarkovError> {
    let m = oracle.m();
    if query.j0 >= m || query.targets.iter().any(|&r| r >= m) {
        return Err(MarkovError::Query(format!("state index out of range (m = {m})")));
    }
    let mut s = query.j0;
    let mut prob = 1.0;
    for (w, &r) in query.deltas.iter().zip(&query.targets) {
        if r == s || r.abs_diff(s) != 1 {
            return Ok(0.0);
        }
        let rate = oracle.rates[s];
        let upper = if w.b.is_infinite() { 0.0 } else { (-w.b * rate).exp() };
        prob *= ((-w.a * rate).exp() - upper) * oracle.targets[s][r];
        s = r;
    }
    Ok(prob)
}

/// Unique `x` with `Ḡx = −v` and `πᵀx = 0`, i.e. `∫_0^∞ e^{tḠ} v dt` for
/// centred `v`.
pub fn fundamental_solve(g: &Generator, v: &[f64]) -> Result<Vec<f64>, MarkovError> {
    let m = g.m();
    if v.len() != m {
        return Err(MarkovError::Shape(format!("vector of length {} for {m} states", v.len())));
    }
    let pi = stationary(g)?.p;
    let mean: f64 = pi.iter().zip(v).map(|(a, b)| a * b).sum();
    let scale = v.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(1.0);
    if mean.abs() > 1e-12 * scale {
        return Err(MarkovError::NotCentred(mean));
    }
    // [[G, 1], [πᵀ, 0]] [x; c] = [−v; 0]
    let mut a = DMatrix::zeros(m + 1, m + 1);
    a.view_mut((0, 0), (m, m)).copy_from(&g.0);
    for i in 0..m {
        a[(i, m)] = 1.0;
        a[(m, i)] = pi[i];
    }
    let mut rhs = DVector::zeros(m + 1);
    for i in 0..m {
        rhs[i] = -v[i];
    }
    let sol = a.lu().solve(&rhs).ok_or(MarkovError::Singular)?;
    Ok(sol.iter().take(m).copied().collect())
}

/// `2 ⟨p ⊙ ψ̄, ∫_0^∞ e^{tḠ} ψ̄ dt⟩`.
pub fn variance_limit(p: &[f64], psi_bar: &[f64], g: &Generator) -> Result<f64, MarkovError> {
    let x = fundamental_solve(g, psi_bar)?;
    Ok(2.0 * p.iter().zip(psi_bar).zip(&x).map(|((p, s), x)| p * s * x).sum::<f64>())
}

/// Two-state closed form `2āb̄(ψ̄_L − ψ̄_R)² / (ā + b̄)³` for centred `ψ̄`.
pub fn two_state_variance_limit(a: f64, b: f64, psi_l: f64, psi_r: f64) -> f64 {
    2.0 * a * b * (psi_l - psi_r).powi(2) / (a + b).powi(3)
}

/// Composite adaptive Simpson estimate of `∫_0^T e^{tḠ} v dt`, evaluated
/// through [`expm`]; an oracle independent of the bordered solve.
pub fn semigroup_quadrature(g: &Generator, v: &[f64], t_max: f64, tol: f64) -> Result<Vec<f64>, MarkovError> {
    let vv = DVector::from_column_slice(v);
    let f = |t: f64| -> Result<DVector<f64>, MarkovError> { Ok(expm(g, t)?.0 * &vv) };
    fn simpson(
        f: &dyn Fn(f64) -> Result<DVector<f64>, MarkovError>,
        a: f64,
        b: f64,
        fa: &DVector<f64>,
        fm: &DVector<f64>,
        fb: &DVector<f64>,
        whole: &DVector<f64>,
        tol: f64,
        depth: u32,
    ) -> Result<DVector<f64>, MarkovError> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        let left = (fa + &flm * 4.0 + fm) * ((m - a) / 6.0);
        let right = (fm + &frm * 4.0 + fb) * ((b - m) / 6.0);
        let delta = &left + &right - whole;
        if depth == 0 || delta.amax() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        let l = simpson(f, a, m, fa, &flm, fm, &left, tol / 2.0, depth - 1)?;
        let r = simpson(f, m, b, fm, &frm, fb, &right, tol / 2.0, depth - 1)?;
        Ok(l + r)
    }
    // unit panels keep the recursion shallow
    let panels = t_max.ceil().max(1.0) as usize;
    let h = t_max / panels as f64;
    let mut total = DVector::zeros(v.len());
    for k in 0..panels {
        let (a, b) = (k as f64 * h, (k + 1) as f64 * h);
        let (fa, fm, fb) = (f(a)?, f(0.5 * (a + b))?, f(b)?);
        let whole = (&fa + &fm * 4.0 + &fb) * (h / 6.0);
        total += simpson(&f, a, b, &fa, &fm, &fb, &whole, tol / panels as f64, 40)?;
    }
    Ok(total.iter().copied().collect())
}

/// Oracle output: the chain and evaluated queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    #[serde(flatten)]
    pub oracle: JumpOracle,
    pub queries: Vec<EvaluatedQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedQuery {
    #[serde(flatten)]
    pub query: JumpQuery,
    pub prob: f64,
}

pub fn oracle_report(g: &Generator, queries: &[JumpQuery]) -> Result<OracleReport, MarkovError> {
    let oracle = JumpOracle::new(g)?;
    let queries = queries
        .iter()
        .map(|q| Ok(EvaluatedQuery { query: q.clone(), prob: jump_path_probability(&oracle, q)? }))
        .collect::<Result<_, MarkovError>>()?;
    Ok(OracleReport { oracle, queries })
}
