//! Ulam discretisation of closed and open transfer operators, fibre
//! composition, and the leading equivariant data of the open cocycle.
//!
//! Densities are piecewise constant on a [`Grid`]. An operator is stored as a
//! row-oriented sparse matrix `P[k][l] = Leb(cell_k ∩ D ∩ T^{-1} cell_l) /
//! Leb(cell_k)`, so a vector of cell *masses* evolves as `m' = m P` and a
//! functional given by per-cell weights pulls back as `ν = P ν'`.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::FiberPath;
use crate::map::{intersect_lists, Interval, MapError, PiecewiseAffineMap};

/// Uniform edges closer than this (relative to the grid width) to an
/// alignment point are dropped in favour of the alignment point.
const MERGE_TOL: f64 = 1e-12;

/// Default number of uniform cells before alignment points are inserted.
pub const DEFAULT_CELLS: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UlamError {
    #[error("grid is not aligned: {point} is not a cell endpoint")]
    Misaligned { point: f64 },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid density: {0}")]
    Density(String),
    #[error("no convergence within the pull-back depth (last gap {last_gap:e})")]
    NonConvergence { last_gap: f64 },
    #[error("fibre window [{lo}, {hi}] not covered by the path")]
    Window { lo: i64, hi: i64 },
    #[error("all mass escaped at fibre {fiber}")]
    Extinct { fiber: i64 },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Sorted cell endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    edges: Vec<f64>,
}

impl Grid {
    pub fn from_edges(edges: Vec<f64>) -> Result<Self, UlamError> {
        if edges.len() < 2 {
            return Err(UlamError::Grid("need at least one cell".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(UlamError::Grid("edges must be finite and strictly increasing".into()));
        }
        Ok(Self { edges })
    }

    pub fn uniform(space: Interval, n: usize) -> Result<Self, UlamError> {
        Self::aligned(space, n, &[])
    }

    /// `n` uniform cells on `space` with every point of `points` inserted
    /// as an edge. Points outside the open interval are ignored.
    pub fn aligned(space: Interval, n: usize, points: &[f64]) -> Result<Self, UlamError> {
        if n == 0 || space.is_empty() {
            return Err(UlamError::Grid(format!("cannot build {n} cells on [{}, {}]", space.lo, space.hi)));
        }
        let width = space.len();
        let mut pts: Vec<f64> = points
            .iter()
            .copied()
            .filter(|&p| p > space.lo && p < space.hi)
            .collect();
        pts.push(space.lo);
        pts.push(space.hi);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let tol = MERGE_TOL * width;
        let mut edges = pts.clone();
        for k in 1..n {
            let e = space.lo + width * (k as f64) / (n as f64);
            let i = pts.partition_point(|&p| p < e);
            let near = (i < pts.len() && pts[i] - e <= tol) || (i > 0 && e - pts[i - 1] <= tol);
            if !near {
                edges.push(e);
            }
        }
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        Self::from_edges(edges)
    }

    /// Grid aligned to everything the given maps need (branch, boundary and
    /// hole endpoints of every map).
    pub fn for_maps(maps: &[PiecewiseAffineMap], n: usize) -> Result<Self, UlamError> {
        let first = maps.first().ok_or_else(|| UlamError::Grid("no maps".into()))?;
        let space = first.state_space();
        let mut pts = Vec::new();
        for m in maps {
            if m.state_space() != space {
                return Err(UlamError::Grid("maps disagree on the state space".into()));
            }
            pts.extend(m.alignment_points());
        }
        Self::aligned(space, n, &pts)
    }

    /// Insert extra edges (points already present are kept once).
    pub fn refined_with(&self, points: &[f64]) -> Result<Self, UlamError> {
        let (lo, hi) = (self.lo(), self.hi());
        let mut edges = self.edges.clone();
        edges.extend(points.iter().copied().filter(|&p| p > lo && p < hi));
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        Self::from_edges(edges)
    }

    /// Split every cell into `factor` equal pieces.
    pub fn subdivided(&self, factor: usize) -> Result<Self, UlamError> {
        if factor == 0 {
            return Err(UlamError::Grid("subdivision factor must be positive".into()));
        }
        let mut edges = Vec::with_capacity(self.n_cells() * factor + 1);
        for w in self.edges.windows(2) {
            for i in 0..factor {
                edges.push(w[0] + (w[1] - w[0]) * (i as f64) / (factor as f64));
            }
        }
        edges.push(self.hi());
        Self::from_edges(edges)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_cells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn span(&self) -> Interval {
        Interval { lo: self.lo(), hi: self.hi() }
    }

    pub fn cell(&self, k: usize) -> Interval {
        Interval { lo: self.edges[k], hi: self.edges[k + 1] }
    }

    pub fn cell_len(&self, k: usize) -> f64 {
        self.edges[k + 1] - self.edges[k]
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        0.5 * (self.edges[k] + self.edges[k + 1])
    }

    /// Cell containing `x` (half-open cells, the last one closed).
    pub fn locate(&self, x: f64) -> usize {
        let i = self.edges.partition_point(|&e| e <= x);
        i.saturating_sub(1).min(self.n_cells() - 1)
    }

    /// Indices of cells meeting `iv` in positive length.
    pub fn overlapping(&self, iv: &Interval) -> Range<usize> {
        let start = self.edges.partition_point(|&e| e <= iv.lo).saturating_sub(1);
        let end = self.edges.partition_point(|&e| e < iv.hi).min(self.n_cells());
        start..end.max(start)
    }

    /// Cells inside `iv`, whose endpoints must be edges.
    pub fn cell_range(&self, iv: &Interval) -> Result<Range<usize>, UlamError> {
        let a = self.edge_index(iv.lo)?;
        let b = self.edge_index(iv.hi)?;
        Ok(a..b)
    }

    fn edge_index(&self, x: f64) -> Result<usize, UlamError> {
        self.edges
            .binary_search_by(|e| e.total_cmp(&x))
            .map_err(|_| UlamError::Misaligned { point: x })
    }

    /// Every point strictly inside the grid span must be an edge.
    pub fn check_aligned(&self, points: &[f64]) -> Result<(), UlamError> {
        for &p in points {
            if p > self.lo() && p < self.hi() {
                self.edge_index(p)?;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant density: `weights[k]` is the value on cell `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityVector {
    weights: Vec<f64>,
    mass: f64,
}

impl DensityVector {
    pub fn new(grid: &Grid, weights: Vec<f64>) -> Result<Self, UlamError> {
        if weights.len() != grid.n_cells() {
            return Err(UlamError::Dimension(format!("{} weights for {} cells", weights.len(), grid.n_cells())));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(UlamError::Density("weights must be finite and nonnegative".into()));
        }
        let mass = weights.iter().zip(grid.lengths()).map(|(w, l)| w * l).sum();
        Ok(Self { weights, mass })
    }

    pub fn from_masses(grid: &Grid, masses: &[f64]) -> Result<Self, UlamError> {
        if masses.len() != grid.n_cells() {
            return Err(UlamError::Dimension(format!("{} masses for {} cells", masses.len(), grid.n_cells())));
        }
        let weights = masses.iter().enumerate().map(|(k, m)| m / grid.cell_len(k)).collect();
        Self::new(grid, weights)
    }

    /// Normalised uniform density on `iv` (whose endpoints must be edges).
    pub fn uniform_on(grid: &Grid, iv: &Interval) -> Result<Self, UlamError> {
        let range = grid.cell_range(iv)?;
        let mut w = vec![0.0; grid.n_cells()];
        for k in range {
            w[k] = 1.0 / iv.len();
        }
        Self::new(grid, w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn masses(&self, grid: &Grid) -> Vec<f64> {
        self.weights.iter().enumerate().map(|(k, w)| w * grid.cell_len(k)).collect()
    }

    /// `∫_iv f dLeb`, exact for the piecewise-constant density.
    pub fn integrate(&self, grid: &Grid, iv: &Interval) -> f64 {
        grid.overlapping(iv)
            .map(|k| self.weights[k] * grid.cell(k).overlap(iv))
            .sum()
    }

    pub fn normalized(&self) -> Result<Self, UlamError> {
        if !(self.mass > 0.0) {
            return Err(UlamError::Density("zero mass".into()));
        }
        Ok(Self { weights: self.weights.iter().map(|w| w / self.mass).collect(), mass: 1.0 })
    }

    pub fn l1_distance(&self, grid: &Grid, other: &DensityVector) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .enumerate()
            .map(|(k, (a, b))| (a - b).abs() * grid.cell_len(k))
            .sum()
    }
}

/// Compressed-row sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Rows given as `(column, value)` lists; entries within a row are
    /// sorted and duplicate columns summed.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let start = cols.len();
            for (c, v) in row {
                if cols.len() > start && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n_cols, row_ptr, cols, vals }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = self.row_ptr[r];
        let e = self.row_ptr[r + 1];
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|e| e.0 == c).map(|e| e.1).unwrap_or(0.0)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.row(r).map(|e| e.1).sum()).collect()
    }

    /// `xᵀ A`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        self.left_mul_into(x, &mut out);
        out
    }

    pub fn left_mul_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[i]] += xr * self.vals[i];
            }
        }
    }

    /// `A x`.
    pub fn right_mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn product(&self, other: &SparseMatrix) -> Result<SparseMatrix, UlamError> {
        if self.n_cols != other.n_rows() {
            return Err(UlamError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.n_rows(),
                self.n_cols,
                other.n_rows(),
                other.n_cols
            )));
        }
        let rows = (0..self.n_rows())
            .map(|r| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for (k, a) in self.row(r) {
                    for (c, b) in other.row(k) {
                        acc.push((c, a * b));
                    }
                }
                acc
            })
            .collect();
        Ok(SparseMatrix::from_rows(other.n_cols, rows))
    }

    /// Square block on `range × range`, re-indexed from zero.
    pub fn block(&self, range: Range<usize>) -> SparseMatrix {
        let rows = range
            .clone()
            .map(|r| {
                self.row(r)
                    .filter(|(c, _)| range.contains(c))
                    .map(|(c, v)| (c - range.start, v))
                    .collect()
            })
            .collect();
        SparseMatrix::from_rows(range.len(), rows)
    }

    pub fn coo(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n_rows())
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &SparseMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n_rows().max(other.n_rows()) {
            let a: Vec<(usize, f64)> = if r < self.n_rows() { self.row(r).collect() } else { vec![] };
            let b: Vec<(usize, f64)> = if r < other.n_rows() { other.row(r).collect() } else { vec![] };
            let mut cols: Vec<usize> = a.iter().chain(&b).map(|e| e.0).collect();
            cols.sort_unstable();
            cols.dedup();
            for c in cols {
                let x = a.iter().find(|e| e.0 == c).map_or(0.0, |e| e.1);
                let y = b.iter().find(|e| e.0 == c).map_or(0.0, |e| e.1);
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Closed,
    Open { state: usize },
    Composite { len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UlamOperator {
    pub matrix: SparseMatrix,
    pub kind: OperatorKind,
    pub fiber: Option<i64>,
}

#[derive(Serialize)]
struct CooHeader<'a> {
    grid: &'a [f64],
    kind: OperatorKind,
    fiber: Option<i64>,
    n_rows: usize,
    nnz: usize,
}

impl UlamOperator {
    /// JSON header line followed by `row col value` lines.
    pub fn write_coo<W: Write>(&self, grid: &Grid, mut out: W) -> Result<(), UlamError> {
        let header = CooHeader {
            grid: grid.edges(),
            kind: self.kind,
            fiber: self.fiber,
            n_rows: self.matrix.n_rows(),
            nnz: self.matrix.nnz(),
        };
        let io = |e: std::io::Error| UlamError::Io(e.to_string());
        let json = serde_json::to_string(&header).map_err(|e| UlamError::Io(e.to_string()))?;
        writeln!(out, "{json}").map_err(io)?;
        for (r, c, v) in self.matrix.coo() {
            writeln!(out, "{r} {c} {v:.17e}").map_err(io)?;
        }
        Ok(())
    }
}

fn check_span(map: &PiecewiseAffineMap, grid: &Grid) -> Result<(), UlamError> {
    if grid.span() != map.state_space() {
        return Err(UlamError::Grid(format!(
            "grid spans [{}, {}] but the state space is [{}, {}]",
            grid.lo(),
            grid.hi(),
            map.state_space().lo,
            map.state_space().hi
        )));
    }
    Ok(())
}

/// Distribute a cell uniformly over its affine image. The image lies in the
/// grid span, so the overlaps are normalised by their own total rather than
/// by the rounded image length.
fn image_row(map: &PiecewiseAffineMap, grid: &Grid, k: usize) -> Vec<(usize, f64)> {
    let cell = grid.cell(k);
    let br = &map.branches()[map.branch_index(cell.lo)];
    let img = br.image_of(&cell);
    let mut row: Vec<(usize, f64)> = grid
        .overlapping(&img)
        .filter_map(|l| {
            let v = grid.cell(l).overlap(&img);
            (v > 0.0).then_some((l, v))
        })
        .collect();
    let total: f64 = row.iter().map(|e| e.1).sum();
    row.iter_mut().for_each(|e| e.1 /= total);
    row
}

fn branch_points(map: &PiecewiseAffineMap) -> Vec<f64> {
    let mut pts: Vec<f64> = map.boundary_points().to_vec();
    for b in map.branches() {
        pts.push(b.domain.lo);
    }
    pts
}

/// Ulam matrix of the closed transfer operator.
pub fn build_closed(map: &PiecewiseAffineMap, grid: &Grid) -> Result<UlamOperator, UlamError> {
    check_span(map, grid)?;
    grid.check_aligned(&branch_points(map))?;
    let rows: Vec<Vec<(usize, f64)>> = (0..grid.n_cells())
        .into_par_iter()
        .map(|k| image_row(map, grid, k))
        .collect();
    Ok(UlamOperator {
        matrix: SparseMatrix::from_rows(grid.n_cells(), rows),
        kind: OperatorKind::Closed,
        fiber: None,
    })
}

/// Ulam matrix of the open operator on `I_j` with the escape set as hole.
/// Rows of cells outside `I_j` or inside the hole are empty.
pub fn build_open(map: &PiecewiseAffineMap, j: usize, grid: &Grid) -> Result<UlamOperator, UlamError> {
    check_span(map, grid)?;
    let state = map.state(j)?;
    let escape = map.escape_set(j)?;
    let mut pts = branch_points(map);
    for h in &escape {
        pts.push(h.lo);
        pts.push(h.hi);
    }
    grid.check_aligned(&pts)?;
    let survivors = map.survivor_domain(j)?;
    let range = grid.cell_range(&state)?;
    let rows: Vec<Vec<(usize, f64)>> = (0..grid.n_cells())
        .into_par_iter()
        .map(|k| {
            let mid = grid.midpoint(k);
            if range.contains(&k) && survivors.iter().any(|d| d.lo < mid && mid < d.hi) {
                image_row(map, grid, k)
            } else {
                Vec::new()
            }
        })
        .collect();
    Ok(UlamOperator {
        matrix: SparseMatrix::from_rows(grid.n_cells(), rows),
        kind: OperatorKind::Open { state: j },
        fiber: None,
    })
}

/// `Σ_k (1 − rowsum_k) Leb(cell_k)` over the cells of `I_j`.
pub fn deficiency(op: &UlamOperator, grid: &Grid, range: Range<usize>) -> f64 {
    let sums = op.matrix.row_sums();
    range.map(|k| (1.0 - sums[k]) * grid.cell_len(k)).sum()
}

/// Product in fibre order: the first operator acts first.
pub fn compose(n: usize, ops: &[&UlamOperator]) -> Result<UlamOperator, UlamError> {
    let mut acc = SparseMatrix::identity(n);
    for op in ops {
        acc = acc.product(&op.matrix)?;
    }
    let kind = match ops {
        [single] => single.kind,
        _ => OperatorKind::Composite { len: ops.len() },
    };
    let fiber = ops.first().and_then(|o| o.fiber);
    Ok(UlamOperator { matrix: acc, kind, fiber })
}

/// A piece of mass in flight: an interval carrying uniform density
/// `1 / jacobian` relative to its origin.
type Piece = (Interval, f64);

fn push_pieces(map: &PiecewiseAffineMap, pieces: Vec<Piece>, domain: Option<&[Interval]>) -> Vec<Piece> {
    let mut out = Vec::new();
    for (p, jac) in pieces {
        let parts: Vec<Interval> = match domain {
            Some(d) => intersect_lists(&[p], d),
            None => vec![p],
        };
        for q in parts {
            for (img, s) in map.image_pieces(&q) {
                out.push((img, jac * s));
            }
        }
    }
    out
}

fn accumulate(grid: &Grid, pieces: &[Piece], norm: f64) -> Vec<(usize, f64)> {
    let mut row = Vec::new();
    for (img, jac) in pieces {
        for l in grid.overlapping(img) {
            let v = grid.cell(l).overlap(img) / jac / norm;
            if v > 0.0 {
                row.push((l, v));
            }
        }
    }
    row
}

/// Outcome of [`open_composition_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionCheck {
    pub n: usize,
    pub max_discrepancy: f64,
    pub survivor_measure: f64,
    pub refined_cells: usize,
}

/// Compare, cell by cell on a grid refined by the survivor-set endpoints, the
/// `n`-fold open composition (restricting to `I_j \ H_j` at every step)
/// against the closed composition applied after multiplying by the
/// indicator of the `n`-step survivor set. Both sides are evaluated by exact
/// interval propagation. An empty survivor set is reported through
/// `survivor_measure = 0`.
pub fn open_composition_check(
    maps: &[PiecewiseAffineMap],
    path: &FiberPath,
    j: usize,
    n: usize,
    grid: &Grid,
) -> Result<CompositionCheck, UlamError> {
    if n == 0 {
        return Err(UlamError::Dimension("composition length must be at least 1".into()));
    }
    if !path.contains(0, n as i64 - 1) {
        return Err(UlamError::Window { lo: 0, hi: n as i64 - 1 });
    }
    let fiber_maps: Vec<&PiecewiseAffineMap> = (0..n as i64).map(|k| &maps[path.at(k)]).collect();
    let domains: Vec<Vec<Interval>> = fiber_maps
        .iter()
        .map(|m| m.survivor_domain(j))
        .collect::<Result<_, _>>()?;
    // X_n = D_0 ∩ T_0^{-1}(D_1 ∩ T_1^{-1}(... D_{n-1}))
    let mut survivor = domains[n - 1].clone();
    for i in (0..n - 1).rev() {
        survivor = intersect_lists(&domains[i], &fiber_maps[i].preimage_list(&survivor));
    }
    let state = fiber_maps[0].state(j)?;
    let mut pts: Vec<f64> = Vec::new();
    for s in &survivor {
        pts.push(s.lo);
        pts.push(s.hi);
    }
    let refined = grid.refined_with(&pts)?;
    let range = refined.cell_range(&state)?;
    let rows: Vec<(Vec<(usize, f64)>, Vec<(usize, f64)>)> = range
        .clone()
        .into_par_iter()
        .map(|k| {
            let cell = refined.cell(k);
            let norm = cell.len();
            let mut open: Vec<Piece> = vec![(cell, 1.0)];
            for (m, d) in fiber_maps.iter().zip(&domains) {
                open = push_pieces(m, open, Some(d));
            }
            let mut closed: Vec<Piece> = intersect_lists(&[cell], &survivor).into_iter().map(|p| (p, 1.0)).collect();
            for m in &fiber_maps {
                closed = push_pieces(m, closed, None);
            }
            (accumulate(&refined, &open, norm), accumulate(&refined, &closed, norm))
        })
        .collect();
    let (a, b): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let a = SparseMatrix::from_rows(refined.n_cells(), a);
    let b = SparseMatrix::from_rows(refined.n_cells(), b);
    Ok(CompositionCheck {
        n,
        max_discrepancy: a.max_abs_diff(&b),
        survivor_measure: survivor.iter().map(Interval::len).sum(),
        refined_cells: refined.n_cells(),
    })
}

/// Per-symbol operators restricted to the cells of one region (a state for
/// the open cocycle, the whole state space for the closed one).
#[derive(Debug, Clone)]
pub struct Cocycle {
    grid: Grid,
    range: Range<usize>,
    ops: Vec<SparseMatrix>,
    kind: OperatorKind,
}

impl Cocycle {
    /// Open cocycle on `I_j`, one operator per symbol.
    pub fn open(maps: &[PiecewiseAffineMap], j: usize, grid: &Grid) -> Result<Self, UlamError> {
        let state = maps.first().ok_or_else(|| UlamError::Grid("no maps".into()))?.state(j)?;
        let range = grid.cell_range(&state)?;
        let ops = maps
            .iter()
            .map(|m| build_open(m, j, grid).map(|op| op.matrix.block(range.clone())))
            .collect::<Result<_, _>>()?;
        Ok(Self { grid: grid.clone(), range, ops, kind: OperatorKind::Open { state: j } })
    }

    /// Closed cocycle on the whole state space.
    pub fn closed(maps: &[PiecewiseAffineMap], grid: &Grid) -> Result<Self, UlamError> {
        let ops = maps
            .iter()
            .map(|m| build_closed(m, grid).map(|op| op.matrix))
            .collect::<Result<_, _>>()?;
        Ok(Self { grid: grid.clone(), range: 0..grid.n_cells(), ops, kind: OperatorKind::Closed })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.range.len()
    }

    /// Operator of symbol `s` on the restricted cells.
    pub fn operator(&self, s: usize) -> &SparseMatrix {
        &self.ops[s]
    }

    /// Cell lengths of the restricted cells.
    pub fn lengths(&self) -> Vec<f64> {
        self.range.clone().map(|k| self.grid.cell_len(k)).collect()
    }

    /// Push a mass vector through one fibre.
    pub fn push(&self, symbol: usize, masses: &[f64], out: &mut [f64]) {
        self.ops[symbol].left_mul_into(masses, out);
    }

    /// Pull a weight vector back through one fibre.
    pub fn pull(&self, symbol: usize, weights: &[f64]) -> Vec<f64> {
        self.ops[symbol].right_mul(weights)
    }

    /// Embed restricted per-cell weights into a full-grid density.
    pub fn embed(&self, weights: &[f64]) -> Result<DensityVector, UlamError> {
        let mut w = vec![0.0; self.grid.n_cells()];
        w[self.range.clone()].copy_from_slice(weights);
        DensityVector::new(&self.grid, w)
    }
}

/// Leading equivariant data at the anchor fibre 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralTriple {
    /// `λ̂` at fibres `0, 1, ..., horizon - 1`.
    pub lambda_seq: Vec<f64>,
    /// Equivariant density at fibre 0 on the full grid, `∫φ̂ = 1`.
    pub phi: DensityVector,
    /// Per-cell weights of the functional at fibre 0 (full grid), with
    /// `ν̂(φ̂) = 1`.
    pub nu: Vec<f64>,
    /// Fitted geometric rate at which distinct initial densities merge.
    pub residual_decay: Option<f64>,
    /// L¹ gap between the two pushed densities on arrival at fibre 0.
    pub final_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleOptions {
    /// Pull-back depth `K`.
    pub depth: usize,
    /// Number of fibres `0..horizon` for which `λ̂` is recorded.
    pub horizon: usize,
    /// Convergence threshold on the L¹ gap at fibre 0.
    pub tol: f64,
}

impl TripleOptions {
    /// `K = ⌈40/ε⌉` capped at `10^5`.
    pub fn for_eps(eps: f64, horizon: usize) -> Self {
        let depth = if eps > 0.0 { ((40.0 / eps).ceil() as usize).min(100_000) } else { 200 };
        Self { depth, horizon, tol: 1e-10 }
    }
}

fn normalise_masses(m: &mut [f64]) -> f64 {
    let total: f64 = m.iter().sum();
    if total > 0.0 {
        m.iter_mut().for_each(|v| *v /= total);
    }
    total
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Least-squares rate of `gap_n ≈ C θ^n` over the gaps above the noise floor.
fn fit_decay(gaps: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = gaps
        .iter()
        .enumerate()
        .take_while(|(_, &g)| g > 1e-13)
        .filter(|(_, &g)| g < 1e-1)
        .map(|(i, &g)| (i as f64, g.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

/// Normalised masses on the region at fibre `anchor` obtained by pushing the
/// uniform density from fibre `anchor - depth`. A step-shaped density is
/// pushed alongside; their L¹ gap after each step is returned and must be
/// below `tol` on arrival.
pub fn equivariant_masses(
    cocycle: &Cocycle,
    path: &FiberPath,
    anchor: i64,
    depth: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), UlamError> {
    let start = anchor - depth as i64;
    if !path.contains(start, anchor - 1) && depth > 0 {
        return Err(UlamError::Window { lo: start, hi: anchor - 1 });
    }
    let lens = cocycle.lengths();
    let dim = cocycle.dim();
    let grid = cocycle.grid();
    let region_len: f64 = lens.iter().sum();
    let (x_lo, x_hi) = (grid.edges()[cocycle.range.start], grid.edges()[cocycle.range.end]);
    let mut m: Vec<f64> = lens.iter().map(|l| l / region_len).collect();
    let mut tilt: Vec<f64> = (0..dim)
        .map(|i| {
            let x = grid.midpoint(cocycle.range.start + i);
            // a step, not a linear ramp: folds map ramps to constants
            lens[i] * if x < x_lo + 0.3 * (x_hi - x_lo) { 1.9 } else { 1.0 }
        })
        .collect();
    normalise_masses(&mut tilt);
    let mut buf = vec![0.0; dim];
    let mut gaps = Vec::with_capacity(depth);
    for f in start..anchor {
        let s = path.at(f);
        cocycle.push(s, &m, &mut buf);
        std::mem::swap(&mut m, &mut buf);
        if normalise_masses(&mut m) <= 0.0 {
            return Err(UlamError::Extinct { fiber: f });
        }
        cocycle.push(s, &tilt, &mut buf);
        std::mem::swap(&mut tilt, &mut buf);
        normalise_masses(&mut tilt);
        gaps.push(l1(&m, &tilt));
    }
    let final_gap = gaps.last().copied().unwrap_or(f64::INFINITY);
    if !(final_gap < tol) {
        return Err(UlamError::NonConvergence { last_gap: final_gap });
    }
    Ok((m, gaps))
}

/// Forward-push the uniform density on the region from fibre `-K` to 0 and
/// onwards to `horizon`, recording mass ratios; pull uniform weights back
/// from fibre `K` to 0.
pub fn equivariant_triple(
    cocycle: &Cocycle,
    path: &FiberPath,
    opts: TripleOptions,
) -> Result<SpectralTriple, UlamError> {
    let k = opts.depth as i64;
    let hi = k.max(opts.horizon as i64);
    if !path.contains(-k, hi) {
        return Err(UlamError::Window { lo: -k, hi });
    }
    let (m, gaps) = equivariant_masses(cocycle, path, 0, opts.depth, opts.tol)?;
    let final_gap = *gaps.last().unwrap();
    let lens = cocycle.lengths();
    let dim = cocycle.dim();
    let grid = cocycle.grid();
    let mut buf = vec![0.0; dim];
    let phi_w: Vec<f64> = m.iter().zip(&lens).map(|(a, l)| a / l).collect();
    let mut lambda_seq = Vec::with_capacity(opts.horizon);
    let mut cur = m.clone();
    for f in 0..opts.horizon as i64 {
        cocycle.push(path.at(f), &cur, &mut buf);
        std::mem::swap(&mut cur, &mut buf);
        let ratio = normalise_masses(&mut cur);
        if ratio <= 0.0 {
            return Err(UlamError::Extinct { fiber: f });
        }
        lambda_seq.push(ratio);
    }
    let mut nu = vec![1.0; dim];
    for f in (0..k).rev() {
        nu = cocycle.pull(path.at(f), &nu);
        let s: f64 = nu.iter().zip(&lens).map(|(a, l)| a * l).sum();
        if !(s > 0.0) {
            return Err(UlamError::Extinct { fiber: f });
        }
        nu.iter_mut().for_each(|v| *v /= s);
    }
    let pairing: f64 = nu.iter().zip(&m).map(|(a, b)| a * b).sum();
    nu.iter_mut().for_each(|v| *v /= pairing);
    let mut nu_full = vec![0.0; grid.n_cells()];
    nu_full[cocycle.range.clone()].copy_from_slice(&nu);
    Ok(SpectralTriple {
        lambda_seq,
        phi: cocycle.embed(&phi_w)?,
        nu: nu_full,
        residual_decay: fit_decay(&gaps),
        final_gap,
    })
}

/// Number of fibres in a window of length `t` at scale `ε`: `⌊t/ε⌋`.
pub fn window_len(eps: f64, t: f64) -> usize {
    if t <= 0.0 || eps <= 0.0 {
        return 0;
    }
    (t / eps + 1e-9).floor() as usize
}

/// `λ̂^{(⌊t/ε⌋)}`, the product of the first `⌊t/ε⌋` multipliers.
pub fn lambda_window_product(lambda_seq: &[f64], eps: f64, t: f64) -> Result<f64, UlamError> {
    let n = window_len(eps, t);
    if n > lambda_seq.len() {
        return Err(UlamError::Window { lo: 0, hi: n as i64 - 1 });
    }
    Ok(lambda_seq[..n].iter().product())
}

/// Sup distance between the cumulative distributions of the normalised
/// functional `ν̂` and normalised Lebesgue measure on the cells of `range`.
pub fn nu_cdf_distance(grid: &Grid, nu: &[f64], range: Range<usize>) -> f64 {
    let total_nu: f64 = range.clone().map(|k| nu[k] * grid.cell_len(k)).sum();
    let total_len: f64 = range.clone().map(|k| grid.cell_len(k)).sum();
    let mut a = 0.0;
    let mut b = 0.0;
    let mut worst: f64 = 0.0;
    for k in range {
        a += nu[k] * grid.cell_len(k) / total_nu;
        b += grid.cell_len(k) / total_len;
        worst = worst.max((a - b).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Alphabet, FiberPath};
    use crate::map::{paired_tent, AffineBranch, PairedTentParams};
    use proptest::prelude::*;

    fn tent(a: f64, b: f64, eps: f64) -> PiecewiseAffineMap {
        paired_tent(PairedTentParams::new(a, b).unwrap(), eps).unwrap()
    }

    fn const_path(lo: i64, hi: i64) -> FiberPath {
        FiberPath::sample(&Alphabet::constant("x"), 1, lo, hi).unwrap()
    }

    #[test]
    fn half_cells_split_evenly() {
        let t = tent(1.0, 1.0, 0.0);
        let g = Grid::uniform(Interval { lo: -1.0, hi: 1.0 }, 4).unwrap();
        let op = build_closed(&t, &g).unwrap();
        for k in 2..4 {
            assert_eq!(op.matrix.get(k, 2), 0.5);
            assert_eq!(op.matrix.get(k, 3), 0.5);
        }
    }

    #[test]
    fn misaligned_grid_is_rejected() {
        let t = tent(1.0, 1.0, 0.1);
        let g = Grid::uniform(Interval { lo: -1.0, hi: 1.0 }, 3).unwrap();
        assert!(matches!(build_closed(&t, &g), Err(UlamError::Misaligned { .. })));
        let g = Grid::uniform(Interval { lo: -1.0, hi: 1.0 }, 64).unwrap();
        assert!(build_closed(&t, &g).is_ok());
        assert!(matches!(build_open(&t, 0, &g), Err(UlamError::Misaligned { .. })));
    }

    #[test]
    fn open_deficiency_is_the_hole_measure() {
        let t = tent(1.0, 1.0, 0.1);
        let g = Grid::for_maps(std::slice::from_ref(&t), 256).unwrap();
        let op = build_open(&t, 0, &g).unwrap();
        let range = g.cell_range(&t.state(0).unwrap()).unwrap();
        let d = deficiency(&op, &g, range);
        assert!((d - 0.1 / 1.1).abs() < 1e-12, "deficiency {d}");
    }

    #[test]
    fn open_equals_restricted_closed_without_holes() {
        let t = tent(1.0, 1.0, 0.0);
        let g = Grid::for_maps(std::slice::from_ref(&t), 64).unwrap();
        let open = build_open(&t, 1, &g).unwrap();
        let closed = build_closed(&t, &g).unwrap();
        let r = g.cell_range(&t.state(1).unwrap()).unwrap();
        assert_eq!(open.matrix.block(r.clone()), closed.matrix.block(r.clone()));
        for k in 0..r.start {
            assert_eq!(open.matrix.row(k).count(), 0);
        }
    }

    #[test]
    fn composition_identities() {
        let t = tent(1.0, 0.5, 0.1);
        let g = Grid::for_maps(std::slice::from_ref(&t), 32).unwrap();
        let op = build_closed(&t, &g).unwrap();
        let id = compose(g.n_cells(), &[]).unwrap();
        assert_eq!(id.matrix, SparseMatrix::identity(g.n_cells()));
        assert_eq!(compose(g.n_cells(), &[&op]).unwrap().matrix, op.matrix);
        let three = compose(g.n_cells(), &[&op, &op, &op]).unwrap();
        for s in three.matrix.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let bad = SparseMatrix::identity(3);
        assert!(bad.product(&op.matrix).is_err());
    }

    #[test]
    fn open_composition_identity_holds() {
        let t = tent(1.0, 1.0, 0.1);
        let g = Grid::for_maps(std::slice::from_ref(&t), 1 << 10).unwrap();
        let path = const_path(0, 5);
        let one = open_composition_check(std::slice::from_ref(&t), &path, 0, 1, &g).unwrap();
        assert_eq!(one.max_discrepancy, 0.0);
        let three = open_composition_check(std::slice::from_ref(&t), &path, 0, 3, &g).unwrap();
        assert!(three.max_discrepancy <= 1e-12, "{}", three.max_discrepancy);
        let expected = (1.0f64 / 1.1).powi(3);
        assert!((three.survivor_measure - expected).abs() < 1e-12);
        let t0 = tent(1.0, 1.0, 0.0);
        let g0 = Grid::for_maps(std::slice::from_ref(&t0), 64).unwrap();
        for n in 1..4 {
            let c = open_composition_check(std::slice::from_ref(&t0), &path, 1, n, &g0).unwrap();
            assert_eq!(c.max_discrepancy, 0.0);
        }
    }

    #[test]
    fn unperturbed_triple_is_trivial() {
        let t = tent(1.0, 1.0, 0.0);
        let g = Grid::for_maps(std::slice::from_ref(&t), 256).unwrap();
        let coc = Cocycle::open(std::slice::from_ref(&t), 0, &g).unwrap();
        let opts = TripleOptions { depth: 100, horizon: 10, tol: 1e-10 };
        let tr = equivariant_triple(&coc, &const_path(-100, 100), opts).unwrap();
        for l in &tr.lambda_seq {
            assert!((l - 1.0).abs() < 1e-13);
        }
        for k in 0..128 {
            assert!((tr.phi.weights()[k] - 1.0).abs() < 1e-9);
        }
        assert!(tr.residual_decay.unwrap() < 1.0);
    }

    #[test]
    fn multiplier_matches_hole_measure() {
        let eps = 0.01;
        let t = tent(1.0, 1.0, eps);
        let g = Grid::for_maps(std::slice::from_ref(&t), 1 << 12).unwrap();
        let coc = Cocycle::open(std::slice::from_ref(&t), 0, &g).unwrap();
        let opts = TripleOptions { depth: 400, horizon: 5, tol: 1e-10 };
        let tr = equivariant_triple(&coc, &const_path(-400, 400), opts).unwrap();
        let gap = 1.0 - tr.lambda_seq[0];
        assert!((0.0095..=0.0105).contains(&gap), "1 - λ = {gap}");
        assert!((gap - eps / (1.0 + eps)).abs() < 1e-12);
        let pairing: f64 = (0..g.n_cells()).map(|k| tr.nu[k] * tr.phi.weights()[k] * g.cell_len(k)).sum();
        assert!((pairing - 1.0).abs() < 1e-12);
    }

    #[test]
    fn functional_approaches_lebesgue() {
        let eps = 0.005;
        let t = tent(1.0, 1.0, eps);
        let g = Grid::for_maps(std::slice::from_ref(&t), 1 << 12).unwrap();
        let coc = Cocycle::open(std::slice::from_ref(&t), 0, &g).unwrap();
        let opts = TripleOptions { depth: 300, horizon: 1, tol: 1e-10 };
        let tr = equivariant_triple(&coc, &const_path(-300, 300), opts).unwrap();
        let d = nu_cdf_distance(&g, &tr.nu, coc.range());
        assert!(d <= 0.02, "distance {d}");
    }

    #[test]
    fn stall_detector_reports_gap() {
        let t = tent(1.0, 1.0, 0.01);
        let g = Grid::for_maps(std::slice::from_ref(&t), 256).unwrap();
        let coc = Cocycle::open(std::slice::from_ref(&t), 0, &g).unwrap();
        let opts = TripleOptions { depth: 3, horizon: 1, tol: 1e-10 };
        match equivariant_triple(&coc, &const_path(-3, 3), opts) {
            Err(UlamError::NonConvergence { last_gap }) => assert!(last_gap > 1e-10),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn window_product() {
        assert_eq!(lambda_window_product(&[], 0.01, 0.0).unwrap(), 1.0);
        assert_eq!(window_len(0.01, 1.0), 100);
        assert_eq!(window_len(0.03, 0.09), 3);
        let seq = vec![0.5; 4];
        assert_eq!(lambda_window_product(&seq, 0.5, 1.0).unwrap(), 0.25);
        assert!(lambda_window_product(&seq, 0.1, 1.0).is_err());
    }

    /// Two states `[0,1]`, `[1,2]`. On `I_0` the middle branch loses an
    /// interval of length `h` around 0.43 (away from short periodic orbits)
    /// into `I_1`, so the open equivariant density is not uniform for
    /// `h > 0` and tends to the uniform ACIM.
    fn notched(h: f64) -> PiecewiseAffineMap {
        let iv = |lo, hi| Interval { lo, hi };
        let third = 1.0 / 3.0;
        let mut br = vec![AffineBranch { domain: iv(0.0, third), slope: 3.0, intercept: 0.0 }];
        if h > 0.0 {
            let (c0, c1) = (0.43 - h / 2.0, 0.43 + h / 2.0);
            br.push(AffineBranch { domain: iv(third, c0), slope: -3.0, intercept: 2.0 });
            let s = 0.5 / h;
            br.push(AffineBranch { domain: iv(c0, c1), slope: s, intercept: 1.25 - s * c0 });
            br.push(AffineBranch { domain: iv(c1, 2.0 * third), slope: -3.0, intercept: 2.0 });
        } else {
            br.push(AffineBranch { domain: iv(third, 2.0 * third), slope: -3.0, intercept: 2.0 });
        }
        br.push(AffineBranch { domain: iv(2.0 * third, 1.0), slope: 3.0, intercept: -2.0 });
        br.push(AffineBranch { domain: iv(1.0, 1.5), slope: 2.0, intercept: -1.0 });
        br.push(AffineBranch { domain: iv(1.5, 2.0), slope: -2.0, intercept: 5.0 });
        PiecewiseAffineMap::new(iv(0.0, 2.0), br, vec![0.0, 1.0, 2.0], vec![]).unwrap()
    }

    #[test]
    fn equivariant_density_converges_to_acim() {
        let mut l1_err = Vec::new();
        let mut hole_err = Vec::new();
        for eps in [0.04, 0.02, 0.01] {
            let t = notched(eps);
            let g = Grid::for_maps(std::slice::from_ref(&t), 1 << 11).unwrap();
            let coc = Cocycle::open(std::slice::from_ref(&t), 0, &g).unwrap();
            let opts = TripleOptions { depth: 200, horizon: 1, tol: 1e-10 };
            let tr = equivariant_triple(&coc, &const_path(-200, 200), opts).unwrap();
            let r = coc.range();
            let w = tr.phi.weights();
            l1_err.push(r.clone().map(|k| (w[k] - 1.0).abs() * g.cell_len(k)).sum::<f64>());
            let hole = t.escape_set(0).unwrap();
            let worst = r
                .filter(|&k| hole.iter().any(|h| h.contains(g.midpoint(k))))
                .map(|k| (w[k] - 1.0).abs())
                .fold(0.0, f64::max);
            hole_err.push(worst);
        }
        assert!(l1_err[0] > l1_err[1] && l1_err[1] > l1_err[2], "{l1_err:?}");
        assert!(l1_err[2] <= 0.05);
        assert!(hole_err[0] > hole_err[1] && hole_err[1] > hole_err[2], "{hole_err:?}");
    }

    #[test]
    fn refinement_coarse_grains_back() {
        let t = tent(0.7, 1.3, 0.05);
        let g = Grid::for_maps(std::slice::from_ref(&t), 16).unwrap();
        let fine = g.subdivided(4).unwrap();
        let coarse = build_closed(&t, &g).unwrap();
        let finer = build_closed(&t, &fine).unwrap();
        for k in 0..g.n_cells() {
            for l in 0..g.n_cells() {
                let mut acc = 0.0;
                for a in 4 * k..4 * k + 4 {
                    for b in 4 * l..4 * l + 4 {
                        acc += finer.matrix.get(a, b) * fine.cell_len(a);
                    }
                }
                acc /= g.cell_len(k);
                assert!((acc - coarse.matrix.get(k, l)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coo_export_has_header() {
        let t = tent(1.0, 1.0, 0.0);
        let g = Grid::uniform(t.state_space(), 4).unwrap();
        let op = build_closed(&t, &g).unwrap();
        let mut buf = Vec::new();
        op.write_coo(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["kind"], "closed");
        assert_eq!(lines.count(), op.matrix.nnz());
    }

    #[test]
    fn density_integrals() {
        let g = Grid::uniform(Interval { lo: 0.0, hi: 1.0 }, 4).unwrap();
        let d = DensityVector::new(&g, vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.mass(), 1.0);
        assert_eq!(d.integrate(&g, &Interval { lo: 0.0, hi: 0.125 }), 0.5);
        assert!(DensityVector::new(&g, vec![-1.0, 0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn prop_row_stochastic_and_ordered(a in 0.1f64..2.0, b in 0.1f64..2.0, eps in 0.0f64..0.4, n in 8usize..200) {
            let t = tent(a, b, eps);
            let g = Grid::for_maps(std::slice::from_ref(&t), n).unwrap();
            let closed = build_closed(&t, &g).unwrap();
            for s in closed.matrix.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
            for j in 0..2 {
                let open = build_open(&t, j, &g).unwrap();
                for (k, s) in open.matrix.row_sums().into_iter().enumerate() {
                    prop_assert!(s <= 1.0 + 1e-12);
                    for (l, v) in open.matrix.row(k) {
                        prop_assert!((0.0..=1.0 + 1e-15).contains(&v));
                        prop_assert!(v <= closed.matrix.get(k, l) + 1e-15);
                    }
                }
                let range = g.cell_range(&t.state(j).unwrap()).unwrap();
                let holes: f64 = t.escape_set(j).unwrap().iter().map(Interval::len).sum();
                prop_assert!((deficiency(&open, &g, range) - holes).abs() <= 1e-12);
            }
        }
    }
}
