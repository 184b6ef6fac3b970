//! Piecewise-affine expanding interval maps with a metastable partition.
//!
//! A map is a list of affine branches tiling the state space, together with
//! boundary points `b_0 < b_1 < ... < b_m` that cut the state space into the
//! `m` metastable states `I_1, ..., I_m`. Because every branch is affine,
//! preimages, holes and hole measures are computed exactly (up to floating
//! point representation) by affine inversion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ulam::{DensityVector, Grid};

/// Relative slack used when checking that branch images stay inside the
/// state space.
const IMAGE_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("branch {index} has slope {slope}; uniform expansion needs |slope| > 1")]
    NotExpanding { index: usize, slope: f64 },
    #[error("branch domains do not tile the state space: {0}")]
    Tiling(String),
    #[error("branch {index} maps outside the state space (image [{lo}, {hi}])")]
    ImageOutside { index: usize, lo: f64, hi: f64 },
    #[error("boundary point {0} is not a branch endpoint")]
    BoundaryNotEndpoint(f64),
    #[error("invalid boundary points: {0}")]
    Boundary(String),
    #[error("point {0} lies outside the state space")]
    OutsideStateSpace(f64),
    #[error("invalid state index {index} (map has {m} states)")]
    InvalidState { index: usize, m: usize },
    #[error("holes are only defined between distinct states (got {0} twice)")]
    SameState(usize),
    #[error("parameter out of range: {0}")]
    Parameter(String),
    #[error("holes exceed well capacity in well {well}: {detail}")]
    HoleCapacity { well: usize, detail: String },
    #[error("non-neighbour hole prescription beta[{i}][{j}] = {value}")]
    NonNeighbour { i: usize, j: usize, value: f64 },
}

/// Closed real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, MapError> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(MapError::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Intersection with positive length, `None` otherwise.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (hi > lo).then_some(Interval { lo, hi })
    }

    pub fn overlap(&self, other: &Interval) -> f64 {
        (self.hi.min(other.hi) - self.lo.max(other.lo)).max(0.0)
    }
}

/// Total Lebesgue measure of an interval list (assumed disjoint).
pub fn total_length(intervals: &[Interval]) -> f64 {
    intervals.iter().map(Interval::len).sum()
}

/// Sort and merge touching or overlapping intervals; drops empty pieces.
pub fn normalize(intervals: &[Interval]) -> Vec<Interval> {
    let mut v: Vec<Interval> = intervals.iter().copied().filter(|i| !i.is_empty()).collect();
    v.sort_by(|a, b| a.lo.total_cmp(&b.lo));
    let mut out: Vec<Interval> = Vec::with_capacity(v.len());
    for iv in v {
        match out.last_mut() {
            Some(last) if iv.lo <= last.hi => last.hi = last.hi.max(iv.hi),
            _ => out.push(iv),
        }
    }
    out
}

/// Intersection of two interval lists, positive-length pieces only.
pub fn intersect_lists(a: &[Interval], b: &[Interval]) -> Vec<Interval> {
    let mut out = Vec::new();
    for x in a {
        for y in b {
            if let Some(z) = x.intersect(y) {
                out.push(z);
            }
        }
    }
    out.sort_by(|p, q| p.lo.total_cmp(&q.lo));
    out
}

/// `whole` minus the union of `holes`, as sorted positive-length pieces.
pub fn subtract(whole: Interval, holes: &[Interval]) -> Vec<Interval> {
    let holes = normalize(holes);
    let mut out = Vec::new();
    let mut cursor = whole.lo;
    for h in &holes {
        if h.hi <= whole.lo || h.lo >= whole.hi {
            continue;
        }
        if h.lo > cursor {
            out.push(Interval { lo: cursor, hi: h.lo });
        }
        cursor = cursor.max(h.hi);
    }
    if whole.hi > cursor {
        out.push(Interval { lo: cursor, hi: whole.hi });
    }
    out
}

/// One affine piece `x -> slope * x + intercept` on `domain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineBranch {
    pub domain: Interval,
    pub slope: f64,
    pub intercept: f64,
}

impl AffineBranch {
    pub fn apply(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// Affine image of a sub-interval of the domain.
    pub fn image_of(&self, piece: &Interval) -> Interval {
        let a = self.apply(piece.lo);
        let b = self.apply(piece.hi);
        if a <= b {
            Interval { lo: a, hi: b }
        } else {
            Interval { lo: b, hi: a }
        }
    }

    pub fn image(&self) -> Interval {
        self.image_of(&self.domain)
    }

    /// `domain ∩ branch^{-1}(target)`, positive length only.
    /// Endpoints whose target side covers the image are taken from the
    /// domain itself, so full preimages carry no rounding.
    pub fn inverse_image(&self, target: &Interval) -> Option<Interval> {
        let img = self.image();
        let a = (target.lo - self.intercept) / self.slope;
        let b = (target.hi - self.intercept) / self.slope;
        let (lo_covered, hi_covered) = (target.lo <= img.lo, target.hi >= img.hi);
        let pre = if self.slope > 0.0 {
            Interval {
                lo: if lo_covered { self.domain.lo } else { a },
                hi: if hi_covered { self.domain.hi } else { b },
            }
        } else {
            Interval {
                lo: if hi_covered { self.domain.lo } else { b },
                hi: if lo_covered { self.domain.hi } else { a },
            }
        };
        let pre = pre.intersect(&self.domain)?;
        // A preimage a few ulps wide is an artefact of inverting a shared
        // endpoint with rounding.
        let scale = pre.lo.abs().max(pre.hi.abs()).max(1.0);
        (pre.len() > 8.0 * f64::EPSILON * scale).then_some(pre)
    }
}

/// Expanding piecewise-affine map with a declared metastable partition.
///
/// Branch domains are half-open `[lo, hi)` except the last one, which is
/// closed. Points listed in `fixed_points` are mapped to themselves and take
/// precedence over the branches (the paired tent map's `0 ↦ 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseAffineMap {
    state_space: Interval,
    branches: Vec<AffineBranch>,
    boundary_points: Vec<f64>,
    fixed_points: Vec<f64>,
}

impl PiecewiseAffineMap {
    /// Validates the structural conditions: expansion, tiling, images inside
    /// the state space, and boundary points drawn from branch endpoints.
    pub fn new(
        state_space: Interval,
        branches: Vec<AffineBranch>,
        boundary_points: Vec<f64>,
        fixed_points: Vec<f64>,
    ) -> Result<Self, MapError> {
        if state_space.is_empty() {
            return Err(MapError::InvalidInterval { lo: state_space.lo, hi: state_space.hi });
        }
        if branches.is_empty() {
            return Err(MapError::Tiling("no branches".into()));
        }
        let width = state_space.len();
        let mut cursor = state_space.lo;
        for (index, br) in branches.iter().enumerate() {
            if br.domain.is_empty() {
                return Err(MapError::Tiling(format!("branch {index} has empty domain")));
            }
            if br.domain.lo != cursor {
                return Err(MapError::Tiling(format!(
                    "branch {index} starts at {} but previous branch ends at {cursor}",
                    br.domain.lo
                )));
            }
            if !(br.slope.abs() > 1.0) || !br.intercept.is_finite() {
                return Err(MapError::NotExpanding { index, slope: br.slope });
            }
            let img = br.image();
            let slack = IMAGE_SLACK * width;
            if img.lo < state_space.lo - slack || img.hi > state_space.hi + slack {
                return Err(MapError::ImageOutside { index, lo: img.lo, hi: img.hi });
            }
            cursor = br.domain.hi;
        }
        if cursor != state_space.hi {
            return Err(MapError::Tiling(format!(
                "last branch ends at {cursor}, state space ends at {}",
                state_space.hi
            )));
        }
        if boundary_points.len() < 2 {
            return Err(MapError::Boundary("need at least two boundary points".into()));
        }
        if boundary_points[0] != state_space.lo
            || *boundary_points.last().unwrap() != state_space.hi
        {
            return Err(MapError::Boundary("first/last boundary points must be the state-space endpoints".into()));
        }
        if boundary_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MapError::Boundary("boundary points must be strictly increasing".into()));
        }
        for &b in &boundary_points {
            let is_endpoint = branches.iter().any(|br| br.domain.lo == b || br.domain.hi == b);
            if !is_endpoint {
                return Err(MapError::BoundaryNotEndpoint(b));
            }
        }
        for &p in &fixed_points {
            if !state_space.contains(p) {
                return Err(MapError::OutsideStateSpace(p));
            }
        }
        Ok(Self { state_space, branches, boundary_points, fixed_points })
    }

    pub fn state_space(&self) -> Interval {
        self.state_space
    }

    pub fn branches(&self) -> &[AffineBranch] {
        &self.branches
    }

    pub fn boundary_points(&self) -> &[f64] {
        &self.boundary_points
    }

    pub fn fixed_points(&self) -> &[f64] {
        &self.fixed_points
    }

    /// Number of metastable states.
    pub fn m(&self) -> usize {
        self.boundary_points.len() - 1
    }

    /// The state interval `I_j` (zero-based).
    pub fn state(&self, j: usize) -> Result<Interval, MapError> {
        self.check_state(j)?;
        Ok(Interval { lo: self.boundary_points[j], hi: self.boundary_points[j + 1] })
    }

    pub fn states(&self) -> Vec<Interval> {
        self.boundary_points
            .windows(2)
            .map(|w| Interval { lo: w[0], hi: w[1] })
            .collect()
    }

    fn check_state(&self, j: usize) -> Result<(), MapError> {
        if j >= self.m() {
            return Err(MapError::InvalidState { index: j, m: self.m() });
        }
        Ok(())
    }

    /// Minimum |slope| over branches (the expansion constant).
    pub fn min_expansion(&self) -> f64 {
        self.branches.iter().map(|b| b.slope.abs()).fold(f64::INFINITY, f64::min)
    }

    /// Index of the branch whose half-open domain contains `x`.
    pub fn branch_index(&self, x: f64) -> usize {
        // partition_point gives the first branch whose domain starts after x.
        let idx = self.branches.partition_point(|b| b.domain.lo <= x);
        idx.saturating_sub(1).min(self.branches.len() - 1)
    }

    pub fn eval(&self, x: f64) -> Result<f64, MapError> {
        if !self.state_space.contains(x) {
            return Err(MapError::OutsideStateSpace(x));
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation without the range check; results are clamped into the
    /// state space to absorb rounding at branch ends.
    #[inline]
    pub fn eval_unchecked(&self, x: f64) -> f64 {
        if !self.fixed_points.is_empty() && self.fixed_points.contains(&x) {
            return x;
        }
        let br = &self.branches[self.branch_index(x)];
        br.apply(x).clamp(self.state_space.lo, self.state_space.hi)
    }

    /// Metastable label `z(x)`: interior boundary points belong to the state
    /// on their left, the left end of the state space to the first state.
    #[inline]
    pub fn label(&self, x: f64) -> usize {
        let idx = self.boundary_points.partition_point(|&b| b < x);
        idx.saturating_sub(1).min(self.m() - 1)
    }

    /// True when `x` is an interior boundary point.
    pub fn on_interior_boundary(&self, x: f64) -> bool {
        let b = &self.boundary_points;
        b[1..b.len() - 1].contains(&x)
    }

    /// Exact preimage of `target` as a sorted list of positive-length pieces,
    /// one per branch meeting it.
    pub fn preimage(&self, target: &Interval) -> Vec<Interval> {
        let mut out: Vec<Interval> = self
            .branches
            .iter()
            .filter_map(|b| b.inverse_image(target))
            .collect();
        out.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        out
    }

    /// Preimage of a union of intervals.
    pub fn preimage_list(&self, targets: &[Interval]) -> Vec<Interval> {
        let mut out: Vec<Interval> = targets.iter().flat_map(|t| self.preimage(t)).collect();
        out.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        out
    }

    /// Forward image pieces of `piece`, one per branch it meets, with the
    /// absolute slope of that branch.
    pub fn image_pieces(&self, piece: &Interval) -> Vec<(Interval, f64)> {
        self.branches
            .iter()
            .filter_map(|b| piece.intersect(&b.domain).map(|p| (b.image_of(&p), b.slope.abs())))
            .collect()
    }

    /// `H_{i,j} = I_i ∩ T^{-1}(I_j)` for `i ≠ j`.
    pub fn holes(&self, i: usize, j: usize) -> Result<Vec<Interval>, MapError> {
        self.check_state(i)?;
        self.check_state(j)?;
        if i == j {
            return Err(MapError::SameState(i));
        }
        let ii = self.state(i)?;
        let ij = self.state(j)?;
        Ok(self
            .preimage(&ij)
            .into_iter()
            .filter_map(|p| p.intersect(&ii))
            .collect())
    }

    /// All of `I_j` that leaves `I_j` in one step: the union of `H_{j,k}`.
    pub fn escape_set(&self, j: usize) -> Result<Vec<Interval>, MapError> {
        let mut out = Vec::new();
        for k in 0..self.m() {
            if k != j {
                out.extend(self.holes(j, k)?);
            }
        }
        out.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        Ok(out)
    }

    /// `I_j \ H_j`, the part of `I_j` that stays in `I_j`.
    pub fn survivor_domain(&self, j: usize) -> Result<Vec<Interval>, MapError> {
        Ok(subtract(self.state(j)?, &self.escape_set(j)?))
    }

    /// `μ_i(H_{i,j})`: the hole integrated against a density on `I_i`.
    pub fn hole_measure(&self, i: usize, j: usize, density: Density<'_>) -> Result<f64, MapError> {
        let holes = self.holes(i, j)?;
        let state = self.state(i)?;
        Ok(match density {
            Density::Uniform => total_length(&holes) / state.len(),
            Density::Cells { grid, density } => holes
                .iter()
                .map(|h| density.integrate(grid, h))
                .sum(),
        })
    }

    /// Every point a grid must contain for exact Ulam entries: boundary
    /// points, branch endpoints and hole endpoints.
    pub fn alignment_points(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self.boundary_points.clone();
        for b in &self.branches {
            pts.push(b.domain.lo);
            pts.push(b.domain.hi);
        }
        for i in 0..self.m() {
            if let Ok(holes) = self.escape_set(i) {
                for h in holes {
                    pts.push(h.lo);
                    pts.push(h.hi);
                }
            }
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }
}

/// Density used by [`PiecewiseAffineMap::hole_measure`].
#[derive(Debug, Clone, Copy)]
pub enum Density<'a> {
    /// The normalized uniform density `1/|I_i|` on `I_i`.
    Uniform,
    /// A piecewise-constant density on a grid.
    Cells { grid: &'a Grid, density: &'a DensityVector },
}

/// Leakage parameters of the paired tent map (before scaling by ε).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTentParams {
    pub a: f64,
    pub b: f64,
}

impl PairedTentParams {
    pub fn new(a: f64, b: f64) -> Result<Self, MapError> {
        if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
            return Err(MapError::Parameter(format!("paired tent needs a, b > 0 (got a={a}, b={b})")));
        }
        Ok(Self { a, b })
    }
}

/// The paired tent map `T_{εa, εb}` on `[-1, 1]` with states
/// `I_L = [-1, 0]` and `I_R = [0, 1]`.
pub fn paired_tent(params: PairedTentParams, eps: f64) -> Result<PiecewiseAffineMap, MapError> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(MapError::Parameter(format!("eps must be >= 0 (got {eps})")));
    }
    let a = eps * params.a;
    let b = eps * params.b;
    if !(params.a > 0.0 && params.b > 0.0) || a > 1.0 || b > 1.0 {
        return Err(MapError::Parameter(format!("need 0 < eps*a <= 1 and 0 < eps*b <= 1 (got {a}, {b})")));
    }
    let sl = 2.0 * (1.0 + b);
    let sr = 2.0 * (1.0 + a);
    let iv = |lo, hi| Interval { lo, hi };
    let branches = vec![
        // 2(1+b)(x+1) - 1
        AffineBranch { domain: iv(-1.0, -0.5), slope: sl, intercept: sl - 1.0 },
        // -2(1+b)x - 1
        AffineBranch { domain: iv(-0.5, 0.0), slope: -sl, intercept: -1.0 },
        // -2(1+a)x + 1
        AffineBranch { domain: iv(0.0, 0.5), slope: -sr, intercept: 1.0 },
        // 2(1+a)(x-1) + 1
        AffineBranch { domain: iv(0.5, 1.0), slope: sr, intercept: 1.0 - sr },
    ];
    PiecewiseAffineMap::new(iv(-1.0, 1.0), branches, vec![-1.0, 0.0, 1.0], vec![0.0])
}

/// Synthetic m-state testbed on `[0, m]` with unit wells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MWellSpec {
    pub m: usize,
    pub well_slope: f64,
    /// `hole_lengths[i][j]` is the β prescription for the hole from well `i`
    /// into well `j`; only `|i - j| = 1` may be nonzero.
    pub hole_lengths: Vec<Vec<f64>>,
}

impl MWellSpec {
    pub fn validate(&self) -> Result<(), MapError> {
        if self.m < 2 {
            return Err(MapError::Parameter(format!("m-well needs m >= 2 (got {})", self.m)));
        }
        if !(self.well_slope > 1.0 && self.well_slope.is_finite()) {
            return Err(MapError::Parameter(format!("well slope must exceed 1 (got {})", self.well_slope)));
        }
        if self.hole_lengths.len() != self.m || self.hole_lengths.iter().any(|r| r.len() != self.m) {
            return Err(MapError::Parameter("hole prescription must be m x m".into()));
        }
        for (i, row) in self.hole_lengths.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(MapError::Parameter(format!("beta[{i}][{j}] = {v} must be >= 0")));
                }
                if v != 0.0 && i.abs_diff(j) != 1 {
                    return Err(MapError::NonNeighbour { i, j, value: v });
                }
            }
        }
        Ok(())
    }
}

/// Lengths of the unperturbed full branches of one well: `⌈s⌉ - 1` branches
/// of length `1/s` and a last branch covering the rest, so that the sum of
/// inverse slopes is one and Lebesgue measure is invariant.
fn well_branch_lengths(slope: f64) -> Vec<f64> {
    let n_full = (slope.ceil() as usize).max(2) - 1;
    let mut lens = vec![1.0 / slope; n_full];
    // in (0, 1/slope], so the last branch is at least as steep as the others
    lens.push(1.0 - n_full as f64 / slope);
    lens
}

/// Build the m-well map. Well `j` is `[j, j+1]` (zero-based). The hole into
/// the left neighbour is the left edge `[j, j + h_left)`, the hole into the
/// right neighbour is the right edge; each is mapped affinely onto the middle
/// half of the neighbouring well. The rest of the well carries rescaled full
/// branches, so Lebesgue measure on each well is invariant at ε = 0 and
/// `Leb(H_{i,j}) = ε β_{i,j} · symbol_scale` exactly.
pub fn mwell(spec: &MWellSpec, eps: f64, symbol_scale: f64) -> Result<PiecewiseAffineMap, MapError> {
    spec.validate()?;
    if !(eps >= 0.0 && eps.is_finite()) || !(symbol_scale > 0.0 && symbol_scale.is_finite()) {
        return Err(MapError::Parameter(format!("need eps >= 0 and symbol_scale > 0 (got {eps}, {symbol_scale})")));
    }
    let m = spec.m;
    let base = well_branch_lengths(spec.well_slope);
    let mut branches = Vec::new();
    for j in 0..m {
        let c = j as f64;
        let h_left = if j > 0 { eps * spec.hole_lengths[j][j - 1] * symbol_scale } else { 0.0 };
        let h_right = if j + 1 < m { eps * spec.hole_lengths[j][j + 1] * symbol_scale } else { 0.0 };
        for (h, side) in [(h_left, "left"), (h_right, "right")] {
            if h >= 0.5 {
                return Err(MapError::HoleCapacity {
                    well: j,
                    detail: format!("{side} hole of length {h} must be shorter than 1/2"),
                });
            }
        }
        let lo = c + h_left;
        let hi = c + 1.0 - h_right;
        if h_left > 0.0 {
            // onto the middle half of well j-1
            let target = Interval { lo: c - 0.75, hi: c - 0.25 };
            branches.push(affine_onto(Interval { lo: c, hi: lo }, target));
        }
        let span = hi - lo;
        let mut x = lo;
        for (k, &len) in base.iter().enumerate() {
            let end = if k + 1 == base.len() { hi } else { x + len * span };
            branches.push(affine_onto(Interval { lo: x, hi: end }, Interval { lo: c, hi: c + 1.0 }));
            x = end;
        }
        if h_right > 0.0 {
            let target = Interval { lo: c + 1.25, hi: c + 1.75 };
            branches.push(affine_onto(Interval { lo: hi, hi: c + 1.0 }, target));
        }
    }
    let boundary: Vec<f64> = (0..=m).map(|j| j as f64).collect();
    PiecewiseAffineMap::new(Interval { lo: 0.0, hi: m as f64 }, branches, boundary, Vec::new())
}

/// Increasing affine branch mapping `domain` onto `target`.
fn affine_onto(domain: Interval, target: Interval) -> AffineBranch {
    let slope = target.len() / domain.len();
    AffineBranch { domain, slope, intercept: target.lo - slope * domain.lo }
}

/// Serializable description of a map family instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MapDescription {
    PairedTent { params: PairedTentParams, eps: f64 },
    MWell { params: MWellParams, eps: f64 },
    Custom { params: CustomMapParams, #[serde(default)] eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MWellParams {
    pub m: usize,
    #[serde(default = "default_well_slope")]
    pub well_slope: f64,
    pub beta: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub symbol_scale: f64,
}

pub(crate) fn default_well_slope() -> f64 {
    2.0
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub domain: [f64; 2],
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomMapParams {
    pub state_space: [f64; 2],
    pub branches: Vec<BranchSpec>,
    pub boundary_points: Vec<f64>,
    #[serde(default)]
    pub fixed_points: Vec<f64>,
}

impl CustomMapParams {
    pub fn build(&self) -> Result<PiecewiseAffineMap, MapError> {
        let branches = self
            .branches
            .iter()
            .map(|b| {
                Ok(AffineBranch {
                    domain: Interval::new(b.domain[0], b.domain[1])?,
                    slope: b.slope,
                    intercept: b.intercept,
                })
            })
            .collect::<Result<Vec<_>, MapError>>()?;
        PiecewiseAffineMap::new(
            Interval::new(self.state_space[0], self.state_space[1])?,
            branches,
            self.boundary_points.clone(),
            self.fixed_points.clone(),
        )
    }

    pub fn from_map(map: &PiecewiseAffineMap) -> Self {
        Self {
            state_space: [map.state_space.lo, map.state_space.hi],
            branches: map
                .branches
                .iter()
                .map(|b| BranchSpec { domain: [b.domain.lo, b.domain.hi], slope: b.slope, intercept: b.intercept })
                .collect(),
            boundary_points: map.boundary_points.clone(),
            fixed_points: map.fixed_points.clone(),
        }
    }
}

impl MapDescription {
    pub fn build(&self) -> Result<PiecewiseAffineMap, MapError> {
        match self {
            MapDescription::PairedTent { params, eps } => paired_tent(*params, *eps),
            MapDescription::MWell { params, eps } => {
                let spec = MWellSpec { m: params.m, well_slope: params.well_slope, hole_lengths: params.beta.clone() };
                mwell(&spec, *eps, params.symbol_scale)
            }
            MapDescription::Custom { params, .. } => params.build(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tent(a: f64, b: f64, eps: f64) -> PiecewiseAffineMap {
        paired_tent(PairedTentParams::new(a, b).unwrap(), eps).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rounding_overshoot_leaves_no_sliver_preimage() {
        // Maps onto [1, 2], but inverting 2 lands an ulp inside the domain.
        let br = AffineBranch {
            domain: Interval { lo: 1.7215575582410605, hi: 1.8982893611530474 },
            slope: 5.658291170706859,
            intercept: -8.74107393165905,
        };
        assert!((2.0 - br.intercept) / br.slope < br.domain.hi);
        assert_eq!(br.inverse_image(&Interval { lo: 2.0, hi: 3.0 }), None);
        assert_eq!(br.inverse_image(&Interval { lo: 0.5, hi: 2.5 }), Some(br.domain));
    }

    #[test]
    fn paired_tent_reference_values() {
        let t = tent(0.2, 0.2, 0.5);
        assert!(close(t.eval(0.5).unwrap(), -0.1, 1e-15));
        assert!(close(t.eval(-0.5).unwrap(), 0.1, 1e-15));
        assert_eq!(t.eval(-1.0).unwrap(), -1.0);
        assert_eq!(t.eval(1.0).unwrap(), 1.0);
        assert_eq!(t.eval(0.0).unwrap(), 0.0);
        let t0 = tent(1.0, 1.0, 0.0);
        assert_eq!(t0.eval(0.25).unwrap(), 0.5);
        assert_eq!(t0.eval(0.75).unwrap(), 0.5);
        assert_eq!(t0.eval(-1.0).unwrap(), -1.0);
        assert_eq!(t0.m(), 2);
    }

    #[test]
    fn paired_tent_rejects_large_leakage() {
        let p = PairedTentParams::new(1.0, 1.5).unwrap();
        assert!(paired_tent(p, 0.7).is_err());
        assert!(paired_tent(p, 0.5).is_ok());
        assert!(PairedTentParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn eval_outside_state_space_fails() {
        let t = tent(1.0, 1.0, 0.1);
        assert!(matches!(t.eval(1.5), Err(MapError::OutsideStateSpace(_))));
    }

    #[test]
    fn preimage_of_upper_half_of_right_tent() {
        let t0 = tent(1.0, 1.0, 0.0);
        let pre = t0.preimage(&Interval { lo: 0.5, hi: 1.0 });
        assert_eq!(pre, vec![Interval { lo: 0.0, hi: 0.25 }, Interval { lo: 0.75, hi: 1.0 }]);
        // full state space pulls back to the branch domains
        let all = t0.preimage(&t0.state_space());
        let doms: Vec<Interval> = t0.branches().iter().map(|b| b.domain).collect();
        assert_eq!(all, doms);
        // disjoint from the image
        let t = tent(1.0, 1.0, 0.0);
        assert!(t.preimage(&Interval { lo: 2.0, hi: 3.0 }).is_empty());
    }

    #[test]
    fn paired_tent_hole_endpoints() {
        let t = tent(1.0, 0.2, 0.5); // εb = 0.1
        let h = t.holes(0, 1).unwrap();
        assert_eq!(h.len(), 2);
        assert!(close(h[0].lo, -1.2 / 2.2, 1e-15));
        assert!(close(h[0].hi, -0.5, 1e-15));
        assert!(close(h[1].lo, -0.5, 1e-15));
        assert!(close(h[1].hi, -1.0 / 2.2, 1e-15));
        assert!(close(total_length(&h), 0.1 / 1.1, 1e-15));
        let mu = t.hole_measure(0, 1, Density::Uniform).unwrap();
        assert!(close(mu, 0.090_909_090_909_090_91, 1e-15));
    }

    #[test]
    fn hole_ratio_converges_to_beta() {
        let t = tent(1.0, 1.0, 0.01);
        let mu = t.hole_measure(0, 1, Density::Uniform).unwrap();
        assert!(close(mu / 0.01, 1.0 / 1.01, 1e-12));
    }

    #[test]
    fn no_holes_without_perturbation() {
        let t = tent(1.0, 1.0, 0.0);
        assert!(t.holes(0, 1).unwrap().is_empty());
        assert!(t.holes(1, 0).unwrap().is_empty());
        assert_eq!(t.hole_measure(0, 1, Density::Uniform).unwrap(), 0.0);
        let spec = MWellSpec { m: 3, well_slope: 2.0, hole_lengths: vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]] };
        let w = mwell(&spec, 0.0, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(w.holes(i, j).unwrap().is_empty());
                }
            }
        }
    }

    #[test]
    fn holes_require_distinct_valid_states() {
        let t = tent(1.0, 1.0, 0.1);
        assert!(matches!(t.holes(0, 0), Err(MapError::SameState(0))));
        assert!(matches!(t.holes(0, 5), Err(MapError::InvalidState { .. })));
    }

    #[test]
    fn mwell_hole_lengths_are_exact() {
        let spec = MWellSpec { m: 3, well_slope: 2.0, hole_lengths: vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]] };
        let w = mwell(&spec, 0.01, 1.0).unwrap();
        let h23 = w.holes(1, 2).unwrap();
        assert_eq!(h23.len(), 1);
        assert!(close(h23[0].len(), 0.02, 1e-15));
        let h21 = w.holes(1, 0).unwrap();
        assert!(close(total_length(&h21), 0.01, 1e-15));
        assert!(close(total_length(&w.escape_set(1).unwrap()), 0.03, 1e-15));
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            let mu = w.hole_measure(i, j, Density::Uniform).unwrap();
            assert!(close(mu / 0.01, spec.hole_lengths[i][j], 1e-12));
        }
    }

    #[test]
    fn mwell_rejects_bad_specs() {
        let bad = MWellSpec { m: 3, well_slope: 2.0, hole_lengths: vec![vec![0.0, 0.0, 1.0], vec![0.0; 3], vec![0.0; 3]] };
        assert!(matches!(mwell(&bad, 0.1, 1.0), Err(MapError::NonNeighbour { .. })));
        let big = MWellSpec { m: 2, well_slope: 2.0, hole_lengths: vec![vec![0.0, 10.0], vec![1.0, 0.0]] };
        assert!(matches!(mwell(&big, 0.1, 1.0), Err(MapError::HoleCapacity { .. })));
    }

    #[test]
    fn mwell_non_integer_slope_preserves_lebesgue() {
        let spec = MWellSpec { m: 2, well_slope: 2.5, hole_lengths: vec![vec![0.0, 1.0], vec![1.0, 0.0]] };
        let w = mwell(&spec, 0.0, 1.0).unwrap();
        let inv: f64 = w.branches().iter().filter(|b| b.domain.hi <= 1.0).map(|b| 1.0 / b.slope.abs()).sum();
        assert!(close(inv, 1.0, 1e-14));
        assert!(w.min_expansion() >= 2.5 - 1e-12);
    }

    #[test]
    fn labels_follow_left_convention() {
        let t = tent(1.0, 1.0, 0.1);
        assert_eq!(t.label(-1.0), 0);
        assert_eq!(t.label(0.0), 0);
        assert_eq!(t.label(1e-300), 1);
        assert_eq!(t.label(1.0), 1);
    }

    #[test]
    fn custom_description_round_trip() {
        let t = tent(0.3, 0.7, 0.2);
        let desc = MapDescription::Custom { params: CustomMapParams::from_map(&t), eps: 0.0 };
        let json = serde_json::to_string(&desc).unwrap();
        let back: MapDescription = serde_json::from_str(&json).unwrap();
        assert_eq!(back.build().unwrap(), t);
        let pt: MapDescription = serde_json::from_str(r#"{"family":"paired_tent","params":{"a":1.0,"b":1.0},"eps":0.1}"#).unwrap();
        assert_eq!(pt.build().unwrap(), tent(1.0, 1.0, 0.1));
    }

    #[test]
    fn interval_list_helpers() {
        let whole = Interval { lo: 0.0, hi: 1.0 };
        let holes = [Interval { lo: 0.2, hi: 0.3 }, Interval { lo: 0.25, hi: 0.4 }, Interval { lo: 0.9, hi: 1.0 }];
        let rest = subtract(whole, &holes);
        assert_eq!(rest, vec![Interval { lo: 0.0, hi: 0.2 }, Interval { lo: 0.4, hi: 0.9 }]);
        assert_eq!(normalize(&holes).len(), 2);
    }
}
