//! Convex sets for tube MPC: H-polytopes, zonotopes and the operations the
//! controller needs on them (Minkowski sum, Pontryagin difference, linear
//! images, power sums and the disturbance-invariant template set).
//!
//! Support functions are the common currency. Zonotopes have a closed form;
//! H-polytopes go through a small LP.

use crate::tubempc::{compute_feedback_gain, TubeError};
use crate::vehicle::{self, ControlInput, VehicleParams, VehicleState};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Slack used by membership tests.
pub const CONTAINS_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("set is unbounded in the requested direction")]
    Unbounded,
    #[error("set is empty")]
    Empty,
    #[error("empty difference: subtrahend does not fit inside the constraint set")]
    EmptyDifference,
    #[error("constraint normal {0} is zero")]
    ZeroNormal(usize),
    #[error("non-finite data in {0}")]
    NonFinite(&'static str),
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(&'static str),
    #[error("feedback gain for family member failed: {0}")]
    Gain(String),
}

impl From<TubeError> for PolytopeError {
    fn from(e: TubeError) -> Self {
        PolytopeError::Gain(e.to_string())
    }
}

pub trait SupportFunction {
    fn dim(&self) -> usize;

    /// `max { d . x : x in S }`.
    fn support(&self, direction: &DVector<f64>) -> Result<f64, PolytopeError>;
}

/// `{ x : H x <= h }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HPolytopeJson", into = "HPolytopeJson")]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct HPolytopeJson {
    #[serde(rename = "H")]
    normals: Vec<Vec<f64>>,
    #[serde(rename = "h")]
    offsets: Vec<f64>,
}

impl TryFrom<HPolytopeJson> for HPolytope {
    type Error = PolytopeError;

    fn try_from(j: HPolytopeJson) -> Result<Self, Self::Error> {
        let rows = j.normals.len();
        if rows != j.offsets.len() {
            return Err(PolytopeError::DimensionMismatch(rows, j.offsets.len()));
        }
        let dim = j.normals.first().map_or(0, Vec::len);
        if j.normals.iter().any(|r| r.len() != dim) {
            return Err(PolytopeError::Invalid("ragged constraint matrix"));
        }
        let normals = DMatrix::from_fn(rows, dim, |i, k| j.normals[i][k]);
        HPolytope::new(normals, DVector::from_vec(j.offsets))
    }
}

impl From<HPolytope> for HPolytopeJson {
    fn from(p: HPolytope) -> Self {
        HPolytopeJson {
            normals: p
                .normals
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            offsets: p.offsets.iter().copied().collect(),
        }
    }
}

impl HPolytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, PolytopeError> {
        if normals.nrows() != offsets.len() {
            return Err(PolytopeError::DimensionMismatch(normals.nrows(), offsets.len()));
        }
        if normals.iter().chain(offsets.iter()).any(|v| v.is_nan()) {
            return Err(PolytopeError::NonFinite("polytope"));
        }
        for (i, row) in normals.row_iter().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(PolytopeError::ZeroNormal(i));
            }
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box `lo <= x <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self, PolytopeError> {
        if lo.len() != hi.len() {
            return Err(PolytopeError::DimensionMismatch(lo.len(), hi.len()));
        }
        let d = lo.len();
        let mut normals = DMatrix::zeros(2 * d, d);
        let mut offsets = DVector::zeros(2 * d);
        for i in 0..d {
            normals[(2 * i, i)] = 1.0;
            offsets[2 * i] = hi[i];
            normals[(2 * i + 1, i)] = -1.0;
            offsets[2 * i + 1] = -lo[i];
        }
        Self::new(normals, offsets)
    }

    pub fn symmetric_box(half_widths: &[f64]) -> Result<Self, PolytopeError> {
        let lo: Vec<f64> = half_widths.iter().map(|w| -w).collect();
        Self::from_box(&lo, half_widths)
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn num_constraints(&self) -> usize {
        self.normals.nrows()
    }

    /// Appends `a . x <= b`.
    pub fn with_constraint(&self, a: &DVector<f64>, b: f64) -> Result<Self, PolytopeError> {
        if a.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch(a.len(), self.dim()));
        }
        let n = self.num_constraints();
        let mut normals = self.normals.clone().insert_row(n, 0.0);
        normals.set_row(n, &a.transpose());
        let offsets = self.offsets.clone().push(b);
        Self::new(normals, offsets)
    }

    /// Intersection with another H-polytope of the same dimension.
    pub fn intersect(&self, other: &HPolytope) -> Result<Self, PolytopeError> {
        if other.dim() != self.dim() {
            return Err(PolytopeError::DimensionMismatch(self.dim(), other.dim()));
        }
        let (n1, n2) = (self.num_constraints(), other.num_constraints());
        let mut normals = DMatrix::zeros(n1 + n2, self.dim());
        normals.rows_mut(0, n1).copy_from(&self.normals);
        normals.rows_mut(n1, n2).copy_from(&other.normals);
        let mut offsets = DVector::zeros(n1 + n2);
        offsets.rows_mut(0, n1).copy_from(&self.offsets);
        offsets.rows_mut(n1, n2).copy_from(&other.offsets);
        Self::new(normals, offsets)
    }

    /// Embeds a polytope over a subset of coordinates into `dim` dimensions.
    /// `coords[k]` is the target coordinate of source coordinate `k`.
    pub fn lift(&self, dim: usize, coords: &[usize]) -> Result<Self, PolytopeError> {
        if coords.len() != self.dim() || coords.iter().any(|&c| c >= dim) {
            return Err(PolytopeError::Invalid("bad coordinate map"));
        }
        let mut normals = DMatrix::zeros(self.num_constraints(), dim);
        for (k, &c) in coords.iter().enumerate() {
            normals.set_column(c, &self.normals.column(k));
        }
        Self::new(normals, self.offsets.clone())
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.contains_with_tol(x, CONTAINS_TOL)
    }

    pub fn contains_with_tol(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && (&self.normals * x - &self.offsets)
                .iter()
                .all(|&r| r <= tol)
    }

    /// Maximizer of `d . x` over the polytope.
    pub fn support_point(&self, direction: &DVector<f64>) -> Result<(f64, DVector<f64>), PolytopeError> {
        if direction.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch(direction.len(), self.dim()));
        }
        lp_maximize(&self.normals, &self.offsets, direction)
    }

    /// Any point of the polytope, or `Empty`.
    pub fn feasible_point(&self) -> Result<DVector<f64>, PolytopeError> {
        let zero = DVector::zeros(self.dim());
        match lp_maximize(&self.normals, &self.offsets, &zero) {
            Ok((_, x)) => Ok(x),
            Err(PolytopeError::Unbounded) => Err(PolytopeError::Unbounded),
            Err(e) => Err(e),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self.feasible_point(), Err(PolytopeError::Empty))
    }

    pub fn is_bounded(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| {
            [1.0, -1.0].iter().all(|s| {
                let mut e = DVector::zeros(d);
                e[i] = *s;
                !matches!(self.support(&e), Err(PolytopeError::Unbounded))
            })
        })
    }

    /// Vertex enumeration for `dim <= 3` by intersecting every `dim`-subset of
    /// facets.
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>, PolytopeError> {
        let d = self.dim();
        if d == 0 || d > 3 {
            return Err(PolytopeError::Unsupported("vertex enumeration needs 1 <= dim <= 3"));
        }
        if !self.is_bounded() {
            return Err(PolytopeError::Unbounded);
        }
        let m = self.num_constraints();
        let scale = self.offsets.amax().max(1.0);
        let mut verts: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..d).collect();
        if m < d {
            return Err(PolytopeError::Unbounded);
        }
        loop {
            let a = DMatrix::from_fn(d, d, |r, c| self.normals[(idx[r], c)]);
            let b = DVector::from_fn(d, |r, _| self.offsets[idx[r]]);
            if let Some(x) = a.clone().lu().solve(&b) {
                if x.iter().all(|v| v.is_finite())
                    && (a.determinant().abs() > 1e-12)
                    && self.contains_with_tol(&x, 1e-9 * scale)
                    && !verts.iter().any(|v| (v - &x).amax() < 1e-9 * scale)
                {
                    verts.push(x);
                }
            }
            if !next_combination(&mut idx, m) {
                break;
            }
        }
        if verts.is_empty() {
            return Err(PolytopeError::Empty);
        }
        Ok(verts)
    }

    /// Scales the set about the origin: `{ c x : x in P }` for `c > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self, PolytopeError> {
        if !(factor > 0.0) {
            return Err(PolytopeError::Invalid("scale factor must be positive"));
        }
        Self::new(self.normals.clone(), &self.offsets * factor)
    }
}

impl SupportFunction for HPolytope {
    fn dim(&self) -> usize {
        self.normals.ncols()
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64, PolytopeError> {
        self.support_point(direction).map(|(v, _)| v)
    }
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn lp_maximize(
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    direction: &DVector<f64>,
) -> Result<(f64, DVector<f64>), PolytopeError> {
    let d = normals.ncols();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..d)
        .map(|i| lp.add_var(direction[i], (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    for (r, row) in normals.row_iter().enumerate() {
        let terms: Vec<_> = row
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(k, c)| (vars[k], *c))
            .collect();
        lp.add_constraint(terms.as_slice(), ComparisonOp::Le, offsets[r]);
    }
    match lp.solve() {
        Ok(sol) => {
            let x = DVector::from_fn(d, |i, _| *sol.var_value(vars[i]));
            Ok((direction.dot(&x), x))
        }
        Err(minilp::Error::Infeasible) => Err(PolytopeError::Empty),
        Err(minilp::Error::Unbounded) => Err(PolytopeError::Unbounded),
    }
}

/// `center + sum_i [-1, 1] g_i`, generators stored as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ZonotopeJson", into = "ZonotopeJson")]
pub struct Zonotope {
    center: DVector<f64>,
    generators: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct ZonotopeJson {
    center: Vec<f64>,
    generators: Vec<Vec<f64>>,
}

impl TryFrom<ZonotopeJson> for Zonotope {
    type Error = PolytopeError;

    fn try_from(j: ZonotopeJson) -> Result<Self, Self::Error> {
        let d = j.center.len();
        if let Some(g) = j.generators.iter().find(|g| g.len() != d) {
            return Err(PolytopeError::DimensionMismatch(g.len(), d));
        }
        let gens = DMatrix::from_fn(d, j.generators.len(), |r, c| j.generators[c][r]);
        Zonotope::new(DVector::from_vec(j.center), gens)
    }
}

impl From<Zonotope> for ZonotopeJson {
    fn from(z: Zonotope) -> Self {
        ZonotopeJson {
            center: z.center.iter().copied().collect(),
            generators: z
                .generators
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
        }
    }
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Result<Self, PolytopeError> {
        if generators.nrows() != center.len() && generators.ncols() > 0 {
            return Err(PolytopeError::DimensionMismatch(generators.nrows(), center.len()));
        }
        if center.iter().chain(generators.iter()).any(|v| !v.is_finite()) {
            return Err(PolytopeError::NonFinite("zonotope"));
        }
        let generators = if generators.ncols() == 0 {
            DMatrix::zeros(center.len(), 0)
        } else {
            generators
        };
        Ok(Self { center, generators })
    }

    /// The single point `{0}` in `dim` dimensions.
    pub fn zero(dim: usize) -> Self {
        Self {
            center: DVector::zeros(dim),
            generators: DMatrix::zeros(dim, 0),
        }
    }

    /// Axis-aligned box with the given center and half-widths. Zero widths
    /// produce no generator.
    pub fn from_box(center: &[f64], half_widths: &[f64]) -> Result<Self, PolytopeError> {
        if center.len() != half_widths.len() {
            return Err(PolytopeError::DimensionMismatch(center.len(), half_widths.len()));
        }
        if half_widths.iter().any(|w| *w < 0.0) {
            return Err(PolytopeError::Invalid("negative half-width"));
        }
        let d = center.len();
        let cols: Vec<usize> = (0..d).filter(|&i| half_widths[i] > 0.0).collect();
        let mut g = DMatrix::zeros(d, cols.len());
        for (k, &i) in cols.iter().enumerate() {
            g[(i, k)] = half_widths[i];
        }
        Self::new(DVector::from_column_slice(center), g)
    }

    pub fn symmetric_box(half_widths: &[f64]) -> Result<Self, PolytopeError> {
        Self::from_box(&vec![0.0; half_widths.len()], half_widths)
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn num_generators(&self) -> usize {
        self.generators.ncols()
    }

    pub fn minkowski_sum(&self, other: &Zonotope) -> Result<Zonotope, PolytopeError> {
        if self.dim() != other.dim() {
            return Err(PolytopeError::DimensionMismatch(self.dim(), other.dim()));
        }
        let (m1, m2) = (self.num_generators(), other.num_generators());
        let mut g = DMatrix::zeros(self.dim(), m1 + m2);
        g.columns_mut(0, m1).copy_from(&self.generators);
        g.columns_mut(m1, m2).copy_from(&other.generators);
        Zonotope::new(&self.center + &other.center, g)
    }

    pub fn affine_map(&self, map: &DMatrix<f64>) -> Result<Zonotope, PolytopeError> {
        if map.ncols() != self.dim() {
            return Err(PolytopeError::DimensionMismatch(map.ncols(), self.dim()));
        }
        Zonotope::new(map * &self.center, map * &self.generators)
    }

    /// Membership by LP feasibility of `G xi = x - c`, `|xi| <= 1`.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let rhs = x - &self.center;
        let m = self.num_generators();
        if m == 0 {
            return rhs.amax() <= CONTAINS_TOL;
        }
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = (0..m).map(|_| lp.add_var(0.0, (-1.0, 1.0))).collect();
        for (r, row) in self.generators.row_iter().enumerate() {
            let terms: Vec<_> = row
                .iter()
                .enumerate()
                .filter(|(_, c)| **c != 0.0)
                .map(|(k, c)| (vars[k], *c))
                .collect();
            if terms.is_empty() {
                if rhs[r].abs() > CONTAINS_TOL {
                    return false;
                }
                continue;
            }
            lp.add_constraint(terms.as_slice(), ComparisonOp::Le, rhs[r] + CONTAINS_TOL);
            lp.add_constraint(terms.as_slice(), ComparisonOp::Ge, rhs[r] - CONTAINS_TOL);
        }
        lp.solve().is_ok()
    }

    /// Vertex candidates by sign enumeration (at most 2^16 combinations).
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>, PolytopeError> {
        let m = self.num_generators();
        if m > 16 {
            return Err(PolytopeError::Unsupported("too many generators for vertex enumeration"));
        }
        let mut out = Vec::with_capacity(1 << m);
        for mask in 0u32..(1u32 << m) {
            let mut p = self.center.clone();
            for k in 0..m {
                let s = if mask & (1 << k) != 0 { 1.0 } else { -1.0 };
                p += self.generators.column(k) * s;
            }
            out.push(p);
        }
        Ok(out)
    }

    /// Exact H-representation for `dim <= 3`. Full-dimensional zonotopes get
    /// their facet normals from the generators directly.
    pub fn to_hpolytope(&self) -> Result<HPolytope, PolytopeError> {
        let d = self.dim();
        if d == 0 || d > 3 {
            return Err(PolytopeError::Unsupported("H-representation needs 1 <= dim <= 3"));
        }
        let full = self.num_generators() >= d && self.generators.clone().svd(false, false).rank(1e-12) == d;
        if !full {
            return hull(&self.vertices()?, d);
        }
        let g = &self.generators;
        let m = self.num_generators();
        let mut normals = Vec::new();
        match d {
            1 => normals.push(DVector::from_element(1, 1.0)),
            2 => {
                for i in 0..m {
                    normals.push(DVector::from_vec(vec![-g[(1, i)], g[(0, i)]]));
                }
            }
            _ => {
                for i in 0..m {
                    for j in i + 1..m {
                        let a = g.column(i).fixed_rows::<3>(0).into_owned();
                        let b = g.column(j).fixed_rows::<3>(0).into_owned();
                        normals.push(DVector::from_column_slice(a.cross(&b).as_slice()));
                    }
                }
            }
        }
        let normals: Vec<DVector<f64>> = normals.into_iter().flat_map(|n| [n.clone(), -n]).collect();
        let normals = dedup_directions(normals);
        let mut offsets = Vec::with_capacity(normals.len());
        for n in &normals {
            offsets.push(self.support(n)?);
        }
        let h = DMatrix::from_fn(normals.len(), d, |r, c| normals[r][c]);
        HPolytope::new(h, DVector::from_vec(offsets))
    }

    /// Per-axis half-widths of the bounding box.
    pub fn interval_hull_radius(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.generators.row(i).iter().map(|g| g.abs()).sum())
    }
}

impl SupportFunction for Zonotope {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64, PolytopeError> {
        if direction.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch(direction.len(), self.dim()));
        }
        let spread: f64 = (direction.transpose() * &self.generators)
            .iter()
            .map(|v| v.abs())
            .sum();
        Ok(direction.dot(&self.center) + spread)
    }
}

/// `{ M x : x in S }` represented through its support function only.
#[derive(Debug, Clone, Copy)]
pub struct LinearImage<'a, S: SupportFunction> {
    pub map: &'a DMatrix<f64>,
    pub set: &'a S,
}

impl<'a, S: SupportFunction> LinearImage<'a, S> {
    pub fn new(map: &'a DMatrix<f64>, set: &'a S) -> Result<Self, PolytopeError> {
        if map.ncols() != set.dim() {
            return Err(PolytopeError::DimensionMismatch(map.ncols(), set.dim()));
        }
        Ok(Self { map, set })
    }
}

impl<S: SupportFunction> SupportFunction for LinearImage<'_, S> {
    fn dim(&self) -> usize {
        self.map.nrows()
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64, PolytopeError> {
        if direction.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch(direction.len(), self.dim()));
        }
        self.set.support(&(self.map.transpose() * direction))
    }
}

/// Either representation, for operations that accept both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConvexSet {
    Polytope(HPolytope),
    Zonotope(Zonotope),
}

impl ConvexSet {
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        match self {
            ConvexSet::Polytope(p) => p.contains(x),
            ConvexSet::Zonotope(z) => z.contains(x),
        }
    }

    pub fn vertices(&self) -> Result<Vec<DVector<f64>>, PolytopeError> {
        match self {
            ConvexSet::Polytope(p) => p.vertices(),
            ConvexSet::Zonotope(z) => z.vertices(),
        }
    }

    pub fn to_hpolytope(&self) -> Result<HPolytope, PolytopeError> {
        match self {
            ConvexSet::Polytope(p) => Ok(p.clone()),
            ConvexSet::Zonotope(z) => z.to_hpolytope(),
        }
    }
}

impl SupportFunction for ConvexSet {
    fn dim(&self) -> usize {
        match self {
            ConvexSet::Polytope(p) => p.dim(),
            ConvexSet::Zonotope(z) => z.dim(),
        }
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64, PolytopeError> {
        match self {
            ConvexSet::Polytope(p) => p.support(direction),
            ConvexSet::Zonotope(z) => z.support(direction),
        }
    }
}

impl From<HPolytope> for ConvexSet {
    fn from(p: HPolytope) -> Self {
        ConvexSet::Polytope(p)
    }
}

impl From<Zonotope> for ConvexSet {
    fn from(z: Zonotope) -> Self {
        ConvexSet::Zonotope(z)
    }
}

/// `P (+) Q`. Two zonotopes stay a zonotope; anything involving an
/// H-polytope goes through vertex sums and a convex hull (`dim <= 3`).
pub fn minkowski_sum(p: &ConvexSet, q: &ConvexSet) -> Result<ConvexSet, PolytopeError> {
    if p.dim() != q.dim() {
        return Err(PolytopeError::DimensionMismatch(p.dim(), q.dim()));
    }
    if let (ConvexSet::Zonotope(a), ConvexSet::Zonotope(b)) = (p, q) {
        return Ok(ConvexSet::Zonotope(a.minkowski_sum(b)?));
    }
    if p.dim() > 3 {
        return Err(PolytopeError::Unsupported("H-polytope Minkowski sum needs dim <= 3"));
    }
    let vp = p.vertices()?;
    let vq = q.vertices()?;
    let mut sums = Vec::with_capacity(vp.len() * vq.len());
    for a in &vp {
        for b in &vq {
            sums.push(a + b);
        }
    }
    Ok(ConvexSet::Polytope(hull(&sums, p.dim())?))
}

/// `P (-) Q = { x : x + q in P for all q in Q }`, computed row-wise as
/// `h_i - support_Q(H_i)`.
pub fn pontryagin_diff(p: &HPolytope, q: &dyn SupportFunction) -> Result<HPolytope, PolytopeError> {
    if p.dim() != q.dim() {
        return Err(PolytopeError::DimensionMismatch(p.dim(), q.dim()));
    }
    let mut offsets = p.offsets.clone();
    for (i, row) in p.normals.row_iter().enumerate() {
        offsets[i] -= q.support(&row.transpose())?;
    }
    let out = HPolytope::new(p.normals.clone(), offsets)?;
    match out.feasible_point() {
        Ok(_) | Err(PolytopeError::Unbounded) => Ok(out),
        Err(PolytopeError::Empty) => Err(PolytopeError::EmptyDifference),
        Err(e) => Err(e),
    }
}

/// `{ A x : x in P }`. Exact for zonotopes; H-polytopes are mapped through
/// the inverse when `A` is square and invertible, otherwise through their
/// vertices (`dim <= 3`). For other cases use [`LinearImage`].
pub fn affine_map(map: &DMatrix<f64>, set: &ConvexSet) -> Result<ConvexSet, PolytopeError> {
    if map.ncols() != set.dim() {
        return Err(PolytopeError::DimensionMismatch(map.ncols(), set.dim()));
    }
    match set {
        ConvexSet::Zonotope(z) => Ok(ConvexSet::Zonotope(z.affine_map(map)?)),
        ConvexSet::Polytope(p) => {
            if map.is_square() {
                if let Some(inv) = map.clone().try_inverse() {
                    if (map.determinant()).abs() > 1e-12 {
                        return Ok(ConvexSet::Polytope(HPolytope::new(
                            &p.normals * inv,
                            p.offsets.clone(),
                        )?));
                    }
                }
            }
            if map.nrows() > 3 {
                return Err(PolytopeError::Unsupported("singular map into dim > 3"));
            }
            let verts: Vec<_> = p.vertices()?.iter().map(|v| map * v).collect();
            Ok(ConvexSet::Polytope(hull(&verts, map.nrows())?))
        }
    }
}

/// `W (+) A W (+) ... (+) A^{s-1} W`; `s = 0` gives `{0}`.
pub fn power_sum(a: &DMatrix<f64>, w: &Zonotope, s: usize) -> Result<Zonotope, PolytopeError> {
    let d = w.dim();
    if !a.is_square() || a.nrows() != d {
        return Err(PolytopeError::DimensionMismatch(a.nrows(), d));
    }
    if s == 0 {
        return Ok(Zonotope::zero(d));
    }
    let m = w.num_generators();
    let mut gens = DMatrix::zeros(d, m * s);
    let mut center = DVector::zeros(d);
    let mut power = DMatrix::<f64>::identity(d, d);
    for j in 0..s {
        gens.columns_mut(j * m, m).copy_from(&(&power * w.generators()));
        center += &power * w.center();
        power = a * power;
    }
    Zonotope::new(center, gens)
}

/// Supports of `W (+) ... (+) A^{s-1} W` for `s = 1..=n` along `dirs`, as
/// an `n x dirs` table. Avoids materializing every power sum.
fn power_sum_support_table(a: &DMatrix<f64>, w: &Zonotope, n: usize, dirs: &[DVector<f64>]) -> Vec<Vec<f64>> {
    let mut table = Vec::with_capacity(n);
    let mut acc = vec![0.0; dirs.len()];
    let mut term = w.clone();
    for _ in 0..n {
        for (k, d) in dirs.iter().enumerate() {
            acc[k] += term.support(d).unwrap_or(f64::INFINITY);
        }
        table.push(acc.clone());
        term = term.affine_map(a).expect("square map");
    }
    table
}

fn dedup_directions(mut dirs: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for d in dirs.drain(..) {
        let n = d.norm();
        if n == 0.0 {
            continue;
        }
        let u = d / n;
        if !out.iter().any(|o| (o - &u).amax() < 1e-9) {
            out.push(u);
        }
    }
    out
}

/// Directions that define the facets of a template polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateDirections {
    dim: usize,
    dirs: Vec<DVector<f64>>,
}

impl TemplateDirections {
    /// `+-e_i` for every axis.
    pub fn axis_aligned(dim: usize) -> Self {
        let mut dirs = Vec::with_capacity(2 * dim);
        for i in 0..dim {
            for s in [1.0, -1.0] {
                let mut e = DVector::zeros(dim);
                e[i] = s;
                dirs.push(e);
            }
        }
        Self { dim, dirs }
    }

    /// Adds `count` evenly spread unit directions in the `(i, j)` plane.
    pub fn with_plane(mut self, i: usize, j: usize, count: usize) -> Self {
        for k in 0..count {
            let ang = 2.0 * PI * k as f64 / count as f64;
            let mut e = DVector::zeros(self.dim);
            e[i] = ang.cos();
            e[j] = ang.sin();
            self.dirs.push(e);
        }
        self.dirs = dedup_directions(std::mem::take(&mut self.dirs));
        self
    }

    /// Axis directions plus 32 directions in the position plane.
    pub fn vehicle_default() -> Self {
        Self::axis_aligned(vehicle::STATE_DIM).with_plane(0, 1, 32)
    }

    pub fn directions(&self) -> &[DVector<f64>] {
        &self.dirs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dirs.len(), self.dim, |r, c| self.dirs[r][c])
    }
}

/// Which matrices the family produces at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilyDynamics {
    /// The raw model Jacobian `A(theta, v, delta)`.
    OpenLoop,
    /// `A + B K` with `K` the LQR gain for the given weights at that point.
    ClosedLoop { q: DMatrix<f64>, r: DMatrix<f64> },
}

/// Grid over headings, speeds and steering angles covering the admissible
/// ranges of the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianFamily {
    pub params: VehicleParams,
    pub dt: f64,
    pub theta_res: usize,
    pub v_res: usize,
    pub delta_res: usize,
    pub dynamics: FamilyDynamics,
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

impl JacobianFamily {
    pub fn new(params: VehicleParams, dt: f64, resolution: (usize, usize, usize), dynamics: FamilyDynamics) -> Result<Self, PolytopeError> {
        let (theta_res, v_res, delta_res) = resolution;
        if theta_res < 2 || v_res < 2 || delta_res < 2 {
            return Err(PolytopeError::Invalid("grid resolution must be at least 2 per axis"));
        }
        if !(dt > 0.0) {
            return Err(PolytopeError::Invalid("dt must be positive"));
        }
        Ok(Self {
            params,
            dt,
            theta_res,
            v_res,
            delta_res,
            dynamics,
        })
    }

    /// Grid points `(theta, v, delta)`, endpoints included.
    pub fn grid(&self) -> Vec<(f64, f64, f64)> {
        let p = &self.params;
        let mut out = Vec::with_capacity(self.theta_res * self.v_res * self.delta_res);
        for th in linspace(-PI, PI, self.theta_res) {
            for v in linspace(p.v_min, p.v_max, self.v_res) {
                for d in linspace(-p.delta_max, p.delta_max, self.delta_res) {
                    out.push((th, v, d));
                }
            }
        }
        out
    }

    /// Tube error dynamics matrix at one operating point.
    pub fn matrix_at(&self, theta: f64, v: f64, delta: f64) -> Result<DMatrix<f64>, PolytopeError> {
        let s = VehicleState::new(0.0, 0.0, theta, v, delta);
        let u = ControlInput::new(0.0, delta);
        let (a, b) = vehicle::linearize(&s, &u, self.dt, &self.params)
            .map_err(|_| PolytopeError::NonFinite("family linearization"))?;
        let a = DMatrix::from_column_slice(5, 5, a.as_slice());
        match &self.dynamics {
            FamilyDynamics::OpenLoop => Ok(a),
            FamilyDynamics::ClosedLoop { q, r } => {
                let b = DMatrix::from_column_slice(5, 2, b.as_slice());
                let gain = compute_feedback_gain(&a, &b, q, r)?;
                Ok(&a + &b * &gain.k)
            }
        }
    }

    pub fn matrices(&self) -> Result<Vec<DMatrix<f64>>, PolytopeError> {
        self.grid()
            .into_iter()
            .map(|(t, v, d)| self.matrix_at(t, v, d))
            .collect()
    }
}

/// Template outer bound of the union over the family of
/// `W (+) A W (+) ... (+) A^{s-1} W`, `1 <= s <= horizon`.
///
/// Each template offset is the largest support value over every grid matrix
/// and every partial sum, so every sampled power sum is contained.
pub fn invariant_set(
    family: &JacobianFamily,
    w: &Zonotope,
    horizon: usize,
    template: &TemplateDirections,
) -> Result<HPolytope, PolytopeError> {
    if horizon == 0 {
        return Err(PolytopeError::Invalid("horizon must be at least 1"));
    }
    let matrices = family.matrices()?;
    invariant_set_from_matrices(&matrices, w, horizon, template)
}

pub fn invariant_set_from_matrices(
    matrices: &[DMatrix<f64>],
    w: &Zonotope,
    horizon: usize,
    template: &TemplateDirections,
) -> Result<HPolytope, PolytopeError> {
    if matrices.is_empty() {
        return Err(PolytopeError::Invalid("empty matrix family"));
    }
    if horizon == 0 {
        return Err(PolytopeError::Invalid("horizon must be at least 1"));
    }
    if template.dim() != w.dim() {
        return Err(PolytopeError::DimensionMismatch(template.dim(), w.dim()));
    }
    let dirs = template.directions();
    let mut offsets = vec![f64::NEG_INFINITY; dirs.len()];
    for a in matrices {
        if a.nrows() != w.dim() || !a.is_square() {
            return Err(PolytopeError::DimensionMismatch(a.nrows(), w.dim()));
        }
        for row in power_sum_support_table(a, w, horizon, dirs) {
            for (o, v) in offsets.iter_mut().zip(row) {
                *o = o.max(v);
            }
        }
    }
    if offsets.iter().any(|o| !o.is_finite()) {
        return Err(PolytopeError::Unbounded);
    }
    HPolytope::new(template.as_matrix(), DVector::from_vec(offsets))
}

/// Convex hull of a point cloud as an H-polytope, `1 <= dim <= 3`.
///
/// Candidate facet normals come from every `(dim-1)`-subset of point
/// differences plus the coordinate axes; a candidate is kept when all
/// points lie on one side. Lower-dimensional clouds are handled in 1-D and
/// 2-D.
pub fn hull(points: &[DVector<f64>], dim: usize) -> Result<HPolytope, PolytopeError> {
    if points.is_empty() {
        return Err(PolytopeError::Empty);
    }
    if dim == 0 || dim > 3 {
        return Err(PolytopeError::Unsupported("hull needs 1 <= dim <= 3"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(PolytopeError::DimensionMismatch(p.len(), dim));
    }
    let pts = unique_points(points);
    let scale = pts.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let tol = 1e-10 * scale;

    let mut candidates: Vec<DVector<f64>> = TemplateDirections::axis_aligned(dim).dirs;
    match dim {
        1 => {}
        2 => {
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let e = &pts[j] - &pts[i];
                    let n = DVector::from_vec(vec![-e[1], e[0]]);
                    candidates.push(n.clone());
                    candidates.push(-n);
                }
            }
        }
        3 => {
            let mut any_full = false;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    for k in j + 1..pts.len() {
                        let e1 = (&pts[j] - &pts[i]).fixed_rows::<3>(0).into_owned();
                        let e2 = (&pts[k] - &pts[i]).fixed_rows::<3>(0).into_owned();
                        let n = e1.cross(&e2);
                        if n.norm() <= tol * scale {
                            continue;
                        }
                        let n = DVector::from_column_slice(n.as_slice());
                        // skip planes with points on both sides early
                        let dots: Vec<f64> = pts.iter().map(|p| n.dot(&(p - &pts[i]))).collect();
                        let nn = n.norm();
                        let pos = dots.iter().any(|d| *d > tol * nn);
                        let neg = dots.iter().any(|d| *d < -tol * nn);
                        if pos && neg {
                            any_full = true;
                            continue;
                        }
                        if pos || neg {
                            any_full = true;
                        }
                        candidates.push(if pos { -n } else { n });
                    }
                }
            }
            if !any_full && pts.len() > 1 {
                return Err(PolytopeError::Unsupported("degenerate 3-D hull"));
            }
        }
        _ => unreachable!(),
    }
    let candidates = dedup_directions(candidates);
    let mut rows = Vec::new();
    let mut offs = Vec::new();
    for n in candidates {
        let vals: Vec<f64> = pts.iter().map(|p| n.dot(p)).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let touching = vals.iter().filter(|v| **v >= max - tol).count();
        // facet normals must touch dim points unless they are axis caps
        let is_axis = n.iter().filter(|c| c.abs() > 1e-12).count() == 1;
        if touching >= dim || is_axis {
            rows.push(n);
            offs.push(max);
        }
    }
    let normals = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
    HPolytope::new(normals, DVector::from_vec(offs))
}

fn unique_points(points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for p in points {
        if !out.iter().any(|q| (q - p).amax() < 1e-12) {
            out.push(p.clone());
        }
    }
    out
}
