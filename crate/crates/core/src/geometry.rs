//! Points, descriptors, homographies and the scalar scores built on them.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Homogeneous third coordinates smaller than this are treated as points at infinity.
pub const INFINITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A unit-norm appearance descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    /// Normalizes `values` to unit length. Fails on an empty or zero vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(Error::Invalid("descriptor must be a nonzero finite vector".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm (within 1e-9) without rescaling.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("descriptor norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Descriptor) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Angle between the two descriptors in radians.
    pub fn angle(&self, other: &Descriptor) -> Result<f64> {
        Ok(self.dot(other)?.clamp(-1.0, 1.0).acos())
    }

    pub fn distance(&self, other: &Descriptor) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// One detected feature. Dummy features carry no descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: usize,
    pub pos: Point2,
    pub desc: Option<Descriptor>,
}

impl Feature {
    pub fn new(id: usize, pos: Point2, desc: Descriptor) -> Self {
        Self { id, pos, desc: Some(desc) }
    }

    pub fn dummy(id: usize) -> Self {
        Self { id, pos: Point2::new(0.0, 0.0), desc: None }
    }

    pub fn is_dummy(&self) -> bool {
        self.desc.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Ordered features of one image. Ids are `0..len` in order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub side: Side,
    features: Vec<Feature>,
}

impl FeatureSet {
    pub fn new(side: Side, features: Vec<Feature>) -> Result<Self> {
        let mut dim = None;
        for (i, f) in features.iter().enumerate() {
            if f.id != i {
                return Err(Error::Invalid(format!("feature at position {i} has id {}", f.id)));
            }
            if !f.pos.is_finite() {
                return Err(Error::Invalid(format!("feature {i} has non-finite position")));
            }
            if let Some(d) = &f.desc {
                match dim {
                    None => dim = Some(d.dim()),
                    Some(k) if k != d.dim() => return Err(Error::DimensionMismatch(k, d.dim())),
                    _ => {}
                }
            }
        }
        Ok(Self { side, features })
    }

    /// Builds a set from positions and descriptors, assigning ids in order.
    pub fn from_parts(side: Side, points: Vec<Point2>, descs: Vec<Descriptor>) -> Result<Self> {
        if points.len() != descs.len() {
            return Err(Error::Invalid("points and descriptors differ in length".into()));
        }
        let features = points
            .into_iter()
            .zip(descs)
            .enumerate()
            .map(|(i, (p, d))| Feature::new(i, p, d))
            .collect();
        Self::new(side, features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, id: usize) -> &Feature {
        &self.features[id]
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn iter(&self) -> impl Iterator<Item = &Feature> {
        self.features.iter()
    }

    /// Number of non-dummy features.
    pub fn real_count(&self) -> usize {
        self.features.iter().filter(|f| !f.is_dummy()).count()
    }

    pub(crate) fn push_dummy(&mut self) {
        let id = self.features.len();
        self.features.push(Feature::dummy(id));
    }
}

/// A 3x3 projective map from the left image to the right image.
///
/// Stored with unit Frobenius norm and its largest-magnitude entry positive,
/// so two homographies describing the same map compare equal up to rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    inv: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let m = normalize(m)?;
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::Degenerate(format!("singular homography (det {det:e})")));
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Ok(Self { m, inv: normalize(inv)? })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    /// Rebuilds a homography from previously stored matrix and inverse rows
    /// without renormalizing, so a stored value reloads bit for bit.
    pub fn from_stored(m: [[f64; 3]; 3], inv: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|r, c| m[r][c]);
        let inv = Matrix3::from_fn(|r, c| inv[r][c]);
        if m.iter().chain(inv.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite homography entry".into()));
        }
        let prod = m * inv;
        let scale = prod[(0, 0)];
        if scale.abs() < 1e-300 || (prod / scale - Matrix3::identity()).norm() > 1e-6 {
            return Err(Error::Invalid("stored inverse does not match the matrix".into()));
        }
        Ok(Self { m, inv })
    }

    /// Rows of the stored inverse.
    pub fn inverse_rows(&self) -> [[f64; 3]; 3] {
        self.inverse().rows()
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is invertible")
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
            .expect("translation is invertible")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Homography {
        Homography { m: self.inv, inv: self.m }
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        apply_matrix(&self.m, p)
    }

    pub fn apply_inverse(&self, q: Point2) -> Result<Point2> {
        apply_matrix(&self.inv, q)
    }

    /// Frobenius distance between the normalized matrices.
    pub fn distance(&self, other: &Homography) -> f64 {
        (self.m - other.m).norm()
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        out
    }
}

fn normalize(m: Matrix3<f64>) -> Result<Matrix3<f64>> {
    let norm = m.norm();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Degenerate("zero or non-finite matrix".into()));
    }
    let mut m = m / norm;
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for v in m.iter() {
        // ties resolve to the first entry in column-major order
        if v.abs() > best + 1e-15 {
            best = v.abs();
            sign = v.signum();
        }
    }
    m *= sign;
    Ok(m)
}

fn apply_matrix(m: &Matrix3<f64>, p: Point2) -> Result<Point2> {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < INFINITY_EPS || !v.z.is_finite() {
        return Err(Error::PointAtInfinity(v.z));
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

/// Scoring parameters shared by every cost computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    /// Descriptor pairs at or above this angle (radians) cannot match.
    pub angle_threshold: f64,
    /// Matching cost of the outlier model and of dummy features.
    pub outlier_cost: f64,
    /// Integer ticks per unit of cost.
    pub cost_scale: i64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            angle_threshold: std::f64::consts::FRAC_PI_4,
            outlier_cost: 2.0,
            cost_scale: 1_000_000,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_threshold > 0.0 && self.angle_threshold < std::f64::consts::PI) {
            return Err(Error::Invalid("angle threshold must lie in (0, pi)".into()));
        }
        if !(self.outlier_cost > 0.0 && self.outlier_cost.is_finite()) {
            return Err(Error::Invalid("outlier cost T must be positive".into()));
        }
        if self.cost_scale < 1 {
            return Err(Error::Invalid("cost scale must be >= 1".into()));
        }
        Ok(())
    }

    /// Converts a real cost to integer ticks.
    pub fn ticks(&self, cost: f64) -> i64 {
        (cost * self.cost_scale as f64).round() as i64
    }

    pub fn outlier_ticks(&self) -> i64 {
        self.ticks(self.outlier_cost)
    }

    pub fn to_units(&self, ticks: i64) -> f64 {
        ticks as f64 / self.cost_scale as f64
    }
}

/// A matching cost: either a finite nonnegative value or infeasible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cost {
    Finite(f64),
    Infeasible,
}

impl Cost {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Cost::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            Cost::Finite(v) => Some(*v),
            Cost::Infeasible => None,
        }
    }
}

pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2> {
    h.apply(p)
}

/// Forward plus backward transfer residual `|H p - q| + |H^-1 q - p|`.
pub fn symmetric_transfer_error(h: &Homography, p: Point2, q: Point2) -> Result<f64> {
    let fwd = h.apply(p)?.dist(&q);
    let bwd = h.apply_inverse(q)?.dist(&p);
    Ok(fwd + bwd)
}

/// Thresholded appearance penalty: zero below the angle threshold, infeasible otherwise.
pub fn appearance_penalty(a: &Descriptor, b: &Descriptor, params: &ScoreParams) -> Result<Cost> {
    let angle = a.angle(b)?;
    Ok(if angle < params.angle_threshold { Cost::Finite(0.0) } else { Cost::Infeasible })
}

/// Symmetric geometric error plus appearance penalty for a feature pair under `h`.
/// A pair whose transfer leaves the finite plane is infeasible.
pub fn matching_score(h: &Homography, p: &Feature, q: &Feature, params: &ScoreParams) -> Result<Cost> {
    let (Some(a), Some(b)) = (&p.desc, &q.desc) else {
        return Err(Error::Invalid("matching score is undefined for dummy features".into()));
    };
    if appearance_penalty(a, b, params)? == Cost::Infeasible {
        return Ok(Cost::Infeasible);
    }
    match symmetric_transfer_error(h, p.pos, q.pos) {
        Ok(e) => Ok(Cost::Finite(e)),
        Err(Error::PointAtInfinity(_)) => Ok(Cost::Infeasible),
        Err(e) => Err(e),
    }
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn spread(points: &[Point2]) -> f64 {
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        lo_x = lo_x.min(p.x);
        hi_x = hi_x.max(p.x);
        lo_y = lo_y.min(p.y);
        hi_y = hi_y.max(p.y);
    }
    (hi_x - lo_x).max(hi_y - lo_y).max(1e-300)
}

/// True when every point lies on one line (relative tolerance).
pub fn all_collinear(points: &[Point2]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let scale = spread(points);
    let tol = 1e-9 * scale * scale;
    // anchor on the farthest pair to keep the test well conditioned
    let a = points[0];
    let b = points
        .iter()
        .copied()
        .max_by(|u, v| a.dist(u).total_cmp(&a.dist(v)))
        .unwrap_or(a);
    if a.dist(&b) <= 1e-12 * scale {
        return true;
    }
    points.iter().all(|&c| cross(a, b, c).abs() <= tol * (a.dist(&b) / scale).max(1e-300))
}

fn any_three_collinear(points: &[Point2]) -> bool {
    let scale = spread(points);
    let tol = 1e-9 * scale * scale;
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if cross(points[i], points[j], points[k]).abs() <= tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Similarity that moves the centroid to the origin with mean distance sqrt(2).
fn conditioning(points: &[Point2]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean = points.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(m: &Matrix3<f64>, p: Point2) -> Point2 {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

/// Least-squares DLT homography with isotropic conditioning of both point sets.
pub fn fit_homography(pairs: &[(Point2, Point2)]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::TooFewPairs { needed: 4, got: pairs.len() });
    }
    let left: Vec<Point2> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<Point2> = pairs.iter().map(|p| p.1).collect();
    if left.iter().chain(&right).any(|p| !p.is_finite()) {
        return Err(Error::Invalid("non-finite point in correspondences".into()));
    }
    if all_collinear(&left) || all_collinear(&right) {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    if pairs.len() == 4 && (any_three_collinear(&left) || any_three_collinear(&right)) {
        return Err(Error::Degenerate("three of four points are collinear".into()));
    }

    let tl = conditioning(&left);
    let tr = conditioning(&right);
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in left.iter().zip(&right).enumerate() {
        let p = transform(&tl, *p);
        let q = transform(&tr, *q);
        let r = 2 * i;
        a[(r, 3)] = -p.x;
        a[(r, 4)] = -p.y;
        a[(r, 5)] = -1.0;
        a[(r, 6)] = q.y * p.x;
        a[(r, 7)] = q.y * p.y;
        a[(r, 8)] = q.y;
        a[(r + 1, 0)] = p.x;
        a[(r + 1, 1)] = p.y;
        a[(r + 1, 2)] = 1.0;
        a[(r + 1, 6)] = -q.x * p.x;
        a[(r + 1, 7)] = -q.x * p.y;
        a[(r + 1, 8)] = -q.x;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let smallest = order[0];
    let second = sv[order[1]];
    let largest = sv[order[order.len() - 1]];
    if largest <= 0.0 || second / largest < 1e-10 {
        return Err(Error::Degenerate("rank-deficient correspondence system".into()));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tr_inv = tr
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("conditioning is singular".into()))?;
    Homography::new(tr_inv * hn * tl)
}

/// Undirected edges of the Delaunay triangulation of `points`, as `(i, j)` with `i < j`,
/// sorted. Falls back to a symmetric 5-nearest-neighbor graph when the points are collinear.
pub fn neighbor_graph(points: &[Point2]) -> Result<Vec<(usize, usize)>> {
    if points.len() < 2 {
        return Err(Error::TooFewPairs { needed: 2, got: points.len() });
    }
    let pts: Vec<delaunator::Point> =
        points.iter().map(|p| delaunator::Point { x: p.x, y: p.y }).collect();
    let tri = if all_collinear(points) { None } else { Some(delaunator::triangulate(&pts)) };
    let mut edges = std::collections::BTreeSet::new();
    match tri {
        Some(t) if !t.triangles.is_empty() => {
            for tri in t.triangles.chunks(3) {
                for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
        _ => {
            for (i, edge) in knn_edges(points, 5) {
                edges.insert((i.min(edge), i.max(edge)));
            }
        }
    }
    Ok(edges.into_iter().collect())
}

fn knn_edges(points: &[Point2], k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let mut others: Vec<usize> = (0..points.len()).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| p.dist(&points[a]).total_cmp(&p.dist(&points[b])).then(a.cmp(&b)));
        out.extend(others.into_iter().take(k).map(|j| (i, j)));
    }
    out
}
