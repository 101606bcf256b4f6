//! Simplex geometry in `d` dimensions.
//!
//! A [`SimplicialBoundary`] is a vertex store plus a list of `(d-1)`-simplices
//! ([`Facet`]s), each carrying a weighted normal whose magnitude is the
//! facet's `(d-1)`-volume. Normals come from the cofactor expansion of the
//! `d x d` "determinant" whose first row is the basis vector symbol and whose
//! remaining rows are the edge vectors `z_i - z_1`, scaled by `1/(d-1)!`.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

pub type Point = DVector<f64>;

/// Smallest and largest supported ambient dimension.
pub const MIN_DIM: usize = 2;
pub const MAX_DIM: usize = 8;

/// Absolute tolerance on signed distances to unit-normalized hull hyperplanes.
pub const HULL_TOLERANCE: f64 = 1e-10;
/// Relative tolerance for the closedness check `|sum n_i|_inf <= tol * total_area`.
pub const CLOSEDNESS_TOLERANCE: f64 = 1e-10;
/// Relative volume below which a simplex is flagged degenerate.
const DEGENERACY_RTOL: f64 = 1e-12;
/// Orientation is ambiguous when the interior point is this close to a facet plane.
const ORIENTATION_TOLERANCE: f64 = 1e-12;
/// Points within this distance outside a facet plane still count as inside.
const CONTAINS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("dimension {0} is outside the supported range {MIN_DIM}..={MAX_DIM}")]
    Dimension(usize),
    #[error("need at least {needed} points for a {dim}-dimensional hull, got {got}")]
    TooFewPoints { dim: usize, needed: usize, got: usize },
    #[error("points do not affinely span the space")]
    DegenerateSpan,
    #[error("point {0} has the wrong dimension or a non-finite coordinate")]
    BadPoint(usize),
    #[error("facet {facet} is malformed: {reason}")]
    BadFacet { facet: usize, reason: String },
    #[error("interior point lies on the hyperplane of facet {facet}; orientation is ambiguous")]
    AmbiguousOrientation { facet: usize },
    #[error("boundary is not closed: |sum of weighted normals| = {residual:.3e} > {tolerance:.3e}")]
    NotClosed { residual: f64, tolerance: f64 },
    #[error("boundary normals have not been oriented outward")]
    NotOriented,
    #[error("invalid polytope file: {0}")]
    File(String),
}

/// Weighted normal of a `(d-1)`-simplex, with a flag for rank-deficient input.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedNormal {
    pub vector: DVector<f64>,
    pub degenerate: bool,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Rows `z_i - z_1` for `i = 2..=d`, as a `(d-1) x d` matrix.
fn edge_matrix(vertices: &[Point]) -> DMatrix<f64> {
    let d = vertices[0].len();
    assert_eq!(vertices.len(), d, "a (d-1)-simplex in R^d has d vertices");
    DMatrix::from_fn(d - 1, d, |r, c| vertices[r + 1][c] - vertices[0][c])
}

/// Weighted outward-or-inward normal of the simplex spanned by `vertices`.
///
/// The result is orthogonal to every edge `z_i - z_1` and its norm is the
/// simplex `(d-1)`-volume. Degenerate input yields the zero vector with
/// `degenerate = true`.
pub fn weighted_normal(vertices: &[Point]) -> WeightedNormal {
    let edges = edge_matrix(vertices);
    let d = edges.ncols();
    let scale = factorial(d - 1);
    let mut v = DVector::zeros(d);
    for k in 0..d {
        let minor = edges.clone().remove_column(k);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        v[k] = sign * minor.determinant() / scale;
    }
    // Hadamard bound: the parallelotope volume never exceeds the edge-length product.
    let bound: f64 = edges.row_iter().map(|r| r.norm()).product::<f64>() / scale;
    let norm = v.norm();
    if norm.is_nan() || norm <= DEGENERACY_RTOL * bound {
        return WeightedNormal {
            vector: DVector::zeros(d),
            degenerate: true,
        };
    }
    WeightedNormal {
        vector: v,
        degenerate: false,
    }
}

/// `w · weighted_normal(vertices)` evaluated as a single `d x d` determinant.
pub fn dot_with_normal(w: &DVector<f64>, vertices: &[Point]) -> f64 {
    let edges = edge_matrix(vertices);
    let d = edges.ncols();
    assert_eq!(w.len(), d);
    let m = DMatrix::from_fn(d, d, |r, c| if r == 0 { w[c] } else { edges[(r - 1, c)] });
    m.determinant() / factorial(d - 1)
}

/// One `(d-1)`-simplex of a boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub vertex_ids: Vec<usize>,
    pub weighted_normal: DVector<f64>,
    pub area: f64,
    pub degenerate: bool,
}

impl Facet {
    fn new(vertex_ids: Vec<usize>, vertices: &[Point]) -> Self {
        let pts: Vec<Point> = vertex_ids.iter().map(|&i| vertices[i].clone()).collect();
        let n = weighted_normal(&pts);
        Facet {
            vertex_ids,
            area: n.vector.norm(),
            weighted_normal: n.vector,
            degenerate: n.degenerate,
        }
    }

    /// Unit normal; the zero vector for degenerate facets.
    pub fn unit_normal(&self) -> DVector<f64> {
        if self.degenerate || self.area == 0.0 {
            DVector::zeros(self.weighted_normal.len())
        } else {
            &self.weighted_normal / self.area
        }
    }

    fn flip(&mut self) {
        self.weighted_normal.neg_mut();
        self.vertex_ids.swap(0, 1);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplicialBoundary {
    pub vertices: Vec<Point>,
    pub facets: Vec<Facet>,
    pub interior_point: Point,
    oriented: bool,
}

impl SimplicialBoundary {
    /// Builds a boundary from vertex-index lists, computing every facet normal.
    /// The result is not yet oriented; see [`SimplicialBoundary::orient_outward`].
    pub fn from_facets(
        vertices: Vec<Point>,
        facets: Vec<Vec<usize>>,
        interior_point: Point,
    ) -> Result<Self, GeometryError> {
        let d = interior_point.len();
        if !(MIN_DIM..=MAX_DIM).contains(&d) {
            return Err(GeometryError::Dimension(d));
        }
        for (i, v) in vertices.iter().enumerate() {
            if v.len() != d || v.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::BadPoint(i));
            }
        }
        if interior_point.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::BadPoint(usize::MAX));
        }
        let mut out = Vec::with_capacity(facets.len());
        for (fi, ids) in facets.into_iter().enumerate() {
            if ids.len() != d {
                return Err(GeometryError::BadFacet {
                    facet: fi,
                    reason: format!("has {} vertices, expected {d}", ids.len()),
                });
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= vertices.len()) {
                return Err(GeometryError::BadFacet {
                    facet: fi,
                    reason: format!("vertex id {bad} out of range"),
                });
            }
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(GeometryError::BadFacet {
                    facet: fi,
                    reason: "repeated vertex id".into(),
                });
            }
            out.push(Facet::new(ids, &vertices));
        }
        Ok(SimplicialBoundary {
            vertices,
            facets: out,
            interior_point,
            oriented: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.interior_point.len()
    }

    pub fn is_oriented(&self) -> bool {
        self.oriented
    }

    /// Marks the normals as outward without checking. Used when orientation
    /// is known from construction, e.g. when exporting a refined complex.
    pub(crate) fn assume_oriented(mut self) -> Self {
        self.oriented = true;
        self
    }

    pub fn facet_points(&self, facet: usize) -> Vec<Point> {
        self.facets[facet]
            .vertex_ids
            .iter()
            .map(|&i| self.vertices[i].clone())
            .collect()
    }

    pub fn facet_centroid(&self, facet: usize) -> Point {
        let f = &self.facets[facet];
        let mut c = DVector::zeros(self.dim());
        for &i in &f.vertex_ids {
            c += &self.vertices[i];
        }
        c / f.vertex_ids.len() as f64
    }

    pub fn total_area(&self) -> f64 {
        self.facets.iter().map(|f| f.area).sum()
    }

    /// Vector sum of all weighted normals; zero for a closed boundary.
    pub fn normal_sum(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.dim());
        for f in &self.facets {
            s += &f.weighted_normal;
        }
        s
    }

    /// `‖Σ weighted_normal‖∞`.
    pub fn closedness_residual(&self) -> f64 {
        self.normal_sum().amax()
    }

    pub fn check_closed(&self) -> Result<(), GeometryError> {
        let residual = self.closedness_residual();
        let tolerance = CLOSEDNESS_TOLERANCE * self.total_area();
        if residual <= tolerance {
            Ok(())
        } else {
            Err(GeometryError::NotClosed {
                residual,
                tolerance,
            })
        }
    }

    /// True when every `(d-2)`-face is shared by an even number of facets.
    pub fn ridges_paired(&self) -> bool {
        let mut counts = std::collections::BTreeMap::<Vec<usize>, usize>::new();
        for f in &self.facets {
            for skip in 0..f.vertex_ids.len() {
                let mut ridge: Vec<usize> = f
                    .vertex_ids
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != skip)
                    .map(|(_, &v)| v)
                    .collect();
                ridge.sort_unstable();
                *counts.entry(ridge).or_default() += 1;
            }
        }
        counts.values().all(|c| c % 2 == 0)
    }

    /// Sorted distinct vertex ids referenced by at least one facet.
    pub fn used_vertex_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .facets
            .iter()
            .flat_map(|f| f.vertex_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Flips facet normals so that each points away from `interior_point`.
    pub fn orient_outward(mut self) -> Result<Self, GeometryError> {
        for fi in 0..self.facets.len() {
            if self.facets[fi].degenerate {
                continue;
            }
            let offset = self.facet_centroid(fi) - &self.interior_point;
            let f = &mut self.facets[fi];
            let s = f.weighted_normal.dot(&offset);
            if s.abs() <= ORIENTATION_TOLERANCE * f.area {
                return Err(GeometryError::AmbiguousOrientation { facet: fi });
            }
            if s < 0.0 {
                f.flip();
            }
        }
        self.oriented = true;
        Ok(self)
    }

    /// Enclosed volume as the flux of `x/d` through the boundary.
    pub fn volume(&self) -> Result<f64, GeometryError> {
        if !self.oriented {
            return Err(GeometryError::NotOriented);
        }
        self.check_closed()?;
        let d = self.dim() as f64;
        // Flux is translation invariant on a closed surface; centering on the
        // interior point keeps the terms small.
        let flux = (0..self.facets.len())
            .map(|fi| {
                let c = self.facet_centroid(fi) - &self.interior_point;
                c.dot(&self.facets[fi].weighted_normal) / d
            })
            .sum();
        Ok(flux)
    }

    /// Half-space membership test; boundary points count as inside.
    pub fn contains(&self, x: &Point) -> bool {
        self.facets.iter().all(|f| {
            let v0 = &self.vertices[f.vertex_ids[0]];
            (x - v0).dot(&f.weighted_normal) <= CONTAINS_TOLERANCE * f.area
        })
    }

    /// Sampler for points uniform in the enclosed polytope.
    pub fn interior_sampler(&self) -> Result<InteriorSampler, GeometryError> {
        let d = self.dim();
        let mut cones = Vec::new();
        let mut weights = Vec::new();
        for (fi, f) in self.facets.iter().enumerate() {
            if f.degenerate {
                continue;
            }
            let v0 = &self.vertices[f.vertex_ids[0]];
            let vol = f.weighted_normal.dot(&(v0 - &self.interior_point)).abs() / d as f64;
            if vol > 0.0 {
                let mut pts = self.facet_points(fi);
                pts.push(self.interior_point.clone());
                cones.push(pts);
                weights.push(vol);
            }
        }
        let index = WeightedIndex::new(&weights).map_err(|_| GeometryError::DegenerateSpan)?;
        Ok(InteriorSampler { cones, index })
    }

    /// Sampler for points uniform on the boundary surface.
    pub fn facet_sampler(&self) -> Result<FacetSampler, GeometryError> {
        let weights: Vec<f64> = self.facets.iter().map(|f| f.area).collect();
        let index = WeightedIndex::new(&weights).map_err(|_| GeometryError::DegenerateSpan)?;
        let simplices = (0..self.facets.len()).map(|i| self.facet_points(i)).collect();
        Ok(FacetSampler { simplices, index })
    }

    pub fn to_file(&self) -> PolytopeFile {
        PolytopeFile {
            d: self.dim(),
            vertices: self.vertices.iter().map(|v| v.iter().copied().collect()).collect(),
            facets: self.facets.iter().map(|f| f.vertex_ids.clone()).collect(),
        }
    }

    /// Loads a boundary, recomputes normals and orients them away from the
    /// centroid of the referenced vertices.
    pub fn from_file(file: &PolytopeFile) -> Result<Self, GeometryError> {
        let d = file.d;
        let vertices: Vec<Point> = file
            .vertices
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() == d {
                    Ok(DVector::from_vec(v.clone()))
                } else {
                    Err(GeometryError::BadPoint(i))
                }
            })
            .collect::<Result<_, _>>()?;
        if file.facets.is_empty() {
            return Err(GeometryError::File("no facets".into()));
        }
        let mut used: Vec<usize> = file.facets.iter().flatten().copied().collect();
        used.sort_unstable();
        used.dedup();
        if used.iter().any(|&i| i >= vertices.len()) {
            return Err(GeometryError::File("facet references a missing vertex".into()));
        }
        let mut centroid = DVector::zeros(d);
        for &i in &used {
            centroid += &vertices[i];
        }
        centroid /= used.len() as f64;
        SimplicialBoundary::from_facets(vertices, file.facets.clone(), centroid)?.orient_outward()
    }
}

/// Free-function form of [`SimplicialBoundary::orient_outward`].
pub fn orient_outward(boundary: SimplicialBoundary) -> Result<SimplicialBoundary, GeometryError> {
    boundary.orient_outward()
}

/// Free-function form of [`SimplicialBoundary::volume`].
pub fn polytope_volume(boundary: &SimplicialBoundary) -> Result<f64, GeometryError> {
    boundary.volume()
}

/// On-disk polytope: `{"d": .., "vertices": [[..]], "facets": [[ids]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeFile {
    pub d: usize,
    pub vertices: Vec<Vec<f64>>,
    pub facets: Vec<Vec<usize>>,
}

/// Uniform barycentric weights for a simplex with `k` vertices.
fn barycentric<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn combine(points: &[Point], weights: &[f64]) -> Point {
    let mut p = DVector::zeros(points[0].len());
    for (q, &w) in points.iter().zip(weights) {
        p.axpy(w, q, 1.0);
    }
    p
}

/// Uniform sampling inside a polytope via its cone decomposition about the
/// interior point.
#[derive(Debug, Clone)]
pub struct InteriorSampler {
    cones: Vec<Vec<Point>>,
    index: WeightedIndex<f64>,
}

impl InteriorSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let cone = &self.cones[self.index.sample(rng)];
        combine(cone, &barycentric(rng, cone.len()))
    }
}

/// Uniform sampling on the boundary surface; facets are chosen in proportion
/// to their area.
#[derive(Debug, Clone)]
pub struct FacetSampler {
    simplices: Vec<Vec<Point>>,
    index: WeightedIndex<f64>,
}

impl FacetSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Point, usize) {
        let fi = self.index.sample(rng);
        let s = &self.simplices[fi];
        (combine(s, &barycentric(rng, s.len())), fi)
    }

    /// Uniform point on one specific facet.
    pub fn sample_on<R: Rng + ?Sized>(&self, rng: &mut R, facet: usize) -> Point {
        let s = &self.simplices[facet];
        combine(s, &barycentric(rng, s.len()))
    }
}

pub fn sample_uniform<R: Rng + ?Sized>(
    boundary: &SimplicialBoundary,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Point>, GeometryError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let sampler = boundary.interior_sampler()?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

pub fn sample_uniform_on_facets<R: Rng + ?Sized>(
    boundary: &SimplicialBoundary,
    rng: &mut R,
    n: usize,
) -> Result<Vec<(Point, usize)>, GeometryError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let sampler = boundary.facet_sampler()?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

// ---------------------------------------------------------------------------
// Convex hulls
// ---------------------------------------------------------------------------

/// Convex hull of `points` as an oriented simplicial boundary.
///
/// Facets are found by brute force: every `d`-subset whose hyperplane keeps all
/// other points on one side supports a face. Faces with more than `d` points
/// on their hyperplane are triangulated by pulling from their
/// lexicographically smallest point, recursively, so that shared lower faces
/// are split identically on both sides. Only hull vertices are kept in the
/// vertex store; the interior point is their centroid.
pub fn convex_hull(points: &[Point]) -> Result<SimplicialBoundary, GeometryError> {
    let d = points.first().map_or(0, |p| p.len());
    if !(MIN_DIM..=MAX_DIM).contains(&d) {
        return Err(GeometryError::Dimension(d));
    }
    if points.len() < d + 1 {
        return Err(GeometryError::TooFewPoints {
            dim: d,
            needed: d + 1,
            got: points.len(),
        });
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != d || p.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::BadPoint(i));
        }
    }
    let spread = DMatrix::from_fn(points.len() - 1, d, |r, c| points[r + 1][c] - points[0][c]);
    let scale = spread.amax().max(f64::MIN_POSITIVE);
    if (spread / scale).rank(1e-9) < d {
        return Err(GeometryError::DegenerateSpan);
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(points[b].iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut lex_rank = vec![0; points.len()];
    for (rank, &i) in order.iter().enumerate() {
        lex_rank[i] = rank;
    }

    let faces = hull_faces(points, &lex_rank);
    if faces.is_empty() {
        return Err(GeometryError::DegenerateSpan);
    }

    let mut used: Vec<usize> = faces.iter().flat_map(|f| f.simplex.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let mut remap = vec![usize::MAX; points.len()];
    for (new, &old) in used.iter().enumerate() {
        remap[old] = new;
    }
    let vertices: Vec<Point> = used.iter().map(|&i| points[i].clone()).collect();
    let mut centroid = DVector::zeros(d);
    for v in &vertices {
        centroid += v;
    }
    centroid /= vertices.len() as f64;
    let facets = faces
        .into_iter()
        .map(|f| f.simplex.into_iter().map(|i| remap[i]).collect())
        .collect();
    SimplicialBoundary::from_facets(vertices, facets, centroid)?.orient_outward()
}

/// A boundary simplex plus every input point on the supporting hyperplane of
/// the face it triangulates.
struct HullFace {
    simplex: Vec<usize>,
    support: Vec<usize>,
}

/// Triangulated boundary of `conv(points)` in `k = points[0].len()`
/// dimensions, in local indices. `rank` orders points for apex selection.
fn hull_faces(points: &[Point], rank: &[usize]) -> Vec<HullFace> {
    let k = points[0].len();
    let n = points.len();
    if k == 1 {
        let lo = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= HULL_TOLERANCE {
            return Vec::new();
        }
        return [lo, hi]
            .iter()
            .map(|&end| {
                let support: Vec<usize> =
                    (0..n).filter(|&i| (points[i][0] - end).abs() <= HULL_TOLERANCE).collect();
                let pick = *support.iter().min_by_key(|&&i| rank[i]).unwrap();
                HullFace {
                    simplex: vec![pick],
                    support,
                }
            })
            .collect();
    }

    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut faces = Vec::new();
    let mut in_seen = vec![false; n];
    for subset in Combinations::new(n, k) {
        // Any subset inside an already-found face hyperplane spans that same face.
        if seen.iter().any(|s| {
            in_seen.iter_mut().for_each(|b| *b = false);
            s.iter().for_each(|&i| in_seen[i] = true);
            subset.iter().all(|&i| in_seen[i])
        }) {
            continue;
        }
        let pts: Vec<Point> = subset.iter().map(|&i| points[i].clone()).collect();
        let wn = weighted_normal(&pts);
        if wn.degenerate {
            continue;
        }
        let normal = wn.vector.normalize();
        let offset = normal.dot(&pts[0]);
        let dist: Vec<f64> = points.iter().map(|p| normal.dot(p) - offset).collect();
        let above = dist.iter().any(|&s| s > HULL_TOLERANCE);
        let below = dist.iter().any(|&s| s < -HULL_TOLERANCE);
        if above == below {
            continue;
        }
        let support: Vec<usize> = (0..n).filter(|&i| dist[i].abs() <= HULL_TOLERANCE).collect();
        seen.push(support.clone());
        if support.len() == k {
            faces.push(HullFace {
                simplex: support.clone(),
                support,
            });
            continue;
        }
        let apex = *support.iter().min_by_key(|&&i| rank[i]).unwrap();
        let basis = complement_basis(&normal);
        let origin = &points[support[0]];
        let projected: Vec<Point> = support
            .iter()
            .map(|&i| {
                let rel = &points[i] - origin;
                DVector::from_iterator(k - 1, basis.iter().map(|b| b.dot(&rel)))
            })
            .collect();
        let sub_rank: Vec<usize> = support.iter().map(|&i| rank[i]).collect();
        for sub in hull_faces(&projected, &sub_rank) {
            if sub.support.iter().any(|&j| support[j] == apex) {
                continue;
            }
            let mut simplex = vec![apex];
            simplex.extend(sub.simplex.iter().map(|&j| support[j]));
            faces.push(HullFace {
                simplex,
                support: support.clone(),
            });
        }
    }
    faces
}

/// Orthonormal basis of the hyperplane orthogonal to the unit vector `normal`.
fn complement_basis(normal: &DVector<f64>) -> Vec<DVector<f64>> {
    let k = normal.len();
    let mut axes: Vec<usize> = (0..k).collect();
    axes.sort_by(|&a, &b| normal[a].abs().total_cmp(&normal[b].abs()));
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k - 1);
    for axis in axes {
        if basis.len() == k - 1 {
            break;
        }
        let mut v = DVector::zeros(k);
        v[axis] = 1.0;
        v.axpy(-normal.dot(&v), normal, 1.0);
        for b in &basis {
            let c = b.dot(&v);
            v.axpy(-c, b, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    basis
}

/// Lexicographic `k`-subsets of `0..n`.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let c = self.current.as_mut().unwrap();
        let k = c.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if c[i] < self.n - k + i {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Corners of the unit cube `[0,1]^d`.
pub fn unit_cube_corners(d: usize) -> Vec<Point> {
    (0..1usize << d)
        .map(|mask| DVector::from_fn(d, |i, _| ((mask >> i) & 1) as f64))
        .collect()
}

/// Boundary of `[0,1]^d` with each facet split into `(d-1)!` Kuhn simplices,
/// oriented outward. Vertex `k` is the corner whose coordinate bits are `k`.
pub fn unit_cube_boundary(d: usize) -> Result<SimplicialBoundary, GeometryError> {
    if !(MIN_DIM..=MAX_DIM).contains(&d) {
        return Err(GeometryError::Dimension(d));
    }
    let mut facets = Vec::new();
    for axis in 0..d {
        let free: Vec<usize> = (0..d).filter(|&j| j != axis).collect();
        for side in 0..2usize {
            let base = side << axis;
            for perm in permutations(&free) {
                let mut mask = base;
                let mut ids = vec![mask];
                for &j in &perm {
                    mask |= 1 << j;
                    ids.push(mask);
                }
                facets.push(ids);
            }
        }
    }
    SimplicialBoundary::from_facets(unit_cube_corners(d), facets, DVector::from_element(d, 0.5))?.orient_outward()
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        let rest: Vec<usize> = items.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &v)| v).collect();
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

/// Vertices `0, e_1, ..., e_d` of the standard simplex.
pub fn standard_simplex_vertices(d: usize) -> Vec<Point> {
    let mut pts = vec![DVector::zeros(d)];
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        pts.push(e);
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn p(c: &[f64]) -> Point {
        DVector::from_row_slice(c)
    }

    fn sphere_points(d: usize, n: usize, seed: u64) -> Vec<Point> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                v.normalize()
            })
            .collect()
    }

    /// Volume of a k-simplex from pairwise distances only.
    fn cayley_menger_volume(pts: &[Point]) -> f64 {
        let m = pts.len();
        let k = m - 1;
        let cm = DMatrix::from_fn(m + 1, m + 1, |r, c| match (r, c) {
            (0, 0) => 0.0,
            (0, _) | (_, 0) => 1.0,
            _ => (&pts[r - 1] - &pts[c - 1]).norm_squared(),
        });
        let sign = if (k + 1).is_multiple_of(2) { 1.0 } else { -1.0 };
        let v2 = sign * cm.determinant() / (2f64.powi(k as i32) * factorial(k).powi(2));
        v2.max(0.0).sqrt()
    }

    /// `(d-1)`-volume from the Gram determinant of the edge vectors.
    fn gram_volume(pts: &[Point]) -> f64 {
        let e = edge_matrix(pts);
        (&e * e.transpose()).determinant().max(0.0).sqrt() / factorial(pts.len() - 1)
    }

    #[test]
    fn normal_of_unit_segment() {
        let n = weighted_normal(&[p(&[0.0, 0.0]), p(&[1.0, 0.0])]);
        assert!(!n.degenerate);
        assert_eq!(n.vector, p(&[0.0, -1.0]));
        assert_eq!(n.vector.norm(), 1.0);
    }

    #[test]
    fn normal_of_unit_right_triangle() {
        let n = weighted_normal(&[p(&[0.0, 0.0, 0.0]), p(&[1.0, 0.0, 0.0]), p(&[0.0, 1.0, 0.0])]);
        assert_eq!(n.vector, p(&[0.0, 0.0, 0.5]));
    }

    #[test]
    fn normal_of_unit_tetrahedron_matches_cayley_menger() {
        let pts = vec![
            p(&[0.0, 0.0, 0.0, 0.0]),
            p(&[1.0, 0.0, 0.0, 0.0]),
            p(&[0.0, 1.0, 0.0, 0.0]),
            p(&[0.0, 0.0, 1.0, 0.0]),
        ];
        let n = weighted_normal(&pts);
        assert_eq!(n.vector.rows(0, 3).amax(), 0.0);
        assert!((n.vector[3].abs() - 1.0 / 6.0).abs() < 1e-15);
        let cm = cayley_menger_volume(&pts);
        assert!((n.vector.norm() - cm).abs() < 1e-12, "{} vs {cm}", n.vector.norm());
    }

    #[test]
    fn random_simplex_normals_match_cayley_menger() {
        let mut rng = rng_from_seed(11);
        for d in 2..=6 {
            for _ in 0..20 {
                let pts: Vec<Point> = (0..d)
                    .map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>()))
                    .collect();
                let n = weighted_normal(&pts);
                let cm = cayley_menger_volume(&pts);
                assert!((n.vector.norm() - cm).abs() <= 1e-9 * cm.max(1e-3), "d={d}");
                for i in 1..d {
                    assert!(n.vector.dot(&(&pts[i] - &pts[0])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_simplex_is_flagged() {
        let n = weighted_normal(&[p(&[0.0, 0.0, 0.0]), p(&[1.0, 1.0, 1.0]), p(&[2.0, 2.0, 2.0])]);
        assert!(n.degenerate);
        assert_eq!(n.vector.norm(), 0.0);
    }

    #[test]
    fn dot_with_normal_examples() {
        let tri = [p(&[0.0, 0.0, 0.0]), p(&[1.0, 0.0, 0.0]), p(&[0.0, 1.0, 0.0])];
        assert_eq!(dot_with_normal(&p(&[0.0, 0.0, 1.0]), &tri), 0.5);
        let e = &tri[1] - &tri[0];
        assert_eq!(dot_with_normal(&e, &tri), 0.0);
    }

    #[test]
    fn dot_with_normal_matches_cross_product() {
        let mut rng = rng_from_seed(3);
        for _ in 0..50 {
            let tri: Vec<Point> = (0..3)
                .map(|_| DVector::from_fn(3, |_, _| rng.random::<f64>() * 2.0 - 1.0))
                .collect();
            let w = DVector::from_fn(3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let a = nalgebra::Vector3::new(tri[1][0] - tri[0][0], tri[1][1] - tri[0][1], tri[1][2] - tri[0][2]);
            let b = nalgebra::Vector3::new(tri[2][0] - tri[0][0], tri[2][1] - tri[0][1], tri[2][2] - tri[0][2]);
            let cross = a.cross(&b) / 2.0;
            let expected = w[0] * cross[0] + w[1] * cross[1] + w[2] * cross[2];
            let got = dot_with_normal(&w, &tri);
            assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            let via_normal = w.dot(&weighted_normal(&tri).vector);
            assert!((got - via_normal).abs() <= 1e-12 * got.abs().max(1e-3));
        }
    }

    fn unit_square_boundary() -> SimplicialBoundary {
        let v = vec![p(&[0.0, 0.0]), p(&[1.0, 0.0]), p(&[1.0, 1.0]), p(&[0.0, 1.0])];
        SimplicialBoundary::from_facets(v, vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 0]], p(&[0.5, 0.5]))
            .unwrap()
    }

    #[test]
    fn orient_unit_square() {
        let b = unit_square_boundary().orient_outward().unwrap();
        for fi in 0..4 {
            let out = b.facet_centroid(fi) - p(&[0.5, 0.5]);
            assert!(b.facets[fi].weighted_normal.dot(&out) > 0.0);
        }
        let again = b.clone().orient_outward().unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn orient_rejects_interior_point_on_facet_plane() {
        let v = vec![p(&[0.0, 0.0]), p(&[1.0, 0.0]), p(&[1.0, 1.0]), p(&[0.0, 1.0])];
        let b = SimplicialBoundary::from_facets(
            v,
            vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 0]],
            p(&[0.5, 0.0]),
        )
        .unwrap();
        assert!(matches!(b.orient_outward(), Err(GeometryError::AmbiguousOrientation { facet: 0 })));
    }

    #[test]
    fn orient_repairs_randomly_flipped_boundary() {
        let hull = convex_hull(&sphere_points(3, 12, 5)).unwrap();
        let mut rng = rng_from_seed(9);
        let mut facets: Vec<Vec<usize>> = hull.facets.iter().map(|f| f.vertex_ids.clone()).collect();
        for f in &mut facets {
            if rng.random::<bool>() {
                f.swap(0, 1);
            }
        }
        let scrambled =
            SimplicialBoundary::from_facets(hull.vertices.clone(), facets, hull.interior_point.clone()).unwrap();
        assert!(scrambled.check_closed().is_err());
        let fixed = scrambled.orient_outward().unwrap();
        fixed.check_closed().unwrap();
        assert!((fixed.volume().unwrap() - hull.volume().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hull_of_simplex_points() {
        for d in 2..=6 {
            let hull = convex_hull(&standard_simplex_vertices(d)).unwrap();
            assert_eq!(hull.facets.len(), d + 1);
            assert!((hull.volume().unwrap() - 1.0 / factorial(d)).abs() < 1e-12);
        }
    }

    #[test]
    fn hull_excludes_interior_points() {
        let mut pts = unit_cube_corners(2);
        pts.push(p(&[0.5, 0.5]));
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.facets.len(), 4);
        assert_eq!(hull.vertices.len(), 4);
        assert!(!hull.vertices.contains(&p(&[0.5, 0.5])));
    }

    #[test]
    fn hull_of_sphere_points_satisfies_euler() {
        let pts = sphere_points(3, 20, 1);
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.vertices.len(), 20);
        let mut edges = std::collections::BTreeSet::new();
        for f in &hull.facets {
            for a in 0..3 {
                for b in a + 1..3 {
                    let (u, v) = (f.vertex_ids[a], f.vertex_ids[b]);
                    edges.insert((u.min(v), u.max(v)));
                }
            }
        }
        let (v, e, f) = (hull.vertices.len() as i64, edges.len() as i64, hull.facets.len() as i64);
        assert_eq!(v - e + f, 2);
        assert!(hull.ridges_paired());
    }

    #[test]
    fn hull_rejects_bad_input() {
        assert!(matches!(
            convex_hull(&[p(&[0.0, 0.0]), p(&[1.0, 0.0])]),
            Err(GeometryError::TooFewPoints { .. })
        ));
        let line = vec![p(&[0.0, 0.0]), p(&[1.0, 1.0]), p(&[2.0, 2.0]), p(&[3.0, 3.0])];
        assert!(matches!(convex_hull(&line), Err(GeometryError::DegenerateSpan)));
    }

    #[test]
    fn kuhn_cube_boundary_matches_hull() {
        for d in 2..=6 {
            let b = unit_cube_boundary(d).unwrap();
            assert_eq!(b.facets.len() as f64, 2.0 * d as f64 * factorial(d - 1));
            assert!(b.ridges_paired());
            assert!(b.check_closed().is_ok());
            assert!((b.volume().unwrap() - 1.0).abs() < 1e-12);
            assert!(b.facets.iter().all(|f| !f.degenerate));
        }
        let hull = convex_hull(&unit_cube_corners(3)).unwrap();
        assert!((hull.total_area() - unit_cube_boundary(3).unwrap().total_area()).abs() < 1e-14);
    }

    #[test]
    fn cube_volume_is_one() {
        for d in 2..=5 {
            let hull = convex_hull(&unit_cube_corners(d)).unwrap();
            hull.check_closed().unwrap();
            assert!(hull.ridges_paired(), "d={d}");
            assert_eq!(hull.facets.len(), 2 * d * factorial(d - 1) as usize);
            let v = hull.volume().unwrap();
            assert!((v - 1.0).abs() < 1e-12, "d={d}: {v}");
        }
    }

    #[test]
    fn volume_matches_rejection_sampling() {
        let hull = convex_hull(&sphere_points(3, 20, 2)).unwrap();
        let exact = hull.volume().unwrap();
        let mut rng = rng_from_seed(77);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| {
                let x = DVector::from_fn(3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                hull.contains(&x)
            })
            .count();
        let frac = hits as f64 / n as f64;
        let est = 8.0 * frac;
        let se = 8.0 * (frac * (1.0 - frac) / n as f64).sqrt();
        assert!((est - exact).abs() < 3.0 * se, "{est} vs {exact} (se {se})");
    }

    #[test]
    fn volume_requires_orientation_and_closure() {
        let b = unit_square_boundary();
        assert_eq!(b.volume(), Err(GeometryError::NotOriented));
        let open = SimplicialBoundary::from_facets(
            b.vertices.clone(),
            vec![vec![0, 1], vec![1, 2], vec![2, 3]],
            p(&[0.5, 0.5]),
        )
        .unwrap()
        .orient_outward()
        .unwrap();
        assert!(matches!(open.volume(), Err(GeometryError::NotClosed { .. })));
    }

    #[test]
    fn membership_examples() {
        let hull = convex_hull(&sphere_points(3, 20, 4).iter().map(|v| v * 0.5).collect::<Vec<_>>()).unwrap();
        assert!(hull.contains(&hull.interior_point));
        let mut far = hull.interior_point.clone();
        far[0] += 10.0 * 0.5;
        assert!(!hull.contains(&far));
        for fi in 0..hull.facets.len() {
            assert!(hull.contains(&hull.facet_centroid(fi)));
        }
    }

    #[test]
    fn uniform_samples_in_square_have_centred_mean() {
        let b = convex_hull(&unit_cube_corners(2)).unwrap();
        let mut rng = rng_from_seed(21);
        let pts = sample_uniform(&b, &mut rng, 100_000).unwrap();
        let mean = pts.iter().fold(DVector::zeros(2), |acc, x| acc + x) / pts.len() as f64;
        assert!((mean[0] - 0.5).abs() < 0.01 && (mean[1] - 0.5).abs() < 0.01);
        assert!(pts.iter().all(|x| b.contains(x)));
        assert!(sample_uniform(&b, &mut rng, 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_samples_in_simplex_match_analytic_fraction() {
        for d in [2, 3, 4] {
            let b = convex_hull(&standard_simplex_vertices(d)).unwrap();
            let mut rng = rng_from_seed(d as u64);
            let n = 100_000;
            let pts = sample_uniform(&b, &mut rng, n).unwrap();
            let frac = pts.iter().filter(|x| x[0] < 0.5).count() as f64 / n as f64;
            let truth = 1.0 - 0.5f64.powi(d as i32);
            let se = (truth * (1.0 - truth) / n as f64).sqrt();
            assert!((frac - truth).abs() < 4.0 * se, "d={d}: {frac} vs {truth}");
        }
    }

    #[test]
    fn facet_sampling_follows_area() {
        // Two segments of lengths 2 and 1 (not closed; only the sampler is exercised).
        let v = vec![p(&[0.0, 0.0]), p(&[2.0, 0.0]), p(&[2.0, 1.0])];
        let b = SimplicialBoundary::from_facets(v, vec![vec![0, 1], vec![1, 2]], p(&[1.0, 0.5])).unwrap();
        let mut rng = rng_from_seed(8);
        let n = 10_000;
        let draws = sample_uniform_on_facets(&b, &mut rng, n).unwrap();
        let first = draws.iter().filter(|(_, f)| *f == 0).count() as f64;
        let expected = n as f64 * 2.0 / 3.0;
        let sigma = (n as f64 * (2.0 / 3.0) * (1.0 / 3.0)).sqrt();
        assert!((first - expected).abs() < 3.0 * sigma);
    }

    #[test]
    fn facet_samples_lie_on_their_facet() {
        let hull = convex_hull(&sphere_points(4, 15, 6)).unwrap();
        let mut rng = rng_from_seed(10);
        for (x, fi) in sample_uniform_on_facets(&hull, &mut rng, 2000).unwrap() {
            let f = &hull.facets[fi];
            let v0 = &hull.vertices[f.vertex_ids[0]];
            assert!(((&x - v0).dot(&f.unit_normal())).abs() < 1e-10);
        }
        let single =
            SimplicialBoundary::from_facets(vec![p(&[0.0, 0.0]), p(&[1.0, 0.0])], vec![vec![0, 1]], p(&[0.5, 0.5]))
                .unwrap();
        assert!(sample_uniform_on_facets(&single, &mut rng, 100).unwrap().iter().all(|(x, f)| *f == 0 && x[1] == 0.0));
    }

    #[test]
    fn file_roundtrip_preserves_volume() {
        let hull = convex_hull(&sphere_points(3, 16, 12)).unwrap();
        let json = serde_json::to_string(&hull.to_file()).unwrap();
        let back = SimplicialBoundary::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
        assert!((back.volume().unwrap() - hull.volume().unwrap()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn dot_is_linear_in_w(
            coords in proptest::collection::vec(-1.0f64..1.0, 16),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let pts: Vec<Point> = (0..4).map(|i| DVector::from_row_slice(&coords[i * 4..i * 4 + 4])).collect();
            let simplex = &pts[..4];
            let u = DVector::from_row_slice(&coords[0..4]).map(|c| c + 0.3);
            let v = DVector::from_row_slice(&coords[12..16]).map(|c| c * 2.0);
            let combined = dot_with_normal(&(&u * alpha + &v * beta), simplex);
            let separate = alpha * dot_with_normal(&u, simplex) + beta * dot_with_normal(&v, simplex);
            prop_assert!((combined - separate).abs() <= 1e-12 * (1.0 + separate.abs()));
        }

        #[test]
        fn normal_norm_matches_gram_volume(coords in proptest::collection::vec(-1.0f64..1.0, 25)) {
            let pts: Vec<Point> = (0..5).map(|i| DVector::from_row_slice(&coords[i * 5..i * 5 + 5])).collect();
            let n = weighted_normal(&pts);
            prop_assume!(!n.degenerate);
            let gram = gram_volume(&pts);
            prop_assert!((n.vector.norm() - gram).abs() <= 1e-10 * gram);
        }

        #[test]
        fn contains_ignores_facet_order(seed in 0u64..1000, x in proptest::collection::vec(-1.2f64..1.2, 3)) {
            let hull = convex_hull(&sphere_points(3, 10, seed)).unwrap();
            let mut shuffled = hull.clone();
            shuffled.facets.reverse();
            shuffled.facets.rotate_left((seed as usize) % hull.facets.len());
            let x = DVector::from_vec(x);
            prop_assert_eq!(hull.contains(&x), shuffled.contains(&x));
        }
    }
}
