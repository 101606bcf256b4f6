//! Cumulative-density estimators over a simplicial polytope `V`.
//!
//! - Monte-Carlo: fraction of flow samples inside `V`.
//! - Importance sampling: `vol(V) · E_{x~U(V)}[p_X(x)]`.
//! - Stochastic boundary flux: `area(∂V) · E_{x~U(∂V)}[G(x) · n(x)]`, or the
//!   per-facet form `Σ_i area_i · E_{x~U(S_i)}[G(x) · n_i]`.
//! - Deterministic boundary flux: `Σ_i area_i · mean_{v ∈ S_i} G(v) · n_i`.
//!
//! Stochastic estimators record running estimates at power-of-two sample
//! counts and at the final budget.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{dot_g_normal, field_g, FieldSample};
use crate::flows::{density, sample_one, Diffeomorphism};
use crate::geometry::SimplicialBoundary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "IS")]
    Is,
    #[serde(rename = "BF-S")]
    Bfs,
    #[serde(rename = "BF-A")]
    Bfa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mc, Method::Is, Method::Bfs, Method::Bfa];

    pub fn is_stochastic(self) -> bool {
        self != Method::Bfa
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mc => "MC",
            Method::Is => "IS",
            Method::Bfs => "BF-S",
            Method::Bfa => "BF-A",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "mc" => Ok(Method::Mc),
            "is" => Ok(Method::Is),
            "bfs" => Ok(Method::Bfs),
            "bfa" => Ok(Method::Bfa),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

/// Which form of the stochastic boundary-flux estimator to use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BfsVariant {
    /// Equal allocation of `budget / #facets` points to each facet.
    PerSimplex,
    /// Facets drawn in proportion to their area.
    #[default]
    AreaWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub points_used: usize,
    pub estimate: f64,
}

/// Running estimates of one estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateTrace {
    pub method: Method,
    pub seed: Option<u64>,
    pub entries: Vec<TraceEntry>,
}

impl EstimateTrace {
    pub fn new(method: Method, seed: Option<u64>) -> Self {
        EstimateTrace {
            method,
            seed,
            entries: Vec::new(),
        }
    }

    /// Appends an entry; `points_used` must exceed the previous one.
    pub fn push(&mut self, points_used: usize, estimate: f64) {
        if let Some(last) = self.entries.last() {
            assert!(points_used > last.points_used, "trace points must increase");
        }
        self.entries.push(TraceEntry { points_used, estimate });
    }

    pub fn last(&self) -> Option<TraceEntry> {
        self.entries.last().copied()
    }

    pub fn final_estimate(&self) -> Option<f64> {
        self.last().map(|e| e.estimate)
    }

    /// Estimate at the last entry with `points_used <= budget`.
    pub fn estimate_at(&self, budget: usize) -> Option<f64> {
        self.entries
            .iter()
            .take_while(|e| e.points_used <= budget)
            .last()
            .map(|e| e.estimate)
    }

    /// Writes `points_used,estimate` rows, keeping every `every`-th entry and the last.
    pub fn write_csv<W: Write>(&self, mut out: W, every: usize) -> std::io::Result<()> {
        let every = every.max(1);
        writeln!(out, "points_used,estimate")?;
        let n = self.entries.len();
        for (i, e) in self.entries.iter().enumerate() {
            if i % every == 0 || i + 1 == n {
                writeln!(out, "{},{}", e.points_used, e.estimate)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn is_checkpoint(n: usize, budget: usize) -> bool {
    n.is_power_of_two() || n == budget
}

fn require_budget(budget: usize, minimum: usize, what: &str) -> Result<()> {
    if budget < minimum {
        Err(Error::Budget {
            budget,
            reason: format!("{what} needs at least {minimum}"),
        })
    } else {
        Ok(())
    }
}

/// Monte-Carlo: fraction of flow samples falling inside `boundary`.
pub fn mc_estimate<R: Rng + ?Sized>(
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    budget: usize,
    rng: &mut R,
) -> Result<EstimateTrace> {
    require_budget(budget, 1, "Monte-Carlo")?;
    let mut trace = EstimateTrace::new(Method::Mc, None);
    let mut hits = 0usize;
    for n in 1..=budget {
        if boundary.contains(&sample_one(flow, rng)?) {
            hits += 1;
        }
        if is_checkpoint(n, budget) {
            trace.push(n, hits as f64 / n as f64);
        }
    }
    Ok(trace)
}

/// Importance sampling with a uniform proposal on `V`.
pub fn is_estimate<R: Rng + ?Sized>(
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    budget: usize,
    rng: &mut R,
) -> Result<EstimateTrace> {
    require_budget(budget, 1, "importance sampling")?;
    let volume = boundary.volume()?;
    let sampler = boundary.interior_sampler()?;
    let mut trace = EstimateTrace::new(Method::Is, None);
    let mut total = 0.0;
    for n in 1..=budget {
        total += density(flow, &sampler.sample(rng));
        if is_checkpoint(n, budget) {
            trace.push(n, volume * total / n as f64);
        }
    }
    Ok(trace)
}

/// Stochastic boundary flux of `G`.
pub fn bfs_estimate<R: Rng + ?Sized>(
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    budget: usize,
    rng: &mut R,
    variant: BfsVariant,
) -> Result<EstimateTrace> {
    if !boundary.is_oriented() {
        return Err(crate::geometry::GeometryError::NotOriented.into());
    }
    let sampler = boundary.facet_sampler()?;
    let normals: Vec<_> = boundary.facets.iter().map(|f| f.unit_normal()).collect();
    let mut trace = EstimateTrace::new(Method::Bfs, None);
    match variant {
        BfsVariant::AreaWeighted => {
            require_budget(budget, 1, "boundary flux")?;
            let total_area = boundary.total_area();
            let mut total = 0.0;
            for n in 1..=budget {
                let (x, fi) = sampler.sample(rng);
                total += dot_g_normal(&field_g(flow, &x)?, &normals[fi]);
                if is_checkpoint(n, budget) {
                    trace.push(n, total_area * total / n as f64);
                }
            }
        }
        BfsVariant::PerSimplex => {
            let facets = boundary.facets.len();
            require_budget(budget, facets, "per-simplex boundary flux (one point per facet)")?;
            let rounds = budget / facets;
            let mut sums = vec![0.0; facets];
            for round in 1..=rounds {
                for (fi, sum) in sums.iter_mut().enumerate() {
                    let x = sampler.sample_on(rng, fi);
                    *sum += dot_g_normal(&field_g(flow, &x)?, &normals[fi]);
                }
                if is_checkpoint(round, rounds) {
                    let est: f64 = boundary
                        .facets
                        .iter()
                        .zip(&sums)
                        .map(|(f, s)| f.area * s / round as f64)
                        .sum();
                    trace.push(round * facets, est);
                }
            }
        }
    }
    Ok(trace)
}

/// `G` at every vertex referenced by a facet, indexed by vertex id.
pub(crate) fn vertex_samples(
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
) -> Result<Vec<Option<FieldSample>>> {
    let mut samples = vec![None; boundary.vertices.len()];
    for id in boundary.used_vertex_ids() {
        samples[id] = Some(field_g(flow, &boundary.vertices[id])?);
    }
    Ok(samples)
}

/// Vertex-averaged boundary flux: `Σ_i area_i · mean_v G(v) · n_i`.
///
/// `G` is evaluated once per distinct vertex and shared by all incident facets.
pub fn bf_deterministic(flow: &dyn Diffeomorphism, boundary: &SimplicialBoundary) -> Result<f64> {
    if !boundary.is_oriented() {
        return Err(crate::geometry::GeometryError::NotOriented.into());
    }
    let samples = vertex_samples(flow, boundary)?;
    Ok(boundary
        .facets
        .iter()
        .map(|f| {
            let n = f.unit_normal();
            let mean = f
                .vertex_ids
                .iter()
                .map(|&v| dot_g_normal(samples[v].as_ref().unwrap(), &n))
                .sum::<f64>()
                / f.vertex_ids.len() as f64;
            f.area * mean
        })
        .sum())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::flows::{make_flow, FlowError, FlowSpec, Pullback};
    use crate::geometry::{convex_hull, standard_simplex_vertices, unit_cube_corners, Point};
    use crate::rng_from_seed;
    use nalgebra::{DMatrix, DVector};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn p(c: &[f64]) -> Point {
        DVector::from_row_slice(c)
    }

    fn hull(pts: &[&[f64]]) -> SimplicialBoundary {
        convex_hull(&pts.iter().map(|c| p(c)).collect::<Vec<_>>()).unwrap()
    }

    fn doubling() -> Box<dyn Diffeomorphism> {
        make_flow(&FlowSpec::Affine {
            matrix: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            offset: vec![0.0, 0.0],
        })
        .unwrap()
    }

    /// Counts inverse evaluations, i.e. points at which `G` or the density is computed.
    #[derive(Debug)]
    pub(crate) struct Counting {
        pub inner: Box<dyn Diffeomorphism>,
        pub inverses: AtomicUsize,
    }

    impl Diffeomorphism for Counting {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn forward(&self, y: &Point) -> Result<Point, FlowError> {
            self.inner.forward(y)
        }
        fn inverse(&self, x: &Point) -> Point {
            self.inverses.fetch_add(1, Ordering::Relaxed);
            self.inner.inverse(x)
        }
        fn jacobian_forward(&self, y: &Point) -> Result<DMatrix<f64>, FlowError> {
            self.inner.jacobian_forward(y)
        }
        fn log_abs_det_jacobian_inverse(&self, x: &Point) -> f64 {
            self.inner.log_abs_det_jacobian_inverse(x)
        }
        fn pullback(&self, x: &Point) -> Result<Pullback, FlowError> {
            self.inverses.fetch_add(1, Ordering::Relaxed);
            self.inner.pullback(x)
        }
    }

    /// Mean and standard error of the final estimates of `runs` independent runs.
    fn run_stats(runs: usize, mut one: impl FnMut(u64) -> f64) -> (f64, f64) {
        let xs: Vec<f64> = (0..runs as u64).map(&mut one).collect();
        let mean = xs.iter().sum::<f64>() / runs as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        (mean, (var / runs as f64).sqrt())
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("qmc".parse::<Method>().is_err());
    }

    #[test]
    fn mc_on_the_whole_cube_is_one() {
        let f = make_flow(&FlowSpec::Identity { dim: 3 }).unwrap();
        let cube = convex_hull(&unit_cube_corners(3)).unwrap();
        let t = mc_estimate(f.as_ref(), &cube, 100, &mut rng_from_seed(1)).unwrap();
        assert!(t.entries.iter().all(|e| e.estimate == 1.0));
        let pts: Vec<usize> = t.entries.iter().map(|e| e.points_used).collect();
        assert_eq!(pts, vec![1, 2, 4, 8, 16, 32, 64, 100]);
    }

    #[test]
    fn mc_on_half_box() {
        let f = make_flow(&FlowSpec::Identity { dim: 2 }).unwrap();
        let b = hull(&[&[0.0, 0.0], &[0.5, 0.0], &[0.5, 1.0], &[0.0, 1.0]]);
        let n = 10_000;
        let est = mc_estimate(f.as_ref(), &b, n, &mut rng_from_seed(2)).unwrap().final_estimate().unwrap();
        assert!((est - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
        let one = mc_estimate(f.as_ref(), &b, 1, &mut rng_from_seed(3)).unwrap().final_estimate().unwrap();
        assert!(one == 0.0 || one == 1.0);
        assert!(mc_estimate(f.as_ref(), &b, 0, &mut rng_from_seed(3)).is_err());
    }

    #[test]
    fn is_has_zero_variance_inside_identity_support() {
        let f = make_flow(&FlowSpec::Identity { dim: 2 }).unwrap();
        let b = hull(&[&[0.1, 0.1], &[0.6, 0.2], &[0.3, 0.8], &[0.7, 0.7]]);
        let vol = b.volume().unwrap();
        let t = is_estimate(f.as_ref(), &b, 1, &mut rng_from_seed(1)).unwrap();
        assert_eq!(t.final_estimate().unwrap(), vol);
    }

    #[test]
    fn is_is_unbiased_for_scaled_affine() {
        let f = doubling();
        let square = convex_hull(&unit_cube_corners(2)).unwrap();
        let (mean, se) = run_stats(200, |s| {
            is_estimate(f.as_ref(), &square, 1000, &mut rng_from_seed(s)).unwrap().final_estimate().unwrap()
        });
        // Zero variance: V maps inside the cube and the density is constant.
        assert!((mean - 0.25).abs() <= 3.0 * se + 1e-12, "{mean} ± {se}");
    }

    #[test]
    fn is_is_unbiased_when_v_leaves_the_support() {
        let f = make_flow(&FlowSpec::Identity { dim: 2 }).unwrap();
        let b = hull(&[&[0.5, 0.5], &[1.5, 0.5], &[1.5, 1.5], &[0.5, 1.5]]);
        let (mean, se) = run_stats(200, |s| {
            is_estimate(f.as_ref(), &b, 1000, &mut rng_from_seed(s)).unwrap().final_estimate().unwrap()
        });
        assert!((mean - 0.25).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn bfs_on_identity_cube() {
        let f = make_flow(&FlowSpec::Identity { dim: 3 }).unwrap();
        let cube = convex_hull(&unit_cube_corners(3)).unwrap();
        // G · n is constant per facet here, so the per-facet form is exact.
        let exact = bfs_estimate(f.as_ref(), &cube, 120, &mut rng_from_seed(1), BfsVariant::PerSimplex).unwrap();
        assert!((exact.final_estimate().unwrap() - 1.0).abs() < 1e-12);
        let (mean, se) = run_stats(200, |s| {
            bfs_estimate(f.as_ref(), &cube, 1000, &mut rng_from_seed(s), BfsVariant::AreaWeighted)
                .unwrap()
                .final_estimate()
                .unwrap()
        });
        assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn bfs_variants_agree_on_affine_simplex() {
        let f = make_flow(&FlowSpec::random_affine(3, 4, 0.1)).unwrap();
        let (a, _) = f.as_affine().unwrap();
        let simplex = convex_hull(&standard_simplex_vertices(3).iter().map(|v| v * 0.3).collect::<Vec<_>>()).unwrap();
        let truth = simplex.volume().unwrap() / a.determinant().abs();
        let mut stats = Vec::new();
        for variant in [BfsVariant::AreaWeighted, BfsVariant::PerSimplex] {
            let (mean, se) = run_stats(200, |s| {
                bfs_estimate(f.as_ref(), &simplex, 1000, &mut rng_from_seed(s), variant)
                    .unwrap()
                    .final_estimate()
                    .unwrap()
            });
            assert!((mean - truth).abs() <= 3.0 * se + 1e-12 * truth, "{variant:?}: {mean} ± {se} vs {truth}");
            stats.push((mean, se));
        }
        let combined = (stats[0].1.powi(2) + stats[1].1.powi(2)).sqrt();
        assert!((stats[0].0 - stats[1].0).abs() <= 3.0 * combined + 1e-12 * truth);
    }

    #[test]
    fn per_simplex_needs_one_point_per_facet() {
        let f = make_flow(&FlowSpec::Identity { dim: 3 }).unwrap();
        let cube = convex_hull(&unit_cube_corners(3)).unwrap();
        let err = bfs_estimate(f.as_ref(), &cube, 11, &mut rng_from_seed(1), BfsVariant::PerSimplex);
        assert!(matches!(err, Err(Error::Budget { .. })));
        let t = bfs_estimate(f.as_ref(), &cube, 50, &mut rng_from_seed(1), BfsVariant::PerSimplex).unwrap();
        assert_eq!(t.last().unwrap().points_used, 48);
    }

    #[test]
    fn deterministic_flux_is_exact_for_linear_flows() {
        let id = make_flow(&FlowSpec::Identity { dim: 3 }).unwrap();
        let mut rng = rng_from_seed(5);
        let pts: Vec<Point> = (0..15).map(|_| DVector::from_fn(3, |_, _| 0.1 + 0.8 * rng.random::<f64>())).collect();
        let b = convex_hull(&pts).unwrap();
        assert!((bf_deterministic(id.as_ref(), &b).unwrap() - b.volume().unwrap()).abs() < 1e-12);

        let tri = hull(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!((bf_deterministic(doubling().as_ref(), &tri).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn deterministic_flux_evaluates_each_vertex_once() {
        let f = Counting {
            inner: make_flow(&FlowSpec::coupling_stack(3, 2, 8, 1)).unwrap(),
            inverses: AtomicUsize::new(0),
        };
        let mut rng = rng_from_seed(6);
        let pts: Vec<Point> = (0..12).map(|_| DVector::from_fn(3, |_, _| rng.random::<f64>())).collect();
        let b = convex_hull(&pts).unwrap();
        bf_deterministic(&f, &b).unwrap();
        assert_eq!(f.inverses.load(Ordering::Relaxed), b.used_vertex_ids().len());
    }

    #[test]
    fn trace_csv_thinning_keeps_last_row() {
        let mut t = EstimateTrace::new(Method::Bfa, None);
        for i in 1..=10 {
            t.push(i, i as f64 / 10.0);
        }
        let mut buf = Vec::new();
        t.write_csv(&mut buf, 4).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "points_used,estimate\n1,0.1\n5,0.5\n9,0.9\n10,1\n");
        assert_eq!(t.estimate_at(7), Some(0.7));
        assert_eq!(t.estimate_at(0), None);
    }
}
