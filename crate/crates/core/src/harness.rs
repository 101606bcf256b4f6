//! Benchmark protocol: hulls on spheres around flow samples, reference CDFs,
//! repeated estimator runs, and CSV/JSON reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{bfs_estimate, is_estimate, mc_estimate, BfsVariant, EstimateTrace, Method};
use crate::flows::{density, make_flow, sample_one, Diffeomorphism, FlowSpec};
use crate::geometry::{convex_hull, Point, SimplicialBoundary};
use crate::refine::{run_bfa, BfaOptions};
use crate::{rng_from_seed, Rng as StreamRng};

pub const REFERENCE_SAMPLES: usize = 2_000_000;
pub const REFERENCE_SEED: u64 = 0x5EED_CDF0;
pub const MAX_HULL_ATTEMPTS: usize = 100;

/// Samples used to screen out hulls that are clearly below `min_cdf` before
/// paying for a full reference.
const SCREEN_SAMPLES: usize = 20_000;
const REFERENCE_CHUNKS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HullSpec {
    pub flow: FlowSpec,
    pub radius: f64,
    pub n_points: usize,
    pub seed: u64,
    pub min_cdf: f64,
}

impl HullSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if self.n_points < dim + 1 {
            return Err(Error::Config(format!("need at least {} hull points in {dim}D", dim + 1)));
        }
        if !(0.0..1.0).contains(&self.min_cdf) {
            return Err(Error::Config(format!("min_cdf must lie in [0, 1), got {}", self.min_cdf)));
        }
        Ok(())
    }
}

/// A reference CDF value. `std_error` is zero for analytic references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub value: f64,
    pub std_error: f64,
    pub analytic: bool,
}

#[derive(Debug, Clone)]
pub struct GeneratedHull {
    pub boundary: SimplicialBoundary,
    pub center: Point,
    pub reference: Reference,
    /// Hulls rejected before this one was accepted.
    pub rejections: usize,
}

/// Draws `n_points` on the sphere of radius `radius` about a flow sample and
/// takes their hull, retrying with a fresh center while the reference CDF is
/// below `min_cdf`.
pub fn generate_hull<R: Rng + ?Sized>(spec: &HullSpec, rng: &mut R) -> Result<GeneratedHull> {
    let flow = make_flow(&spec.flow)?;
    generate_hull_for(flow.as_ref(), spec, rng)
}

pub fn generate_hull_for<R: Rng + ?Sized>(
    flow: &dyn Diffeomorphism,
    spec: &HullSpec,
    rng: &mut R,
) -> Result<GeneratedHull> {
    let d = flow.dim();
    spec.validate(d)?;
    let mut best = 0.0f64;
    for rejections in 0..MAX_HULL_ATTEMPTS {
        let center = sample_one(flow, rng)?;
        let points: Vec<Point> = (0..spec.n_points)
            .map(|_| loop {
                let dir = Point::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = dir.norm();
                if norm > 0.0 {
                    break &center + dir * (spec.radius / norm);
                }
            })
            .collect();
        let boundary = convex_hull(&points)?;
        if spec.min_cdf > 0.0 {
            let screen = reference_cdf_with(flow, &boundary, SCREEN_SAMPLES, REFERENCE_SEED)?;
            if screen.value + 5.0 * screen.std_error < spec.min_cdf {
                best = best.max(screen.value);
                continue;
            }
        }
        let reference = reference_cdf(flow, &boundary)?;
        if reference.value >= spec.min_cdf {
            return Ok(GeneratedHull {
                boundary,
                center,
                reference,
                rejections,
            });
        }
        best = best.max(reference.value);
    }
    Err(Error::HullRejected {
        attempts: MAX_HULL_ATTEMPTS,
        best,
        min_cdf: spec.min_cdf,
    })
}

/// Exact for affine flows whose preimage of `V` lies in the base cube,
/// otherwise importance sampling with [`REFERENCE_SAMPLES`] points.
pub fn reference_cdf(flow: &dyn Diffeomorphism, boundary: &SimplicialBoundary) -> Result<Reference> {
    if let Some((a, _)) = flow.as_affine() {
        let inside = boundary.used_vertex_ids().into_iter().all(|v| {
            flow.inverse(&boundary.vertices[v])
                .iter()
                .all(|c| (0.0..=1.0).contains(c))
        });
        if inside {
            return Ok(Reference {
                value: boundary.volume()? / a.determinant().abs(),
                std_error: 0.0,
                analytic: true,
            });
        }
    }
    reference_cdf_with(flow, boundary, REFERENCE_SAMPLES, REFERENCE_SEED)
}

/// Importance-sampling reference split over fixed chunks, each with its own
/// stream of the seeded generator, so the result does not depend on thread count.
pub fn reference_cdf_with(
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    samples: usize,
    seed: u64,
) -> Result<Reference> {
    if samples < 2 {
        return Err(Error::Budget {
            budget: samples,
            reason: "a reference needs at least 2 samples".into(),
        });
    }
    let volume = boundary.volume()?;
    let sampler = boundary.interior_sampler()?;
    let chunks = REFERENCE_CHUNKS.min(samples);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = StreamRng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let n = samples / chunks + usize::from(k < samples % chunks);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let w = density(flow, &sampler.sample(&mut rng));
                s += w;
                s2 += w * w;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partial.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let n = samples as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(Reference {
        value: volume * mean,
        std_error: volume * (var / n).sqrt(),
        analytic: false,
    })
}

/// Mixes `parts` into `base` with SplitMix64 steps; used to give every
/// benchmark cell an independent, reproducible seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Estimator knobs shared by every run of a benchmark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub bfs_variant: BfsVariant,
    pub bfa: BfaOptions,
}

/// Runs one estimator. `seed` is ignored by BF-A, which is deterministic.
pub fn run_method(
    method: Method,
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    budget: usize,
    seed: u64,
    settings: &EstimatorSettings,
) -> Result<EstimateTrace> {
    let mut rng = rng_from_seed(seed);
    let mut trace = match method {
        Method::Mc => mc_estimate(flow, boundary, budget, &mut rng)?,
        Method::Is => is_estimate(flow, boundary, budget, &mut rng)?,
        Method::Bfs => bfs_estimate(flow, boundary, budget, &mut rng, settings.bfs_variant)?,
        Method::Bfa => return run_bfa(flow, boundary, budget, settings.bfa),
    };
    trace.seed = Some(seed);
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFlow {
    pub name: String,
    pub spec: FlowSpec,
}

fn default_n_points() -> usize {
    20
}
fn default_min_cdf() -> f64 {
    0.01
}
fn default_budget() -> usize {
    4000
}
fn default_runs() -> usize {
    5
}
fn default_hulls() -> usize {
    5
}
fn default_radii() -> Vec<f64> {
    vec![0.5, 0.75, 1.0]
}
fn default_epsilon() -> f64 {
    crate::refine::DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub flows: Vec<NamedFlow>,
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default = "default_min_cdf")]
    pub min_cdf: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_hulls")]
    pub hulls_per_cell: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bfs_variant: BfsVariant,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl BenchConfig {
    /// Three seeded flows per dimension, each pushed through a Gaussian base:
    /// identity, a random affine map, and a three-layer coupling stack.
    pub fn default_grid(dims: &[usize], seed: u64) -> Self {
        let flows = dims
            .iter()
            .flat_map(|&d| default_flows(d, derive_seed(seed, &[d as u64])))
            .collect();
        BenchConfig {
            flows,
            radii: default_radii(),
            n_points: default_n_points(),
            min_cdf: default_min_cdf(),
            budget: default_budget(),
            runs: default_runs(),
            hulls_per_cell: default_hulls(),
            seed,
            bfs_variant: BfsVariant::default(),
            epsilon: default_epsilon(),
        }
    }

    pub fn settings(&self) -> EstimatorSettings {
        EstimatorSettings {
            bfs_variant: self.bfs_variant,
            bfa: BfaOptions {
                epsilon: self.epsilon,
                ..BfaOptions::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flows.is_empty() || self.radii.is_empty() {
            return Err(Error::Config("need at least one flow and one radius".into()));
        }
        if self.runs == 0 || self.hulls_per_cell == 0 || self.budget == 0 {
            return Err(Error::Config("runs, hulls_per_cell and budget must be positive".into()));
        }
        Ok(())
    }
}

pub fn default_flows(dim: usize, seed: u64) -> Vec<NamedFlow> {
    vec![
        NamedFlow {
            name: format!("identity-{dim}d"),
            spec: FlowSpec::gaussian(FlowSpec::Identity { dim }),
        },
        NamedFlow {
            name: format!("affine-{dim}d"),
            spec: FlowSpec::gaussian(FlowSpec::random_affine(dim, seed, 0.5)),
        },
        NamedFlow {
            name: format!("coupling-{dim}d"),
            spec: FlowSpec::gaussian(FlowSpec::coupling_stack(dim, 3, 16, seed.wrapping_add(1))),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub flow: String,
    pub dim: usize,
    pub radius: f64,
    pub hull: usize,
    pub method: Method,
    pub budget: usize,
    pub run: usize,
    pub seed: Option<u64>,
    pub estimate: f64,
    pub reference: f64,
    pub reference_se: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    /// Set when the cell failed; the numeric fields are then NaN.
    pub error: Option<String>,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str =
        "flow,dim,radius,hull,method,budget,run,seed,estimate,reference,reference_se,abs_error,rel_error,error";

    pub fn csv_row(&self) -> String {
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        let error = self.error.as_deref().map(csv_escape).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_escape(&self.flow),
            self.dim,
            self.radius,
            self.hull,
            self.method,
            self.budget,
            self.run,
            seed,
            self.estimate,
            self.reference,
            self.reference_se,
            self.abs_error,
            self.rel_error,
            error
        )
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One accepted (or failed) hull of the benchmark grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HullInfo {
    pub flow: String,
    pub dim: usize,
    pub radius: f64,
    pub hull: usize,
    pub seed: u64,
    pub vertices: usize,
    pub facets: usize,
    pub reference: Option<Reference>,
    pub rejections: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchResult {
    pub hulls: Vec<HullInfo>,
    pub records: Vec<EvalRecord>,
}

struct HullCell {
    flow_index: usize,
    radius: f64,
    hull: usize,
    seed: u64,
}

/// Runs the full grid: every flow × radius × hull, then every method on each
/// accepted hull. Stochastic methods run `runs` times with derived seeds and
/// BF-A runs once. Failures are recorded rather than aborting the grid.
pub fn evaluate(config: &BenchConfig) -> Result<BenchResult> {
    config.validate()?;
    let flows: Vec<Box<dyn Diffeomorphism>> = config
        .flows
        .iter()
        .map(|f| make_flow(&f.spec))
        .collect::<std::result::Result<_, _>>()?;

    let mut cells = Vec::new();
    for (fi, _) in config.flows.iter().enumerate() {
        for (ri, &radius) in config.radii.iter().enumerate() {
            for hull in 0..config.hulls_per_cell {
                cells.push(HullCell {
                    flow_index: fi,
                    radius,
                    hull,
                    seed: derive_seed(config.seed, &[fi as u64, ri as u64, hull as u64]),
                });
            }
        }
    }

    let generated: Vec<(HullInfo, Option<GeneratedHull>)> = cells
        .par_iter()
        .map(|cell| {
            let named = &config.flows[cell.flow_index];
            let flow = flows[cell.flow_index].as_ref();
            let spec = HullSpec {
                flow: named.spec.clone(),
                radius: cell.radius,
                n_points: config.n_points,
                seed: cell.seed,
                min_cdf: config.min_cdf,
            };
            let outcome = generate_hull_for(flow, &spec, &mut rng_from_seed(cell.seed));
            let mut info = HullInfo {
                flow: named.name.clone(),
                dim: flow.dim(),
                radius: cell.radius,
                hull: cell.hull,
                seed: cell.seed,
                vertices: 0,
                facets: 0,
                reference: None,
                rejections: 0,
                error: None,
            };
            match outcome {
                Ok(g) => {
                    info.vertices = g.boundary.used_vertex_ids().len();
                    info.facets = g.boundary.facets.len();
                    info.reference = Some(g.reference);
                    info.rejections = g.rejections;
                    (info, Some(g))
                }
                Err(e) => {
                    info.error = Some(e.to_string());
                    (info, None)
                }
            }
        })
        .collect();

    let mut tasks = Vec::new();
    for (ci, (_, g)) in generated.iter().enumerate() {
        if g.is_none() {
            continue;
        }
        for method in Method::ALL {
            let runs = if method.is_stochastic() { config.runs } else { 1 };
            for run in 0..runs {
                tasks.push((ci, method, run));
            }
        }
    }

    let settings = config.settings();
    // Indexed parallel collection keeps the grid order of `tasks`.
    let records: Vec<EvalRecord> = tasks
        .par_iter()
        .map(|&(ci, method, run)| {
            let (info, g) = &generated[ci];
            let g = g.as_ref().expect("task for a failed hull");
            let flow = flows[cells[ci].flow_index].as_ref();
            let seed = derive_seed(info.seed, &[method as u64, run as u64]);
            let outcome = run_method(method, flow, &g.boundary, config.budget, seed, &settings);
            let reference = g.reference;
            let mut rec = EvalRecord {
                flow: info.flow.clone(),
                dim: info.dim,
                radius: info.radius,
                hull: info.hull,
                method,
                budget: config.budget,
                run,
                seed: method.is_stochastic().then_some(seed),
                estimate: f64::NAN,
                reference: reference.value,
                reference_se: reference.std_error,
                abs_error: f64::NAN,
                rel_error: f64::NAN,
                error: None,
            };
            match outcome.map(|t| t.final_estimate()) {
                Ok(Some(est)) => {
                    rec.estimate = est;
                    rec.abs_error = (est - reference.value).abs();
                    rec.rel_error = rec.abs_error / reference.value;
                }
                Ok(None) => rec.error = Some("empty trace".into()),
                Err(e) => rec.error = Some(e.to_string()),
            }
            rec
        })
        .collect();
    Ok(BenchResult {
        hulls: generated.into_iter().map(|(info, _)| info).collect(),
        records,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.5}±{:.5}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub count: usize,
    pub failures: usize,
    pub abs_error: MeanStd,
    pub rel_error: MeanStd,
}

impl Aggregate {
    /// `method, abs ± std, rel ± std`.
    pub fn line(&self) -> String {
        format!("{}, {}, {}", self.method, self.abs_error, self.rel_error)
    }
}

/// Per-method aggregates over the successful records in `records`.
pub fn aggregate<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Vec<Aggregate> {
    let mut by_method: BTreeMap<Method, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let entry = by_method.entry(r.method).or_default();
        if r.error.is_some() || !r.abs_error.is_finite() {
            entry.2 += 1;
        } else {
            entry.0.push(r.abs_error);
            entry.1.push(r.rel_error);
        }
    }
    by_method
        .into_iter()
        .filter(|(_, (abs, _, _))| !abs.is_empty())
        .map(|(method, (abs, rel, failures))| Aggregate {
            method,
            count: abs.len(),
            failures,
            abs_error: MeanStd::of(&abs),
            rel_error: MeanStd::of(&rel),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub overall: Vec<Aggregate>,
    pub by_dim: BTreeMap<String, Vec<Aggregate>>,
    pub by_radius: BTreeMap<String, Vec<Aggregate>>,
    pub by_flow: BTreeMap<String, Vec<Aggregate>>,
    pub hulls: Vec<HullInfo>,
}

pub fn summarize(result: &BenchResult) -> Summary {
    fn group(records: &[EvalRecord], key: impl Fn(&EvalRecord) -> String) -> BTreeMap<String, Vec<Aggregate>> {
        let mut keys: Vec<String> = records.iter().map(&key).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|k| {
                let agg = aggregate(records.iter().filter(|r| key(r) == k));
                (k, agg)
            })
            .collect()
    }
    Summary {
        overall: aggregate(&result.records),
        by_dim: group(&result.records, |r| r.dim.to_string()),
        by_radius: group(&result.records, |r| r.radius.to_string()),
        by_flow: group(&result.records, |r| r.flow.clone()),
        hulls: result.hulls.clone(),
    }
}

/// Human-readable table in the `method, abs ± std, rel ± std` layout.
pub fn format_summary(summary: &Summary) -> String {
    let mut out = String::new();
    let section = |out: &mut String, title: &str, aggs: &[Aggregate]| {
        let _ = writeln!(out, "{title}");
        for a in aggs {
            let _ = writeln!(out, "  {}", a.line());
        }
    };
    section(&mut out, "overall (method, abs error, rel error)", &summary.overall);
    for (k, v) in &summary.by_dim {
        section(&mut out, &format!("d = {k}"), v);
    }
    for (k, v) in &summary.by_radius {
        section(&mut out, &format!("radius = {k}"), v);
    }
    out
}

pub fn write_records_csv<W: Write>(mut out: W, records: &[EvalRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", EvalRecord::CSV_HEADER)?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Absolute-error trace of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub method: Method,
    pub run: usize,
    pub points: Vec<(usize, f64, f64)>,
}

impl ErrorTrace {
    /// `(estimate, |estimate - reference|)` at the last checkpoint within `budget`.
    pub fn at(&self, budget: usize) -> Option<(f64, f64)> {
        self.points
            .iter()
            .take_while(|p| p.0 <= budget)
            .last()
            .map(|&(_, e, a)| (e, a))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub reference: Reference,
    pub traces: Vec<ErrorTrace>,
}

impl ConvergenceReport {
    pub fn traces_for(&self, method: Method) -> impl Iterator<Item = &ErrorTrace> {
        self.traces.iter().filter(move |t| t.method == method)
    }

    /// Median absolute error over the runs of `method` at `budget`.
    pub fn median_abs_error(&self, method: Method, budget: usize) -> Option<f64> {
        let mut errs: Vec<f64> = self.traces_for(method).filter_map(|t| t.at(budget)).map(|p| p.1).collect();
        if errs.is_empty() {
            return None;
        }
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        Some(if n % 2 == 1 {
            errs[n / 2]
        } else {
            0.5 * (errs[n / 2 - 1] + errs[n / 2])
        })
    }

    /// Columns `method,run,points_used,estimate,abs_error`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,run,points_used,estimate,abs_error")?;
        for t in &self.traces {
            for &(n, est, err) in &t.points {
                writeln!(out, "{},{},{},{},{}", t.method, t.run, n, est, err)?;
            }
        }
        Ok(())
    }
}

/// Error traces for all four methods on one hull. Stochastic methods run
/// `runs` times; BF-A runs once and records every split.
pub fn convergence_report(
    flow: &dyn Diffeomorphism,
    boundary: &SimplicialBoundary,
    reference: Reference,
    budget: usize,
    runs: usize,
    seed: u64,
    settings: &EstimatorSettings,
) -> Result<ConvergenceReport> {
    let mut tasks = vec![(Method::Bfa, 0)];
    for method in [Method::Mc, Method::Is, Method::Bfs] {
        tasks.extend((0..runs).map(|r| (method, r)));
    }
    let traces = tasks
        .par_iter()
        .map(|&(method, run)| {
            let s = derive_seed(seed, &[method as u64, run as u64]);
            let trace = run_method(method, flow, boundary, budget, s, settings)?;
            Ok(ErrorTrace {
                method,
                run,
                points: trace
                    .entries
                    .iter()
                    .map(|e| (e.points_used, e.estimate, (e.estimate - reference.value).abs()))
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport { reference, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unit_cube_corners;

    fn identity_spec(d: usize) -> FlowSpec {
        FlowSpec::Identity { dim: d }
    }

    #[test]
    fn simplex_hull_from_d_plus_one_points() {
        let spec = HullSpec {
            flow: identity_spec(3),
            radius: 0.2,
            n_points: 4,
            seed: 1,
            min_cdf: 0.0,
        };
        let g = generate_hull(&spec, &mut rng_from_seed(1)).unwrap();
        assert_eq!(g.boundary.facets.len(), 4);
        assert_eq!(g.boundary.used_vertex_ids().len(), 4);
    }

    #[test]
    fn sphere_points_are_all_hull_vertices() {
        for d in 2..=4 {
            let spec = HullSpec {
                flow: FlowSpec::gaussian(identity_spec(d)),
                radius: 0.75,
                n_points: 20,
                seed: 2,
                min_cdf: 0.0,
            };
            let g = generate_hull(&spec, &mut rng_from_seed(d as u64)).unwrap();
            assert_eq!(g.boundary.used_vertex_ids().len(), 20);
            for v in &g.boundary.vertices {
                assert!(((v - &g.center).norm() - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_reference_is_hull_volume_and_rejection_threshold_holds() {
        let spec = HullSpec {
            flow: identity_spec(2),
            radius: 0.25,
            n_points: 20,
            seed: 3,
            min_cdf: 0.01,
        };
        let flow = make_flow(&spec.flow).unwrap();
        for s in 0..10 {
            let g = generate_hull_for(flow.as_ref(), &spec, &mut rng_from_seed(s)).unwrap();
            assert!(g.reference.value >= 0.01);
            if g.reference.analytic {
                assert_eq!(g.reference.value, g.boundary.volume().unwrap());
            }
        }
    }

    #[test]
    fn hopeless_threshold_is_reported() {
        let spec = HullSpec {
            flow: FlowSpec::gaussian(identity_spec(2)),
            radius: 0.01,
            n_points: 6,
            seed: 4,
            min_cdf: 0.5,
        };
        let err = generate_hull(&spec, &mut rng_from_seed(4)).unwrap_err();
        assert!(matches!(err, Error::HullRejected { attempts: 100, .. }));
        assert!(err.to_string().contains("larger radius"));
    }

    #[test]
    fn invalid_hull_specs() {
        let base = HullSpec {
            flow: identity_spec(3),
            radius: 0.5,
            n_points: 20,
            seed: 0,
            min_cdf: 0.01,
        };
        for bad in [
            HullSpec { radius: 0.0, ..base.clone() },
            HullSpec { n_points: 3, ..base.clone() },
            HullSpec { min_cdf: 1.0, ..base.clone() },
        ] {
            assert!(matches!(generate_hull(&bad, &mut rng_from_seed(0)), Err(Error::Config(_))));
        }
    }

    #[test]
    fn analytic_references() {
        let id = make_flow(&identity_spec(2)).unwrap();
        let b = convex_hull(&[0.1, 0.2, 0.7].iter().flat_map(|&x| [Point::from_row_slice(&[x, 0.1]), Point::from_row_slice(&[x, 0.8])]).collect::<Vec<_>>()).unwrap();
        let r = reference_cdf(id.as_ref(), &b).unwrap();
        assert!(r.analytic);
        assert_eq!(r.value, b.volume().unwrap());

        let doubling = make_flow(&FlowSpec::Affine {
            matrix: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            offset: vec![0.0, 0.0],
        })
        .unwrap();
        let square = convex_hull(&unit_cube_corners(2)).unwrap();
        let r = reference_cdf(doubling.as_ref(), &square).unwrap();
        assert!(r.analytic);
        assert!((r.value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sampled_reference_agrees_with_analytic() {
        let f = make_flow(&FlowSpec::random_affine(3, 2, 0.05)).unwrap();
        let b = convex_hull(&[
            Point::from_row_slice(&[0.3, 0.3, 0.3]),
            Point::from_row_slice(&[0.7, 0.35, 0.3]),
            Point::from_row_slice(&[0.4, 0.75, 0.35]),
            Point::from_row_slice(&[0.45, 0.4, 0.8]),
            Point::from_row_slice(&[0.6, 0.6, 0.6]),
        ])
        .unwrap();
        let exact = reference_cdf(f.as_ref(), &b).unwrap();
        assert!(exact.analytic);
        let sampled = reference_cdf_with(f.as_ref(), &b, 200_000, 9).unwrap();
        assert!((sampled.value - exact.value).abs() <= 3.0 * sampled.std_error + 1e-12);
    }

    #[test]
    fn coupling_reference_is_precise() {
        let f = make_flow(&FlowSpec::gaussian(FlowSpec::coupling_stack(2, 3, 16, 5))).unwrap();
        let spec = HullSpec {
            flow: FlowSpec::Identity { dim: 2 },
            radius: 1.0,
            n_points: 20,
            seed: 0,
            min_cdf: 0.01,
        };
        let g = generate_hull_for(f.as_ref(), &spec, &mut rng_from_seed(5)).unwrap();
        assert!(!g.reference.analytic);
        assert!(g.reference.std_error < 1e-3, "{:?}", g.reference);
    }

    #[test]
    fn reference_is_reproducible() {
        let f = make_flow(&FlowSpec::gaussian(FlowSpec::coupling_stack(2, 2, 8, 5))).unwrap();
        let b = convex_hull(&unit_cube_corners(2)).unwrap();
        let a = reference_cdf_with(f.as_ref(), &b, 10_001, 3).unwrap();
        let c = reference_cdf_with(f.as_ref(), &b, 10_001, 3).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn derived_seeds_differ() {
        let mut seen = std::collections::HashSet::new();
        for a in 0..10u64 {
            for b in 0..10u64 {
                assert!(seen.insert(derive_seed(7, &[a, b])));
            }
        }
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
    }

    fn tiny_config() -> BenchConfig {
        BenchConfig {
            flows: vec![NamedFlow {
                name: "id".into(),
                spec: FlowSpec::gaussian(identity_spec(2)),
            }],
            radii: vec![0.5],
            n_points: 8,
            min_cdf: 0.01,
            budget: 64,
            runs: 5,
            hulls_per_cell: 2,
            seed: 11,
            bfs_variant: BfsVariant::AreaWeighted,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn record_counts_and_arithmetic() {
        let res = evaluate(&tiny_config()).unwrap();
        assert_eq!(res.records.len(), 2 * (1 + 3 * 5));
        for r in &res.records {
            assert!(r.error.is_none(), "{:?}", r.error);
            assert_eq!(r.abs_error, (r.estimate - r.reference).abs());
            assert_eq!(r.rel_error, r.abs_error / r.reference);
            assert_eq!(r.seed.is_some(), r.method != Method::Bfa);
        }
        let summary = summarize(&res);
        assert_eq!(summary.overall.len(), 4);
        assert!(format_summary(&summary).contains("BF-A, "));
    }

    #[test]
    fn identity_cell_bfa_is_exact() {
        let cfg = BenchConfig {
            flows: vec![NamedFlow {
                name: "raw-identity".into(),
                spec: identity_spec(2),
            }],
            radii: vec![0.2],
            ..tiny_config()
        };
        let res = evaluate(&cfg).unwrap();
        let bfa: Vec<_> = res.records.iter().filter(|r| r.method == Method::Bfa).collect();
        assert_eq!(bfa.len(), 2);
        // Hulls that poke out of the cube use a sampled reference; only check exact ones.
        for (r, h) in bfa.iter().zip(&res.hulls) {
            if h.reference.unwrap().analytic {
                assert!(r.abs_error < 1e-9, "{r:?}");
            }
        }
    }

    #[test]
    fn evaluate_is_reproducible() {
        let a = evaluate(&tiny_config()).unwrap();
        let b = evaluate(&tiny_config()).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_records_csv(&mut ca, &a.records).unwrap();
        write_records_csv(&mut cb, &b.records).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn aggregate_format() {
        let m = MeanStd { mean: 0.00152, std: 0.00554 };
        assert_eq!(m.to_string(), "0.00152±0.00554");
        assert_eq!(MeanStd::of(&[1.0, 3.0]), MeanStd { mean: 2.0, std: 2f64.sqrt() });
    }

    #[test]
    fn convergence_on_identity_flow() {
        let f = make_flow(&identity_spec(2)).unwrap();
        let b = convex_hull(&[
            Point::from_row_slice(&[0.2, 0.2]),
            Point::from_row_slice(&[0.8, 0.3]),
            Point::from_row_slice(&[0.5, 0.9]),
        ])
        .unwrap();
        let reference = reference_cdf(f.as_ref(), &b).unwrap();
        let rep = convergence_report(f.as_ref(), &b, reference, 100, 3, 1, &EstimatorSettings::default()).unwrap();
        let bfa: Vec<_> = rep.traces_for(Method::Bfa).collect();
        assert_eq!(bfa.len(), 1);
        assert_eq!(bfa[0].points.len(), 98);
        assert!(bfa[0].points.iter().all(|p| p.2 < 1e-14));
        let mc = rep.traces_for(Method::Mc).next().unwrap();
        let pts: Vec<usize> = mc.points.iter().map(|p| p.0).collect();
        assert_eq!(pts, vec![1, 2, 4, 8, 16, 32, 64, 100]);
        assert_eq!(rep.traces_for(Method::Is).count(), 3);
    }
}
