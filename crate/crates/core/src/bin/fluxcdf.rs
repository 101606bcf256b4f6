use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fluxcdf::estimators::{BfsVariant, Method};
use fluxcdf::flows::{make_flow, FlowSpec};
use fluxcdf::geometry::{PolytopeFile, SimplicialBoundary};
use fluxcdf::harness::{
    convergence_report, default_flows, evaluate, format_summary, generate_hull, reference_cdf, run_method,
    summarize, write_records_csv, BenchConfig, EstimatorSettings, HullSpec,
};
use fluxcdf::refine::{BfaOptions, DEFAULT_EPSILON};

#[derive(Parser)]
#[command(name = "fluxcdf", version, about = "CDF estimation for normalizing flows over simplicial polytopes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a built-in flow spec as JSON.
    FlowSpec {
        #[arg(value_enum)]
        kind: FlowKind,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a hull on a sphere around a flow sample.
    GenHull {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 20)]
        n_points: usize,
        #[arg(long, default_value_t = 0.01)]
        min_cdf: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one estimator and write its trace.
    Estimate {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        polytope: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep every N-th trace row (the last row is always kept).
        #[arg(long, default_value_t = 1)]
        trace_every: usize,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Run the benchmark grid.
    Bench {
        /// JSON config; without it the default grid over `--dims` is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Error traces of all methods on one hull.
    Converge {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        polytope: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
    },
}

#[derive(Args)]
struct SettingsArgs {
    /// Priority floor for adaptive refinement.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Recompute refined geometry after every split and fail on mismatch.
    #[arg(long)]
    verify_complex: bool,
    #[arg(long, value_enum, default_value_t = VariantArg::AreaWeighted)]
    bfs_variant: VariantArg,
}

impl SettingsArgs {
    fn settings(&self) -> EstimatorSettings {
        EstimatorSettings {
            bfs_variant: match self.bfs_variant {
                VariantArg::AreaWeighted => BfsVariant::AreaWeighted,
                VariantArg::PerSimplex => BfsVariant::PerSimplex,
            },
            bfa: BfaOptions {
                epsilon: self.epsilon,
                verify_complex: self.verify_complex,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mc,
    Is,
    Bfs,
    Bfa,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mc => Method::Mc,
            MethodArg::Is => Method::Is,
            MethodArg::Bfs => Method::Bfs,
            MethodArg::Bfa => Method::Bfa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    AreaWeighted,
    PerSimplex,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowKind {
    Identity,
    Affine,
    Coupling,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn load_polytope(path: &Path) -> Result<SimplicialBoundary> {
    let file: PolytopeFile = read_json(path)?;
    SimplicialBoundary::from_file(&file).with_context(|| format!("building boundary from {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::FlowSpec { kind, dim, seed, out } => {
            let index = match kind {
                FlowKind::Identity => 0,
                FlowKind::Affine => 1,
                FlowKind::Coupling => 2,
            };
            let spec = default_flows(dim, seed).swap_remove(index).spec;
            make_flow(&spec)?;
            match out {
                Some(path) => write_json(&path, &spec)?,
                None => println!("{}", serde_json::to_string_pretty(&spec)?),
            }
        }
        Command::GenHull {
            flow,
            radius,
            n_points,
            min_cdf,
            seed,
            out,
        } => {
            let spec = HullSpec {
                flow: read_json::<FlowSpec>(&flow)?,
                radius,
                n_points,
                seed,
                min_cdf,
            };
            let hull = generate_hull(&spec, &mut fluxcdf::rng_from_seed(seed))?;
            write_json(&out, &hull.boundary.to_file())?;
            println!("{}", serde_json::to_string(&hull.reference)?);
        }
        Command::Estimate {
            method,
            flow,
            polytope,
            budget,
            seed,
            out,
            trace_every,
            settings,
        } => {
            let flow = make_flow(&read_json::<FlowSpec>(&flow)?)?;
            let boundary = load_polytope(&polytope)?;
            if flow.dim() != boundary.dim() {
                bail!("flow is {}D but the polytope is {}D", flow.dim(), boundary.dim());
            }
            let trace = run_method(method.into(), flow.as_ref(), &boundary, budget, seed, &settings.settings())?;
            if let Some(path) = out {
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                let mut w = BufWriter::new(file);
                trace.write_csv(&mut w, trace_every)?;
                w.flush()?;
            }
            let last = trace.last().context("empty trace")?;
            println!("{} estimate {} after {} points", trace.method, last.estimate, last.points_used);
        }
        Command::Bench {
            config,
            dims,
            seed,
            out_dir,
        } => {
            let config = match config {
                Some(path) => read_json::<BenchConfig>(&path)?,
                None => BenchConfig::default_grid(&dims, seed),
            };
            fs::create_dir_all(&out_dir)?;
            let result = evaluate(&config)?;
            let mut w = BufWriter::new(File::create(out_dir.join("records.csv"))?);
            write_records_csv(&mut w, &result.records)?;
            w.flush()?;
            let summary = summarize(&result);
            write_json(&out_dir.join("summary.json"), &summary)?;
            print!("{}", format_summary(&summary));
            let failed = result.hulls.iter().filter(|h| h.error.is_some()).count();
            if failed > 0 {
                eprintln!("warning: {failed} hull(s) could not be generated; see summary.json");
            }
        }
        Command::Converge {
            flow,
            polytope,
            budget,
            runs,
            seed,
            out,
            settings,
        } => {
            let flow = make_flow(&read_json::<FlowSpec>(&flow)?)?;
            let boundary = load_polytope(&polytope)?;
            let reference = reference_cdf(flow.as_ref(), &boundary)?;
            let report = convergence_report(flow.as_ref(), &boundary, reference, budget, runs, seed, &settings.settings())?;
            let mut w = BufWriter::new(File::create(&out)?);
            report.write_csv(&mut w)?;
            w.flush()?;
            for method in Method::ALL {
                if let Some(m) = report.median_abs_error(method, budget) {
                    println!("{method}: median abs error {m:.3e} at {budget} points");
                }
            }
        }
    }
    Ok(())
}
