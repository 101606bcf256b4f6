//! Cumulative densities of normalizing flows over simplicial polytopes.
//!
//! The probability mass a flow `x = f(y)` with uniform base on `[0,1]^d`
//! assigns to a region `V` equals the base-space volume of `g(V)`, where
//! `g = f⁻¹`. That volume is a flux of `F(y) = y/d` through `g(∂V)`, which
//! pulls back to a flux of `G = |J| J⁻¹ F` (with `J = ∇g`) through `∂V`
//! itself. The estimators in [`estimators`] and [`refine`] integrate `G`
//! over the simplicial boundary directly; Monte-Carlo and importance
//! sampling are provided as baselines.
//!
//! Module map:
//!
//! - [`geometry`]: simplex normals, convex hulls, volumes, membership, sampling.
//! - [`flows`]: the [`flows::Diffeomorphism`] trait and the built-in flows.
//! - [`field`]: the base field `F` and the pulled-back field `G`.
//! - [`estimators`]: MC, IS, stochastic boundary flux, deterministic boundary flux.
//! - [`refine`]: adaptive boundary-flux refinement by prioritized edge splitting.
//! - [`harness`]: hull generation, reference values, benchmark grids and reports.

pub mod error;
pub mod estimators;
pub mod field;
pub mod flows;
pub mod geometry;
pub mod harness;
pub mod refine;

pub use error::{Error, Result};
pub use estimators::{EstimateTrace, Method};
pub use flows::{Diffeomorphism, FlowSpec};
pub use geometry::{Point, SimplicialBoundary};

/// Deterministic random stream used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded random stream.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
