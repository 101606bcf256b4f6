//! Base-space field `F(y) = y/d` and its target-space pullback
//! `G(x) = |det ∇g(x)| · ∇f(g(x)) · F(g(x))`.
//!
//! `div F = 1`, and `div G = |det ∇g|`, so the outward flux of `G` through
//! `∂V` is the probability mass of `V`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::flows::Diffeomorphism;
use crate::geometry::Point;

/// `G` evaluated at one target-space point, with the base point and
/// log-determinant it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub point: Point,
    pub base_point: Point,
    pub g_vector: DVector<f64>,
    pub log_det: f64,
}

pub fn base_field(y: &Point) -> DVector<f64> {
    y / y.len() as f64
}

pub fn field_g(flow: &dyn Diffeomorphism, x: &Point) -> Result<FieldSample> {
    field_g_with(flow, x, base_field)
}

/// `G` for an arbitrary base field. The base field must have unit divergence
/// for the flux to equal probability mass.
pub fn field_g_with(
    flow: &dyn Diffeomorphism,
    x: &Point,
    base: impl Fn(&Point) -> DVector<f64>,
) -> Result<FieldSample> {
    let pb = flow.pullback(x)?;
    let g_vector = pb.log_abs_det_inverse.exp() * (&pb.jacobian_forward * base(&pb.base_point));
    if g_vector.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteField {
            point: x.iter().copied().collect(),
        });
    }
    Ok(FieldSample {
        point: x.clone(),
        base_point: pb.base_point,
        g_vector,
        log_det: pb.log_abs_det_inverse,
    })
}

#[inline]
pub fn dot_g_normal(sample: &FieldSample, unit_normal: &DVector<f64>) -> f64 {
    sample.g_vector.dot(unit_normal)
}

/// Central-difference divergence `Σ_k (v(x + h e_k)_k - v(x - h e_k)_k) / 2h`.
pub fn divergence_fd(field: impl Fn(&Point) -> DVector<f64>, x: &Point, step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    (0..x.len())
        .map(|k| {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += step;
            dn[k] -= step;
            (field(&up)[k] - field(&dn)[k]) / (2.0 * step)
        })
        .sum()
}
