use crate::flows::FlowError;
use crate::geometry::GeometryError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error(transparent)]
    Flow(#[from] FlowError),

    #[error("non-finite G field at {point:?}")]
    NonFiniteField { point: Vec<f64> },

    #[error("budget {budget} is too small: {reason}")]
    Budget { budget: usize, reason: String },

    #[error("refinement complex is inconsistent: {0}")]
    Complex(String),

    #[error("hull generation failed after {attempts} rejections (largest reference {best:.3e} < min_cdf {min_cdf}); try a larger radius")]
    HullRejected { attempts: usize, best: f64, min_cdf: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}
