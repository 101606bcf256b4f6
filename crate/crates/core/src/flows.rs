//! Diffeomorphisms between the uniform base cube and target space.
//!
//! Every flow maps a base point `y` to a target point `x = f(y)`; the inverse
//! is `g = f⁻¹`. Jacobians are analytic and composed by the chain rule, so no
//! automatic differentiation is involved.

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Open01, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;

use crate::geometry::Point;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("affine matrix is singular (|det| = {det:.3e})")]
    SingularMatrix { det: f64 },
    #[error("coordinate {coordinate} = {value} is outside the open unit interval")]
    Domain { coordinate: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid flow spec: {0}")]
    InvalidSpec(String),
}

/// Everything needed to pull a base-space field back to target space at `x`.
#[derive(Debug, Clone)]
pub struct Pullback {
    pub base_point: Point,
    /// `∇f` evaluated at `base_point`, i.e. `(∇g(x))⁻¹`.
    pub jacobian_forward: DMatrix<f64>,
    pub log_abs_det_inverse: f64,
}

/// An invertible, differentiable map `f` from base space to target space.
pub trait Diffeomorphism: Debug + Send + Sync {
    fn dim(&self) -> usize;

    fn forward(&self, y: &Point) -> Result<Point, FlowError>;

    fn inverse(&self, x: &Point) -> Point;

    /// `∇f(y)`, row `i` holding the gradient of `x_i`.
    fn jacobian_forward(&self, y: &Point) -> Result<DMatrix<f64>, FlowError>;

    /// `log |det ∇g(x)|`.
    fn log_abs_det_jacobian_inverse(&self, x: &Point) -> f64;

    /// `g(x)` and `log |det ∇g(x)|` in one pass. Layered flows override this
    /// to avoid inverting twice.
    fn inverse_and_log_det(&self, x: &Point) -> (Point, f64) {
        (self.inverse(x), self.log_abs_det_jacobian_inverse(x))
    }

    fn pullback(&self, x: &Point) -> Result<Pullback, FlowError> {
        let (base_point, log_abs_det_inverse) = self.inverse_and_log_det(x);
        let jacobian_forward = self.jacobian_forward(&base_point)?;
        Ok(Pullback {
            base_point,
            jacobian_forward,
            log_abs_det_inverse,
        })
    }

    /// `(A, b)` when the flow is globally `x = A y + b`.
    fn as_affine(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        None
    }
}

/// Draws `y` uniformly from the open unit cube and returns `f(y)`.
pub fn sample<R: Rng + ?Sized>(
    flow: &dyn Diffeomorphism,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Point>, FlowError> {
    (0..n).map(|_| sample_one(flow, rng)).collect()
}

pub(crate) fn sample_one<R: Rng + ?Sized>(flow: &dyn Diffeomorphism, rng: &mut R) -> Result<Point, FlowError> {
    let y = DVector::from_fn(flow.dim(), |_, _| rng.sample::<f64, _>(Open01));
    flow.forward(&y)
}

/// Target density `p_X(x)`: `|det ∇g(x)|` where `g(x)` lies in the base cube, zero elsewhere.
pub fn density(flow: &dyn Diffeomorphism, x: &Point) -> f64 {
    let (y, log_det) = flow.inverse_and_log_det(x);
    if y.iter().all(|&c| (0.0..=1.0).contains(&c)) {
        log_det.exp()
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

/// One strictly monotone scalar map used by [`FlowSpec::Elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScalarMap {
    /// `x = shift + logit(y) / scale`, mapping `(0,1)` onto the real line.
    Logit { scale: f64, shift: f64 },
    /// `x = sigmoid(scale * (y - shift))`, mapping the real line onto `(0,1)`.
    Logistic { scale: f64, shift: f64 },
}

fn default_weight_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowSpec {
    Identity {
        dim: usize,
    },
    /// `x = A y + b`.
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    Elementwise {
        maps: Vec<ScalarMap>,
    },
    /// Affine coupling layer with seeded perceptron scale/shift nets.
    Coupling {
        dim: usize,
        hidden: usize,
        seed: u64,
        /// Condition on the trailing half instead of the leading half.
        #[serde(default)]
        flip: bool,
        #[serde(default = "default_weight_scale")]
        weight_scale: f64,
    },
    /// Children applied in order: `f = f_n ∘ ... ∘ f_1`.
    Composition {
        children: Vec<FlowSpec>,
    },
    /// `f(y) = child(Φ⁻¹(y))`: turns a standard-normal-based flow into a
    /// uniform-based one.
    GaussianBaseAdapter {
        child: Box<FlowSpec>,
    },
}

impl FlowSpec {
    /// `layers` coupling layers alternating which half conditions.
    pub fn coupling_stack(dim: usize, layers: usize, hidden: usize, seed: u64) -> FlowSpec {
        FlowSpec::Composition {
            children: (0..layers)
                .map(|i| FlowSpec::Coupling {
                    dim,
                    hidden,
                    seed: seed.wrapping_add(i as u64),
                    flip: i % 2 == 1,
                    weight_scale: 1.0,
                })
                .collect(),
        }
    }

    pub fn gaussian(child: FlowSpec) -> FlowSpec {
        FlowSpec::GaussianBaseAdapter { child: Box::new(child) }
    }

    /// Well-conditioned seeded affine map `I + 0.3 R`, `R` entries in `[-1, 1)`.
    pub fn random_affine(dim: usize, seed: u64, offset_scale: f64) -> FlowSpec {
        let mut rng = crate::rng_from_seed(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let matrix = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| if i == j { 1.0 } else { 0.0 } + 0.3 * u.sample(&mut rng))
                    .collect()
            })
            .collect();
        let offset = (0..dim).map(|_| offset_scale * u.sample(&mut rng)).collect();
        FlowSpec::Affine { matrix, offset }
    }
}

/// The built-in flow families in dimension `dim`, with names.
pub fn builtin_specs(dim: usize, seed: u64) -> Vec<(&'static str, FlowSpec)> {
    let logit = FlowSpec::Elementwise {
        maps: (0..dim)
            .map(|i| ScalarMap::Logit {
                scale: 1.5 + 0.25 * i as f64,
                shift: 0.1 * i as f64,
            })
            .collect(),
    };
    let logistic = FlowSpec::Elementwise {
        maps: (0..dim)
            .map(|i| ScalarMap::Logistic {
                scale: 1.0 + 0.5 * i as f64,
                shift: 0.5,
            })
            .collect(),
    };
    vec![
        ("identity", FlowSpec::Identity { dim }),
        ("affine", FlowSpec::random_affine(dim, seed, 0.2)),
        ("logit", logit),
        ("logistic", logistic),
        (
            "coupling",
            FlowSpec::Coupling {
                dim,
                hidden: 16,
                seed,
                flip: false,
                weight_scale: 1.0,
            },
        ),
        ("coupling_stack", FlowSpec::coupling_stack(dim, 3, 16, seed)),
        ("gaussian_identity", FlowSpec::gaussian(FlowSpec::Identity { dim })),
        (
            "gaussian_coupling_stack",
            FlowSpec::gaussian(FlowSpec::coupling_stack(dim, 3, 16, seed)),
        ),
    ]
}

pub fn make_flow(spec: &FlowSpec) -> Result<Box<dyn Diffeomorphism>, FlowError> {
    Ok(match spec {
        FlowSpec::Identity { dim } => {
            check_dim(*dim)?;
            Box::new(Identity { dim: *dim })
        }
        FlowSpec::Affine { matrix, offset } => Box::new(Affine::new(matrix, offset)?),
        FlowSpec::Elementwise { maps } => {
            check_dim(maps.len())?;
            for m in maps {
                let (ScalarMap::Logit { scale, shift } | ScalarMap::Logistic { scale, shift }) = *m;
                if !(scale > 0.0 && scale.is_finite() && shift.is_finite()) {
                    return Err(FlowError::InvalidSpec(format!("bad scalar map {m:?}")));
                }
            }
            Box::new(Elementwise { maps: maps.clone() })
        }
        FlowSpec::Coupling {
            dim,
            hidden,
            seed,
            flip,
            weight_scale,
        } => {
            check_dim(*dim)?;
            if *hidden == 0 || !weight_scale.is_finite() {
                return Err(FlowError::InvalidSpec("coupling needs hidden > 0 and a finite weight scale".into()));
            }
            Box::new(AffineCoupling::new(*dim, *hidden, *seed, *flip, *weight_scale))
        }
        FlowSpec::Composition { children } => {
            let layers = children.iter().map(make_flow).collect::<Result<Vec<_>, _>>()?;
            let dim = layers
                .first()
                .ok_or_else(|| FlowError::InvalidSpec("empty composition".into()))?
                .dim();
            if let Some(bad) = layers.iter().find(|l| l.dim() != dim) {
                return Err(FlowError::Dimension {
                    expected: dim,
                    got: bad.dim(),
                });
            }
            Box::new(Composition { layers })
        }
        FlowSpec::GaussianBaseAdapter { child } => Box::new(GaussianBaseAdapter { child: make_flow(child)? }),
    })
}

fn check_dim(dim: usize) -> Result<(), FlowError> {
    if (1..=crate::geometry::MAX_DIM).contains(&dim) {
        Ok(())
    } else {
        Err(FlowError::InvalidSpec(format!("unsupported dimension {dim}")))
    }
}

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, Wichura's AS 241 (PPND16) rational approximation.
#[allow(clippy::inconsistent_digit_grouping, clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_128) * r + 67265.770_927_008_7) * r
                + 45921.953_931_549_87)
                * r
                + 13731.693_765_509_461)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((r * 5226.495_278_852_545 + 28729.085_735_721_943) * r + 39307.895_800_092_71) * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let z = if r <= 5.0 {
        r -= 1.6;
        (((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r + 0.241_780_725_177_450_6) * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((r * 1.050_750_071_644_416_9e-9 + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_07)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

fn check_len(expected: usize, p: &Point) -> Result<(), FlowError> {
    if p.len() == expected {
        Ok(())
    } else {
        Err(FlowError::Dimension {
            expected,
            got: p.len(),
        })
    }
}

fn check_open_cube(y: &Point) -> Result<(), FlowError> {
    match y.iter().position(|&c| !(c > 0.0 && c < 1.0)) {
        Some(coordinate) => Err(FlowError::Domain {
            coordinate,
            value: y[coordinate],
        }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Built-in flows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Identity {
    dim: usize,
}

impl Diffeomorphism for Identity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, y: &Point) -> Result<Point, FlowError> {
        check_len(self.dim, y)?;
        Ok(y.clone())
    }

    fn inverse(&self, x: &Point) -> Point {
        x.clone()
    }

    fn jacobian_forward(&self, _y: &Point) -> Result<DMatrix<f64>, FlowError> {
        Ok(DMatrix::identity(self.dim, self.dim))
    }

    fn log_abs_det_jacobian_inverse(&self, _x: &Point) -> f64 {
        0.0
    }

    fn as_affine(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        Some((DMatrix::identity(self.dim, self.dim), DVector::zeros(self.dim)))
    }
}

#[derive(Debug, Clone)]
pub struct Affine {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
    inverse: DMatrix<f64>,
    log_abs_det: f64,
}

impl Affine {
    pub fn new(matrix: &[Vec<f64>], offset: &[f64]) -> Result<Self, FlowError> {
        let d = offset.len();
        check_dim(d)?;
        if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
            return Err(FlowError::InvalidSpec(format!("affine matrix must be {d}x{d}")));
        }
        if matrix.iter().flatten().chain(offset).any(|c| !c.is_finite()) {
            return Err(FlowError::InvalidSpec("non-finite affine parameter".into()));
        }
        let a = DMatrix::from_fn(d, d, |r, c| matrix[r][c]);
        let det = a.determinant();
        if det.abs() <= 1e-12 {
            return Err(FlowError::SingularMatrix { det });
        }
        let inverse = a.clone().try_inverse().ok_or(FlowError::SingularMatrix { det })?;
        Ok(Affine {
            matrix: a,
            offset: DVector::from_row_slice(offset),
            inverse,
            log_abs_det: det.abs().ln(),
        })
    }
}

impl Diffeomorphism for Affine {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn forward(&self, y: &Point) -> Result<Point, FlowError> {
        check_len(self.dim(), y)?;
        Ok(&self.matrix * y + &self.offset)
    }

    fn inverse(&self, x: &Point) -> Point {
        &self.inverse * (x - &self.offset)
    }

    fn jacobian_forward(&self, _y: &Point) -> Result<DMatrix<f64>, FlowError> {
        Ok(self.matrix.clone())
    }

    fn log_abs_det_jacobian_inverse(&self, _x: &Point) -> f64 {
        -self.log_abs_det
    }

    fn as_affine(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        Some((self.matrix.clone(), self.offset.clone()))
    }
}

#[derive(Debug, Clone)]
pub struct Elementwise {
    maps: Vec<ScalarMap>,
}

impl Diffeomorphism for Elementwise {
    fn dim(&self) -> usize {
        self.maps.len()
    }

    fn forward(&self, y: &Point) -> Result<Point, FlowError> {
        check_len(self.dim(), y)?;
        let mut x = y.clone();
        for (i, m) in self.maps.iter().enumerate() {
            x[i] = match *m {
                ScalarMap::Logit { scale, shift } => {
                    if !(y[i] > 0.0 && y[i] < 1.0) {
                        return Err(FlowError::Domain {
                            coordinate: i,
                            value: y[i],
                        });
                    }
                    shift + logit(y[i]) / scale
                }
                ScalarMap::Logistic { scale, shift } => sigmoid(scale * (y[i] - shift)),
            };
        }
        Ok(x)
    }

    /// Logistic coordinates outside `(0,1)` have no preimage and map to NaN.
    fn inverse(&self, x: &Point) -> Point {
        let mut y = x.clone();
        for (i, m) in self.maps.iter().enumerate() {
            y[i] = match *m {
                ScalarMap::Logit { scale, shift } => sigmoid(scale * (x[i] - shift)),
                ScalarMap::Logistic { scale, shift } => {
                    if x[i] > 0.0 && x[i] < 1.0 {
                        shift + logit(x[i]) / scale
                    } else {
                        f64::NAN
                    }
                }
            };
        }
        y
    }

    fn jacobian_forward(&self, y: &Point) -> Result<DMatrix<f64>, FlowError> {
        let mut j = DMatrix::zeros(self.dim(), self.dim());
        for (i, m) in self.maps.iter().enumerate() {
            j[(i, i)] = match *m {
                ScalarMap::Logit { scale, .. } => {
                    if !(y[i] > 0.0 && y[i] < 1.0) {
                        return Err(FlowError::Domain {
                            coordinate: i,
                            value: y[i],
                        });
                    }
                    1.0 / (scale * y[i] * (1.0 - y[i]))
                }
                ScalarMap::Logistic { scale, shift } => {
                    let s = sigmoid(scale * (y[i] - shift));
                    scale * s * (1.0 - s)
                }
            };
        }
        Ok(j)
    }

    fn log_abs_det_jacobian_inverse(&self, x: &Point) -> f64 {
        self.maps
            .iter()
            .enumerate()
            .map(|(i, m)| match *m {
                ScalarMap::Logit { scale, shift } => {
                    // log(scale σ(u)(1-σ(u))) with u = scale (x - shift)
                    let u = scale * (x[i] - shift);
                    scale.ln() - softplus(-u) - softplus(u)
                }
                ScalarMap::Logistic { scale, .. } => {
                    if x[i] > 0.0 && x[i] < 1.0 {
                        -(scale * x[i] * (1.0 - x[i])).ln()
                    } else {
                        f64::NAN
                    }
                }
            })
            .sum()
    }
}

/// Two-layer perceptron `W2 softplus(W1 u + b1) + b2`.
#[derive(Debug, Clone)]
struct Perceptron {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Perceptron {
    fn seeded<R: Rng>(rng: &mut R, inputs: usize, hidden: usize, outputs: usize, scale: f64) -> Self {
        let u = Uniform::new(-0.5, 0.5).unwrap();
        let s1 = scale / (inputs as f64).sqrt();
        let s2 = scale / (hidden as f64).sqrt();
        Perceptron {
            w1: DMatrix::from_fn(hidden, inputs, |_, _| s1 * u.sample(rng)),
            b1: DVector::from_fn(hidden, |_, _| s1 * u.sample(rng)),
            w2: DMatrix::from_fn(outputs, hidden, |_, _| s2 * u.sample(rng)),
            b2: DVector::from_fn(outputs, |_, _| s2 * u.sample(rng)),
        }
    }

    fn eval(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = self.b2.clone();
        for h in 0..self.w1.nrows() {
            let pre = self.b1[h] + (0..u.len()).map(|i| self.w1[(h, i)] * u[i]).sum::<f64>();
            let act = softplus(pre);
            for (o, v) in out.iter_mut().enumerate() {
                *v += self.w2[(o, h)] * act;
            }
        }
        out
    }

    /// Output and its Jacobian with respect to the input.
    fn eval_with_jacobian(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let pre = &self.w1 * u + &self.b1;
        let out = &self.w2 * pre.map(softplus) + &self.b2;
        let gate = pre.map(sigmoid);
        let mut w1_scaled = self.w1.clone();
        for (r, g) in gate.iter().enumerate() {
            w1_scaled.row_mut(r).scale_mut(*g);
        }
        (out, &self.w2 * w1_scaled)
    }
}

/// `x_c = y_c`, `x_t = y_t ⊙ exp(tanh(s(y_c))) + t(y_c)`.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    dim: usize,
    conditioner: Vec<usize>,
    transformed: Vec<usize>,
    scale_net: Perceptron,
    shift_net: Perceptron,
}

impl AffineCoupling {
    pub fn new(dim: usize, hidden: usize, seed: u64, flip: bool, weight_scale: f64) -> Self {
        let lead = dim.div_ceil(2);
        let (conditioner, transformed): (Vec<usize>, Vec<usize>) = if flip {
            ((dim - dim / 2..dim).collect(), (0..dim - dim / 2).collect())
        } else {
            ((0..lead).collect(), (lead..dim).collect())
        };
        let mut rng = crate::rng_from_seed(seed);
        let (nc, nt) = (conditioner.len(), transformed.len());
        let scale_net = Perceptron::seeded(&mut rng, nc, hidden, nt, weight_scale);
        let shift_net = Perceptron::seeded(&mut rng, nc, hidden, nt, weight_scale);
        AffineCoupling {
            dim,
            conditioner,
            transformed,
            scale_net,
            shift_net,
        }
    }

    fn gather(&self, p: &Point, idx: &[usize]) -> DVector<f64> {
        DVector::from_iterator(idx.len(), idx.iter().map(|&i| p[i]))
    }
}

impl Diffeomorphism for AffineCoupling {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, y: &Point) -> Result<Point, FlowError> {
        check_len(self.dim, y)?;
        let c = self.gather(y, &self.conditioner);
        let s = self.scale_net.eval(&c);
        let t = self.shift_net.eval(&c);
        let mut x = y.clone();
        for (j, &i) in self.transformed.iter().enumerate() {
            x[i] = y[i] * s[j].tanh().exp() + t[j];
        }
        Ok(x)
    }

    fn inverse(&self, x: &Point) -> Point {
        let c = self.gather(x, &self.conditioner);
        let s = self.scale_net.eval(&c);
        let t = self.shift_net.eval(&c);
        let mut y = x.clone();
        for (j, &i) in self.transformed.iter().enumerate() {
            y[i] = (x[i] - t[j]) * (-s[j].tanh()).exp();
        }
        y
    }

    fn jacobian_forward(&self, y: &Point) -> Result<DMatrix<f64>, FlowError> {
        check_len(self.dim, y)?;
        let c = self.gather(y, &self.conditioner);
        let (s, ds) = self.scale_net.eval_with_jacobian(&c);
        let (_, dt) = self.shift_net.eval_with_jacobian(&c);
        let mut jac = DMatrix::identity(self.dim, self.dim);
        for (j, &i) in self.transformed.iter().enumerate() {
            let th = s[j].tanh();
            let e = th.exp();
            jac[(i, i)] = e;
            for (k, &ci) in self.conditioner.iter().enumerate() {
                jac[(i, ci)] = y[i] * e * (1.0 - th * th) * ds[(j, k)] + dt[(j, k)];
            }
        }
        Ok(jac)
    }

    fn log_abs_det_jacobian_inverse(&self, x: &Point) -> f64 {
        let c = self.gather(x, &self.conditioner);
        -self.scale_net.eval(&c).iter().map(|s| s.tanh()).sum::<f64>()
    }

    fn inverse_and_log_det(&self, x: &Point) -> (Point, f64) {
        let c = self.gather(x, &self.conditioner);
        let s = self.scale_net.eval(&c);
        let t = self.shift_net.eval(&c);
        let mut y = x.clone();
        let mut log_det = 0.0;
        for (j, &i) in self.transformed.iter().enumerate() {
            let th = s[j].tanh();
            y[i] = (x[i] - t[j]) * (-th).exp();
            log_det -= th;
        }
        (y, log_det)
    }
}

#[derive(Debug)]
pub struct Composition {
    layers: Vec<Box<dyn Diffeomorphism>>,
}

impl Diffeomorphism for Composition {
    fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    fn forward(&self, y: &Point) -> Result<Point, FlowError> {
        self.layers.iter().try_fold(y.clone(), |z, l| l.forward(&z))
    }

    fn inverse(&self, x: &Point) -> Point {
        self.layers.iter().rev().fold(x.clone(), |z, l| l.inverse(&z))
    }

    fn jacobian_forward(&self, y: &Point) -> Result<DMatrix<f64>, FlowError> {
        let mut z = y.clone();
        let mut jac = DMatrix::identity(self.dim(), self.dim());
        for l in &self.layers {
            jac = l.jacobian_forward(&z)? * jac;
            z = l.forward(&z)?;
        }
        Ok(jac)
    }

    fn log_abs_det_jacobian_inverse(&self, x: &Point) -> f64 {
        let mut z = x.clone();
        let mut total = 0.0;
        for l in self.layers.iter().rev() {
            total += l.log_abs_det_jacobian_inverse(&z);
            z = l.inverse(&z);
        }
        total
    }

    fn inverse_and_log_det(&self, x: &Point) -> (Point, f64) {
        self.layers.iter().rev().fold((x.clone(), 0.0), |(z, total), l| {
            let (next, ld) = l.inverse_and_log_det(&z);
            (next, total + ld)
        })
    }

    fn as_affine(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let d = self.dim();
        self.layers
            .iter()
            .try_fold((DMatrix::identity(d, d), DVector::zeros(d)), |(a, b), l| {
                let (la, lb) = l.as_affine()?;
                Some((&la * a, &la * b + lb))
            })
    }
}

/// `f(y) = child(Φ⁻¹(y))` with `Φ⁻¹` applied per coordinate.
#[derive(Debug)]
pub struct GaussianBaseAdapter {
    child: Box<dyn Diffeomorphism>,
}

impl Diffeomorphism for GaussianBaseAdapter {
    fn dim(&self) -> usize {
        self.child.dim()
    }

    fn forward(&self, y: &Point) -> Result<Point, FlowError> {
        check_len(self.dim(), y)?;
        check_open_cube(y)?;
        self.child.forward(&y.map(normal_quantile))
    }

    fn inverse(&self, x: &Point) -> Point {
        self.child.inverse(x).map(normal_cdf)
    }

    fn jacobian_forward(&self, y: &Point) -> Result<DMatrix<f64>, FlowError> {
        check_open_cube(y)?;
        let z = y.map(normal_quantile);
        self.jacobian_from_latent(&z)
    }

    fn log_abs_det_jacobian_inverse(&self, x: &Point) -> f64 {
        self.inverse_and_log_det(x).1
    }

    fn inverse_and_log_det(&self, x: &Point) -> (Point, f64) {
        let (z, ld) = self.child.inverse_and_log_det(x);
        let log_det = ld + log_normal_pdf_sum(&z);
        (z.map(normal_cdf), log_det)
    }

    /// Works from the latent normal point directly, so tails where `Φ(z)`
    /// rounds to 0 or 1 keep a finite Jacobian.
    fn pullback(&self, x: &Point) -> Result<Pullback, FlowError> {
        let (z, ld) = self.child.inverse_and_log_det(x);
        let log_abs_det_inverse = ld + log_normal_pdf_sum(&z);
        Ok(Pullback {
            base_point: z.map(normal_cdf),
            jacobian_forward: self.jacobian_from_latent(&z)?,
            log_abs_det_inverse,
        })
    }
}

fn log_normal_pdf_sum(z: &Point) -> f64 {
    z.iter().map(|&zi| -0.5 * zi * zi - LN_SQRT_2PI).sum()
}

impl GaussianBaseAdapter {
    fn jacobian_from_latent(&self, z: &Point) -> Result<DMatrix<f64>, FlowError> {
        let mut jac = self.child.jacobian_forward(z)?;
        for (c, &zc) in z.iter().enumerate() {
            jac.column_mut(c).scale_mut(1.0 / normal_pdf(zc));
        }
        Ok(jac)
    }
}
