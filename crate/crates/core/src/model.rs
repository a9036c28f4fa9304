//! State-space model definitions: linear-Gaussian, stochastic Lorenz 63 and
//! stochastic Lorenz 96.
//!
//! A model is `dX = f(X) dt + Q^{1/2} dW`, `dY = C X dt + R^{1/2} dV` with
//! `X_0 ~ N(M0, P0)`. Noise enters only through the square roots; `R^{-1}`,
//! `S = C^T R^{-1} C` and `C^T R^{-1}` are cached at construction.

use nalgebra::{DMatrix, DVector, DVectorView};
use num_traits::Float;
use rand::Rng;

use crate::error::{FilterError, Result};
use crate::scalar::Real;

/// Condition-number estimate above which `R^{1/2}` is rejected.
pub const MAX_R_CONDITION: f64 = 1e12;

/// Signal drift: linear `A x` or one of the supported nonlinear families.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift<T: Real> {
    Linear(DMatrix<T>),
    /// `(θ1 (x2 - x1), θ2 x1 - x2 - x1 x3, x1 x2 - θ3 x3)`.
    Lorenz63 { theta: [T; 3] },
    /// Cyclic `(x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`.
    Lorenz96 { forcing: T },
}

impl<T: Real> Drift<T> {
    pub fn is_linear(&self) -> bool {
        matches!(self, Drift::Linear(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T: Real> {
    dx: usize,
    dy: usize,
    drift: Drift<T>,
    c: DMatrix<T>,
    q_sqrt: DMatrix<T>,
    r_sqrt: DMatrix<T>,
    m0: DVector<T>,
    p0: DMatrix<T>,
    q: DMatrix<T>,
    r_inv: DMatrix<T>,
    s: DMatrix<T>,
    ct_r_inv: DMatrix<T>,
}

fn check_dims(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(FilterError::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| Float::max(acc, Float::abs(*v)))
}

/// Exactly symmetric copy `(M + M^T) / 2`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::c(0.5);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i <= j {
            (m[(i, j)] + m[(j, i)]) * half
        } else {
            (m[(j, i)] + m[(i, j)]) * half
        }
    })
}

fn is_symmetric<T: Real>(m: &DMatrix<T>, rel_tol: f64) -> bool {
    let scale = T::one() + max_abs(m);
    let tol = T::c(rel_tol) * scale;
    (0..m.nrows()).all(|i| (0..i).all(|j| Float::abs(m[(i, j)] - m[(j, i)]) <= tol))
}

fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(T::infinity(), |acc, v| Float::min(acc, *v))
}

impl<T: Real> ModelSpec<T> {
    /// Assembles and validates a model with any drift.
    pub fn new(
        drift: Drift<T>,
        c: DMatrix<T>,
        q_sqrt: DMatrix<T>,
        r_sqrt: DMatrix<T>,
        m0: DVector<T>,
        p0: DMatrix<T>,
    ) -> Result<Self> {
        let dx = m0.len();
        if dx == 0 {
            return Err(FilterError::InvalidConfig("state dimension must be positive".into()));
        }
        let dy = c.nrows();
        if dy == 0 {
            return Err(FilterError::InvalidConfig(
                "observation dimension must be positive".into(),
            ));
        }
        check_dims("C columns", dx, c.ncols())?;
        check_dims("Q_sqrt rows", dx, q_sqrt.nrows())?;
        check_dims("Q_sqrt columns", dx, q_sqrt.ncols())?;
        check_dims("R_sqrt rows", dy, r_sqrt.nrows())?;
        check_dims("R_sqrt columns", dy, r_sqrt.ncols())?;
        check_dims("P0 rows", dx, p0.nrows())?;
        check_dims("P0 columns", dx, p0.ncols())?;
        match &drift {
            Drift::Linear(a) => {
                check_dims("A rows", dx, a.nrows())?;
                check_dims("A columns", dx, a.ncols())?;
            }
            Drift::Lorenz63 { .. } => check_dims("Lorenz 63 state", 3, dx)?,
            Drift::Lorenz96 { .. } => {
                if dx < 4 {
                    return Err(FilterError::DimensionTooSmall { min: 4, got: dx });
                }
            }
        }
        if !is_symmetric(&q_sqrt, 1e-12) {
            return Err(FilterError::InvalidConfig("Q_sqrt must be symmetric".into()));
        }
        if !is_symmetric(&r_sqrt, 1e-12) {
            return Err(FilterError::InvalidConfig("R_sqrt must be symmetric".into()));
        }
        if !is_symmetric(&p0, 1e-12) {
            return Err(FilterError::InvalidConfig("P0 must be symmetric".into()));
        }
        let p0 = symmetrize(&p0);
        if min_eigenvalue(&p0) < -T::c(1e-10) * (T::one() + max_abs(&p0)) {
            return Err(FilterError::InvalidConfig("P0 must be positive semidefinite".into()));
        }

        let sv = r_sqrt.clone().singular_values();
        let smax = sv.iter().fold(T::zero(), |a, v| Float::max(a, *v));
        let smin = sv.iter().fold(T::infinity(), |a, v| Float::min(a, *v));
        let condition = if smin > T::zero() {
            (smax / smin).as_f64()
        } else {
            f64::INFINITY
        };
        if !(condition <= MAX_R_CONDITION) {
            return Err(FilterError::SingularRsqrt { condition });
        }
        let r = symmetrize(&(&r_sqrt * &r_sqrt));
        let r_inv = r
            .clone()
            .cholesky()
            .map(|ch| symmetrize(&ch.inverse()))
            .ok_or(FilterError::SingularRsqrt { condition })?;
        let ct_r_inv = c.transpose() * &r_inv;
        let s = symmetrize(&(&ct_r_inv * &c));
        let q = symmetrize(&(&q_sqrt * &q_sqrt));
        Ok(Self {
            dx,
            dy,
            drift,
            c,
            q_sqrt,
            r_sqrt,
            m0,
            p0,
            q,
            r_inv,
            s,
            ct_r_inv,
        })
    }

    pub fn dx(&self) -> usize {
        self.dx
    }
    pub fn dy(&self) -> usize {
        self.dy
    }
    pub fn drift(&self) -> &Drift<T> {
        &self.drift
    }
    pub fn c(&self) -> &DMatrix<T> {
        &self.c
    }
    pub fn q_sqrt(&self) -> &DMatrix<T> {
        &self.q_sqrt
    }
    pub fn r_sqrt(&self) -> &DMatrix<T> {
        &self.r_sqrt
    }
    pub fn m0(&self) -> &DVector<T> {
        &self.m0
    }
    pub fn p0(&self) -> &DMatrix<T> {
        &self.p0
    }
    /// `Q = Q^{1/2} Q^{1/2}`.
    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }
    pub fn r_inv(&self) -> &DMatrix<T> {
        &self.r_inv
    }
    /// `S = C^T R^{-1} C`.
    pub fn s(&self) -> &DMatrix<T> {
        &self.s
    }
    /// `C^T R^{-1}`, the constant right factor of every gain.
    pub fn ct_r_inv(&self) -> &DMatrix<T> {
        &self.ct_r_inv
    }

    /// The linear drift matrix, or `NotLinear`.
    pub fn drift_matrix(&self) -> Result<&DMatrix<T>> {
        match &self.drift {
            Drift::Linear(a) => Ok(a),
            _ => Err(FilterError::NotLinear),
        }
    }

    /// Same model with a different initial law.
    pub fn with_initial(&self, m0: DVector<T>, p0: DMatrix<T>) -> Result<Self> {
        Self::new(
            self.drift.clone(),
            self.c.clone(),
            self.q_sqrt.clone(),
            self.r_sqrt.clone(),
            m0,
            p0,
        )
    }

    pub fn drift_eval(&self, x: DVectorView<'_, T>) -> Result<DVector<T>> {
        check_dims("drift input", self.dx, x.len())?;
        Ok(match &self.drift {
            Drift::Linear(a) => a * x,
            Drift::Lorenz63 { theta } => lorenz63_drift(x, theta)?,
            Drift::Lorenz96 { forcing } => lorenz96_drift(x, *forcing)?,
        })
    }

    /// Drift applied to every column of a `d_x × N` particle matrix.
    pub fn drift_columns(&self, particles: &DMatrix<T>) -> DMatrix<T> {
        match &self.drift {
            Drift::Linear(a) => a * particles,
            _ => {
                let mut out = DMatrix::zeros(particles.nrows(), particles.ncols());
                for (j, col) in particles.column_iter().enumerate() {
                    let f = self
                        .drift_eval(col.as_view())
                        .expect("particle dimension validated by caller");
                    out.set_column(j, &f);
                }
                out
            }
        }
    }
}

/// Builds a linear-Gaussian model; `R^{-1}` and `S` are precomputed.
pub fn build_linear_model<T: Real>(
    a: DMatrix<T>,
    c: DMatrix<T>,
    q_sqrt: DMatrix<T>,
    r_sqrt: DMatrix<T>,
    m0: DVector<T>,
    p0: DMatrix<T>,
) -> Result<ModelSpec<T>> {
    ModelSpec::new(Drift::Linear(a), c, q_sqrt, r_sqrt, m0, p0)
}

pub fn lorenz63_drift<T: Real>(x: DVectorView<'_, T>, theta: &[T]) -> Result<DVector<T>> {
    check_dims("Lorenz 63 state", 3, x.len())?;
    check_dims("Lorenz 63 parameters", 3, theta.len())?;
    Ok(DVector::from_vec(vec![
        theta[0] * (x[1] - x[0]),
        theta[1] * x[0] - x[1] - x[0] * x[2],
        x[0] * x[1] - theta[2] * x[2],
    ]))
}

pub fn lorenz96_drift<T: Real>(x: DVectorView<'_, T>, forcing: T) -> Result<DVector<T>> {
    let d = x.len();
    if d < 4 {
        return Err(FilterError::DimensionTooSmall { min: 4, got: d });
    }
    Ok(DVector::from_fn(d, |i, _| {
        let next = x[(i + 1) % d];
        let prev = x[(i + d - 1) % d];
        let prev2 = x[(i + d - 2) % d];
        (next - prev2) * prev - x[i] + forcing
    }))
}

/// Compactly supported taper `1 - 3x/2 + x^3/2` on `[0, 1]`, zero elsewhere.
pub fn taper<T: Real>(x: T) -> T {
    if x >= T::zero() && x <= T::one() {
        T::one() - T::c(1.5) * x + T::c(0.5) * x * x * x
    } else {
        T::zero()
    }
}

/// `C` and `R^{1/2}` of the stochastic Lorenz 63 experiment.
///
/// `r2` is the period of the circulant distance in the taper argument.
pub fn lorenz63_observation_operators<T: Real>(r2: usize) -> (DMatrix<T>, DMatrix<T>) {
    let c = DMatrix::from_fn(3, 3, |i, j| {
        if i == j || j == i + 1 {
            T::c(0.5)
        } else {
            T::zero()
        }
    });
    let r_sqrt = DMatrix::from_fn(3, 3, |i, j| {
        let d = i.abs_diff(j);
        let dist = d.min(r2.saturating_sub(d));
        T::c(2.0) * taper(T::c(0.4) * T::c(dist as f64))
    });
    (c, r_sqrt)
}

/// Symmetric tridiagonal matrix with constant bands.
pub fn tridiagonal<T: Real>(n: usize, diag: T, off: T) -> DMatrix<T> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            diag
        } else if i.abs_diff(j) == 1 {
            off
        } else {
            T::zero()
        }
    })
}

/// Matrix with i.i.d. uniform `[0, 1)` entries, filled row by row.
pub fn random_unit_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    let vals: Vec<T> = (0..rows * cols).map(|_| T::unit_uniform(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &vals)
}

/// Parameter vector with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector<T: Real> {
    pub values: Vec<T>,
    pub names: Vec<String>,
}

impl<T: Real> ThetaVector<T> {
    pub fn new(values: Vec<T>, names: Vec<String>) -> Result<Self> {
        check_dims("theta labels", values.len(), names.len())?;
        Ok(Self { values, names })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| Float::is_finite(*v))
    }
}

/// A parametric family `θ ↦ ModelSpec`.
pub trait ModelFamily<T: Real>: Send + Sync {
    fn parameter_names(&self) -> Vec<String>;

    fn build(&self, theta: &[T]) -> Result<ModelSpec<T>>;

    fn theta(&self, values: Vec<T>) -> Result<ThetaVector<T>> {
        let names = self.parameter_names();
        check_dims("theta length", names.len(), values.len())?;
        ThetaVector::new(values, names)
    }
}

/// Linear family `A = θ1 Id` and, when `noise_shape` is set, `Q^{1/2} = θ2 · shape`.
#[derive(Debug, Clone)]
pub struct LinearFamily<T: Real> {
    pub c: DMatrix<T>,
    pub r_sqrt: DMatrix<T>,
    pub m0: DVector<T>,
    pub p0: DMatrix<T>,
    /// Fixed `Q^{1/2}` when the noise scale is not estimated.
    pub q_sqrt: DMatrix<T>,
    pub noise_shape: Option<DMatrix<T>>,
}

impl<T: Real> ModelFamily<T> for LinearFamily<T> {
    fn parameter_names(&self) -> Vec<String> {
        if self.noise_shape.is_some() {
            vec!["theta_1".into(), "theta_2".into()]
        } else {
            vec!["theta_1".into()]
        }
    }

    fn build(&self, theta: &[T]) -> Result<ModelSpec<T>> {
        check_dims("theta length", self.parameter_names().len(), theta.len())?;
        let d = self.m0.len();
        let a = DMatrix::identity(d, d) * theta[0];
        let q_sqrt = match &self.noise_shape {
            Some(shape) => shape * theta[1],
            None => self.q_sqrt.clone(),
        };
        build_linear_model(
            a,
            self.c.clone(),
            q_sqrt,
            self.r_sqrt.clone(),
            self.m0.clone(),
            self.p0.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Lorenz63Family<T: Real> {
    pub c: DMatrix<T>,
    pub q_sqrt: DMatrix<T>,
    pub r_sqrt: DMatrix<T>,
    pub m0: DVector<T>,
    pub p0: DMatrix<T>,
}

impl<T: Real> ModelFamily<T> for Lorenz63Family<T> {
    fn parameter_names(&self) -> Vec<String> {
        vec!["theta_1".into(), "theta_2".into(), "theta_3".into()]
    }

    fn build(&self, theta: &[T]) -> Result<ModelSpec<T>> {
        check_dims("theta length", 3, theta.len())?;
        ModelSpec::new(
            Drift::Lorenz63 {
                theta: [theta[0], theta[1], theta[2]],
            },
            self.c.clone(),
            self.q_sqrt.clone(),
            self.r_sqrt.clone(),
            self.m0.clone(),
            self.p0.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Lorenz96Family<T: Real> {
    pub c: DMatrix<T>,
    pub q_sqrt: DMatrix<T>,
    pub r_sqrt: DMatrix<T>,
    pub m0: DVector<T>,
    pub p0: DMatrix<T>,
}

impl<T: Real> ModelFamily<T> for Lorenz96Family<T> {
    fn parameter_names(&self) -> Vec<String> {
        vec!["theta".into()]
    }

    fn build(&self, theta: &[T]) -> Result<ModelSpec<T>> {
        check_dims("theta length", 1, theta.len())?;
        ModelSpec::new(
            Drift::Lorenz96 { forcing: theta[0] },
            self.c.clone(),
            self.q_sqrt.clone(),
            self.r_sqrt.clone(),
            self.m0.clone(),
            self.p0.clone(),
        )
    }
}

/// Named model configurations used by the experiments.
pub mod presets {
    use super::*;

    /// Five-dimensional Ornstein-Uhlenbeck rate model with a given `C`.
    pub fn ou5<T: Real>(c: DMatrix<T>) -> Result<ModelSpec<T>> {
        let d = 5;
        build_linear_model(
            DMatrix::identity(d, d) * T::c(-0.8),
            c,
            tridiagonal(d, T::c(2.0 / 3.0), T::c(1.0 / 3.0)),
            DMatrix::identity(d, d) * T::c(2.0),
            DVector::from_element(d, T::c(0.1)),
            DMatrix::identity(d, d) * T::c(0.05),
        )
    }

    /// Scalar Ornstein-Uhlenbeck model `a = -0.8`, fully observed.
    pub fn ou1<T: Real>() -> Result<ModelSpec<T>> {
        build_linear_model(
            DMatrix::from_element(1, 1, T::c(-0.8)),
            DMatrix::from_element(1, 1, T::one()),
            DMatrix::from_element(1, 1, T::one()),
            DMatrix::from_element(1, 1, T::one()),
            DVector::from_element(1, T::c(0.1)),
            DMatrix::from_element(1, 1, T::c(0.05)),
        )
    }

    /// Two-parameter linear family in dimension `d` (`A = θ1 Id`, `Q^{1/2} = θ2 Q`).
    pub fn linear_family<T: Real>(c: DMatrix<T>) -> LinearFamily<T> {
        let d = c.ncols();
        LinearFamily {
            r_sqrt: DMatrix::identity(c.nrows(), c.nrows()) * T::c(0.556),
            m0: DVector::from_element(d, T::c(4.0)),
            p0: DMatrix::identity(d, d),
            q_sqrt: tridiagonal(d, T::one(), T::c(0.5)),
            noise_shape: Some(tridiagonal(d, T::one(), T::c(0.5))),
            c,
        }
    }

    /// Scalar linear family estimating only the drift coefficient.
    pub fn scalar_drift_family<T: Real>() -> LinearFamily<T> {
        LinearFamily {
            c: DMatrix::from_element(1, 1, T::one()),
            r_sqrt: DMatrix::from_element(1, 1, T::c(0.556)),
            m0: DVector::from_element(1, T::c(4.0)),
            p0: DMatrix::from_element(1, 1, T::one()),
            q_sqrt: DMatrix::from_element(1, 1, T::one()),
            noise_shape: None,
        }
    }

    pub fn lorenz63_family<T: Real>(r2: usize) -> Lorenz63Family<T> {
        let (c, r_sqrt) = lorenz63_observation_operators(r2);
        Lorenz63Family {
            c,
            q_sqrt: DMatrix::identity(3, 3),
            r_sqrt,
            m0: DVector::from_element(3, T::one()),
            p0: DMatrix::identity(3, 3) * T::c(0.5),
        }
    }

    /// Lorenz 96 family. With `spread_initial` the initial law is
    /// `N(8·1, 0.05 Id)`; otherwise the point mass at `(8.01, 8, ..., 8)`.
    pub fn lorenz96_family<T: Real>(dx: usize, spread_initial: bool) -> Lorenz96Family<T> {
        let (m0, p0) = if spread_initial {
            (
                DVector::from_element(dx, T::c(8.0)),
                DMatrix::identity(dx, dx) * T::c(0.05),
            )
        } else {
            let mut m0 = DVector::from_element(dx, T::c(8.0));
            m0[0] = T::c(8.01);
            (m0, DMatrix::zeros(dx, dx))
        };
        Lorenz96Family {
            c: DMatrix::identity(dx, dx),
            q_sqrt: DMatrix::identity(dx, dx) * Float::sqrt(T::c(2.0)),
            r_sqrt: DMatrix::identity(dx, dx) * T::c(0.5),
            m0,
            p0,
        }
    }
}
