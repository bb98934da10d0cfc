//! Periodic electrostatic Green's function of a unit-pitch line array, and the
//! single-electrode potential `f_N` built from dilated copies of it.
//!
//! All coordinates are dimensionless, in units of the electrode pitch. The
//! kernel is
//!
//! ```text
//! G(x1, x2) = -1/(4π) · ln(sinh²(π x2) + sin²(π x1)) + |x2| / 2
//! ```
//!
//! which is even and 1-periodic in `x1`, harmonic away from the lattice
//! `(n, 0)`, and tends to `ln 2 / (2π)` as `|x2| → ∞`.
//!
//! `f_N(x) = Σ_k α_k G(x1/(k+1), x2/(k+1))` with the `α_k` chosen so that
//! `f_N(0, ε0) = 1` and `f_N(n, ε0) = 0` for `n = 1..=N`.

use thiserror::Error;

use crate::linalg::{self, SingularPivot};
use crate::Real;

/// Default system order.
pub const DEFAULT_ORDER: usize = 16;
/// Default electrode height parameter, a tenth of the pitch.
pub const DEFAULT_EPS0: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GreenError {
    #[error("Green's function is singular at lattice point ({x1}, {x2})")]
    Singular { x1: f64, x2: f64 },
    #[error("gradient undefined on the x2 = 0 line (x1 = {x1})")]
    NotDifferentiable { x1: f64 },
    #[error("non-finite coordinate ({x1}, {x2})")]
    NonFinite { x1: f64, x2: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("interpolation matrix is singular: pivot {} in column {}", .0.pivot, .0.column)]
    SingularMatrix(SingularPivot),
}

/// A point in pitch units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreenPoint<T> {
    pub x1: T,
    pub x2: T,
}

impl<T: Real> GreenPoint<T> {
    pub fn new(x1: T, x2: T) -> Self {
        Self { x1, x2 }
    }

    fn check(self) -> Result<Reduced<T>, GreenError> {
        if !self.x1.is_finite() || !self.x2.is_finite() {
            return Err(GreenError::NonFinite { x1: self.x1.as_f64(), x2: self.x2.as_f64() });
        }
        // x1 folded into [-1/2, 1/2]; exact for binary fractions.
        let frac = self.x1 - self.x1.round();
        if self.x2 == T::zero() && frac == T::zero() {
            return Err(GreenError::Singular { x1: self.x1.as_f64(), x2: self.x2.as_f64() });
        }
        Ok(Reduced { frac, a: T::PI() * self.x2.abs() })
    }
}

struct Reduced<T> {
    /// `x1` folded into one period.
    frac: T,
    /// `π |x2|`
    a: T,
}

impl<T: Real> Reduced<T> {
    /// `Q = 4 e^{-2a} (sinh²a + sin²b) = (1 - e^{-2a})² + 4 e^{-2a} sin²b`.
    fn q_terms(&self) -> (T, T) {
        let q = (-(self.a + self.a)).exp();
        let s = (T::PI() * self.frac).sin();
        let em = (-(self.a + self.a)).exp_m1();
        (q, em * em + T::lit(4.0) * q * s * s)
    }
}

/// `ln 2 / (2π)`, the value of `G` far above the array.
pub fn far_field_limit<T: Real>() -> T {
    T::LN_2() / (T::lit(2.0) * T::PI())
}

/// `G(x1, x2)`.
pub fn eval_green<T: Real>(pt: GreenPoint<T>) -> Result<T, GreenError> {
    let r = pt.check()?;
    if r.a < T::one() {
        let (_, big_q) = r.q_terms();
        Ok(-(big_q / T::lit(4.0)).ln() / (T::lit(4.0) * T::PI()))
    } else {
        Ok(far_field_limit::<T>() + far_deviation(&r))
    }
}

/// `G(x1, x2) − ln 2 / (2π)`, accurate to full relative precision far from
/// the array where `G` itself has cancelled down to its limit.
pub fn green_deviation<T: Real>(pt: GreenPoint<T>) -> Result<T, GreenError> {
    let r = pt.check()?;
    if r.a < T::one() {
        let (_, big_q) = r.q_terms();
        Ok(-(big_q / T::lit(4.0)).ln() / (T::lit(4.0) * T::PI()) - far_field_limit::<T>())
    } else {
        Ok(far_deviation(&r))
    }
}

// -(1/4π) ln|1 - e^{-2a} e^{2πi x1}|²
fn far_deviation<T: Real>(r: &Reduced<T>) -> T {
    let q = (-(r.a + r.a)).exp();
    let c = (T::lit(2.0) * T::PI() * r.frac).cos();
    -(q * (q - T::lit(2.0) * c)).ln_1p() / (T::lit(4.0) * T::PI())
}

/// `(∂G/∂x1, ∂G/∂x2)`; undefined on `x2 = 0`, where `|x2|/2` has a kink.
pub fn eval_green_gradient<T: Real>(pt: GreenPoint<T>) -> Result<(T, T), GreenError> {
    let r = pt.check()?;
    if pt.x2 == T::zero() {
        return Err(GreenError::NotDifferentiable { x1: pt.x1.as_f64() });
    }
    let (q, big_q) = r.q_terms();
    let two_b = T::lit(2.0) * T::PI() * r.frac;
    let d1 = -q * two_b.sin() / big_q;
    let d2 = q * (q - two_b.cos()) / big_q;
    Ok((d1, if pt.x2 < T::zero() { -d2 } else { d2 }))
}

/// Interpolation system `M α = e_1` with `M[i][j] = G((i−1)/j, ε0/j)`, 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationSystem<T> {
    pub order: usize,
    pub eps0: T,
    /// Row-major `(order+1)²` entries.
    pub matrix: Vec<T>,
    pub rhs: Vec<T>,
}

impl<T: Real> InterpolationSystem<T> {
    pub fn dim(&self) -> usize {
        self.order + 1
    }

    pub fn entry(&self, i: usize, j: usize) -> T {
        self.matrix[i * self.dim() + j]
    }
}

pub fn build_system<T: Real>(order: usize, eps0: T) -> Result<InterpolationSystem<T>, GreenError> {
    if !(eps0 > T::zero()) || !eps0.is_finite() {
        return Err(GreenError::InvalidParameter(format!("eps0 must be positive, got {eps0}")));
    }
    let dim = order + 1;
    let mut matrix = Vec::with_capacity(dim * dim);
    for i in 1..=dim {
        for j in 1..=dim {
            let scale = T::from_usize_lossy(j);
            let x1 = T::from_usize_lossy(i - 1) / scale;
            matrix.push(eval_green(GreenPoint::new(x1, eps0 / scale))?);
        }
    }
    let mut rhs = vec![T::zero(); dim];
    rhs[0] = T::one();
    Ok(InterpolationSystem { order, eps0, matrix, rhs })
}

/// Solved coefficients `α_0..α_N` of `f_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenCoefficients<T> {
    order: usize,
    eps0: T,
    alpha: Vec<T>,
    residual: T,
}

/// Value and gradient of `f_N` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Potential<T> {
    pub value: T,
    pub gradient: (T, T),
}

pub fn solve_coefficients<T: Real>(system: &InterpolationSystem<T>) -> Result<GreenCoefficients<T>, GreenError> {
    let dim = system.dim();
    let alpha = linalg::solve_dense(&system.matrix, dim, &system.rhs).map_err(GreenError::SingularMatrix)?;
    let residual = linalg::residual_max(&system.matrix, dim, &alpha, &system.rhs);
    Ok(GreenCoefficients { order: system.order, eps0: system.eps0, alpha, residual })
}

impl<T: Real> GreenCoefficients<T> {
    /// Builds and solves the system of the given order.
    pub fn new(order: usize, eps0: T) -> Result<Self, GreenError> {
        solve_coefficients(&build_system(order, eps0)?)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn eps0(&self) -> T {
        self.eps0
    }

    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    /// Max-norm residual of the solve, as stored at construction.
    pub fn residual(&self) -> T {
        self.residual
    }

    pub fn value(&self, pt: GreenPoint<T>) -> Result<T, GreenError> {
        self.alpha.iter().enumerate().try_fold(T::zero(), |acc, (k, &a)| {
            let s = T::from_usize_lossy(k + 1);
            Ok(acc + a * eval_green(GreenPoint::new(pt.x1 / s, pt.x2 / s))?)
        })
    }

    pub fn gradient(&self, pt: GreenPoint<T>) -> Result<(T, T), GreenError> {
        self.alpha.iter().enumerate().try_fold((T::zero(), T::zero()), |acc, (k, &a)| {
            let s = T::from_usize_lossy(k + 1);
            let (g1, g2) = eval_green_gradient(GreenPoint::new(pt.x1 / s, pt.x2 / s))?;
            Ok((acc.0 + a * g1 / s, acc.1 + a * g2 / s))
        })
    }
}

/// `f_N` and `∇f_N` at `pt`.
pub fn eval_potential<T: Real>(c: &GreenCoefficients<T>, pt: GreenPoint<T>) -> Result<Potential<T>, GreenError> {
    Ok(Potential { value: c.value(pt)?, gradient: c.gradient(pt)? })
}
