//! Synthetic coplanar capacitive imaging: electrode sensitivity weights from a
//! periodic Green's function, a weighted-Radon forward model over 3D
//! permittivity phantoms, and depth-layered filtered backprojection.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar for the common cases.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binio;
pub mod forward;
pub mod greenfn;
pub mod linalg;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod render;
mod scalar;
pub mod weights;

pub use scalar::Real;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Green(#[from] greenfn::GreenError),
    #[error(transparent)]
    Weight(#[from] weights::WeightError),
    #[error(transparent)]
    Phantom(#[from] phantom::PhantomError),
    #[error(transparent)]
    Forward(#[from] forward::ForwardError),
    #[error(transparent)]
    Recon(#[from] recon::ReconError),
    #[error(transparent)]
    Format(#[from] binio::FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type GreenCoefficientsF64 = greenfn::GreenCoefficients<f64>;
pub type GreenCoefficientsF32 = greenfn::GreenCoefficients<f32>;
pub type WeightGridF64 = weights::WeightGrid<f64>;
pub type WeightGridF32 = weights::WeightGrid<f32>;
pub type PhantomSpecF64 = phantom::PhantomSpec<f64>;
pub type PhantomSpecF32 = phantom::PhantomSpec<f32>;
pub type VoxelGridF64 = phantom::VoxelGrid<f64>;
pub type VoxelGridF32 = phantom::VoxelGrid<f32>;
pub type SensorGeometryF64 = forward::SensorGeometry<f64>;
pub type SensorGeometryF32 = forward::SensorGeometry<f32>;
pub type SinogramSetF64 = forward::SinogramSet<f64>;
pub type SinogramSetF32 = forward::SinogramSet<f32>;
pub type LayerF64 = recon::Layer<f64>;
pub type LayerF32 = recon::Layer<f32>;
