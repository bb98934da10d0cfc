//! Per-gap sensitivity filters `ψ_k(x, z)` sampled on regular grids.
//!
//! A synthesized filter is `ψ̃_k(x, z) = -∇f_N(x, z) · ∇f_N(x - k, z)`, with the
//! transmitting electrode at `x = 0` and the receiver at `x = k` (pitch units).
//! Conditioning truncates everything below the object bottom and rescales so
//! the largest sample is exactly 1.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::greenfn::{GreenCoefficients, GreenError, GreenPoint};
use crate::Real;

pub const WEIGHT_MAGIC: &[u8; 4] = b"ECTW";
pub const WEIGHT_VERSION: u16 = 1;

/// Default truncation height: the object bottom one pitch above the electrodes.
pub const DEFAULT_Z_CUT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("gap {gap} outside 1..={max} for a system of order {order}")]
    InvalidGap { gap: u32, max: usize, order: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("truncation height must be finite and nonnegative, got {0}")]
    InvalidCut(f64),
    #[error("weight is identically zero above z = {z_cut}")]
    Degenerate { z_cut: f64 },
    #[error("weight has no positive sample above z = {z_cut} (largest is {max}); cannot normalize to max 1")]
    NoPositiveLobe { z_cut: f64, max: f64 },
    #[error("refusing to save an unconditioned weight (max sample {0}, expected 1)")]
    NotConditioned(f64),
    #[error(transparent)]
    Green(#[from] GreenError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Sampling layout for synthesized filters, in pitch units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightGridSpec<T> {
    /// Extra extent on each side: `x ∈ [-margin, k + margin]`.
    pub margin: T,
    /// Height of the first sample row; must be positive.
    pub z_min: T,
    pub z_max: T,
    pub dx: T,
    pub dz: T,
}

impl<T: Real> Default for WeightGridSpec<T> {
    fn default() -> Self {
        Self { margin: T::lit(4.0), z_min: T::lit(0.05), z_max: T::lit(8.0), dx: T::lit(0.05), dz: T::lit(0.05) }
    }
}

impl<T: Real> WeightGridSpec<T> {
    pub fn validate(&self) -> Result<(), WeightError> {
        let bad = |what: &str| Err(WeightError::InvalidGrid(what.to_string()));
        if !(self.dx > T::zero() && self.dz > T::zero()) {
            return bad("sample spacing must be positive");
        }
        if !(self.z_min > T::zero()) {
            return bad("grid intersects z <= 0, where the electrode plane is singular");
        }
        if !(self.z_max >= self.z_min) || !(self.margin >= T::zero()) {
            return bad("empty extent");
        }
        Ok(())
    }
}

/// A sampled filter. Sample `(ix, iz)` sits at
/// `(x_origin + ix·dx, z_origin + iz·dz)` and is stored at `iz·nx + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid<T> {
    pub gap: u32,
    pub nx: usize,
    pub nz: usize,
    pub dx: T,
    pub dz: T,
    pub x_origin: T,
    pub z_origin: T,
    pub values: Vec<T>,
    /// Divisor applied by conditioning: `raw = values · scale`.
    pub scale: T,
    pub z_cut: T,
}

impl<T: Real> WeightGrid<T> {
    pub fn x(&self, ix: usize) -> T {
        self.x_origin + T::from_usize_lossy(ix) * self.dx
    }

    pub fn z(&self, iz: usize) -> T {
        self.z_origin + T::from_usize_lossy(iz) * self.dz
    }

    pub fn get(&self, ix: usize, iz: usize) -> T {
        self.values[iz * self.nx + ix]
    }

    pub fn row(&self, iz: usize) -> &[T] {
        &self.values[iz * self.nx..(iz + 1) * self.nx]
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    /// Converts to another scalar type (used when loading f32 payloads).
    pub fn cast<U: Real>(&self) -> WeightGrid<U> {
        let c = |v: T| U::lit(v.as_f64());
        WeightGrid {
            gap: self.gap,
            nx: self.nx,
            nz: self.nz,
            dx: c(self.dx),
            dz: c(self.dz),
            x_origin: c(self.x_origin),
            z_origin: c(self.z_origin),
            values: self.values.iter().map(|&v| c(v)).collect(),
            scale: c(self.scale),
            z_cut: c(self.z_cut),
        }
    }

    /// Largest `|w(x, z) − w(k − x, z)|` over the grid, for grids laid out
    /// symmetrically about the gap midpoint.
    pub fn mirror_asymmetry(&self) -> T {
        (0..self.nz)
            .flat_map(|iz| (0..self.nx).map(move |ix| (ix, iz)))
            .map(|(ix, iz)| (self.get(ix, iz) - self.get(self.nx - 1 - ix, iz)).abs())
            .fold(T::zero(), T::max)
    }
}

/// Samples `ψ̃_k` on the grid described by `spec`, unconditioned.
///
/// The x samples are laid out symmetrically about `k/2`, so sample `ix` and
/// `nx-1-ix` are exact mirror images.
pub fn synthesize_weight<T: Real>(
    c: &GreenCoefficients<T>,
    gap: u32,
    spec: &WeightGridSpec<T>,
) -> Result<WeightGrid<T>, WeightError> {
    let order = c.order();
    if gap == 0 || gap as usize >= order {
        return Err(WeightError::InvalidGap { gap, max: order.saturating_sub(1), order });
    }
    spec.validate()?;

    let k = T::from_u32(gap).unwrap();
    let half_span = (k + spec.margin + spec.margin) / spec.dx;
    let steps = half_span.round().to_usize().unwrap();
    let nx = steps + 1;
    let nz = ((spec.z_max - spec.z_min) / spec.dz).round().to_usize().unwrap() + 1;
    let centre = T::from_usize_lossy(steps) / T::lit(2.0);
    let mid = k / T::lit(2.0);
    // Offsets from the midpoint are exactly antisymmetric, so the mirror of
    // (mid + δ, δ - mid) is (-(δ - mid), -(mid + δ)) bit for bit.
    let delta = |ix: usize| (T::from_usize_lossy(ix) - centre) * spec.dx;
    let x_origin = mid + delta(0);

    let rows: Result<Vec<Vec<T>>, GreenError> = (0..nz)
        .into_par_iter()
        .map(|iz| {
            let z = spec.z_min + T::from_usize_lossy(iz) * spec.dz;
            (0..nx)
                .map(|ix| {
                    let dl = delta(ix);
                    let (a1, a2) = c.gradient(GreenPoint::new(mid + dl, z))?;
                    let (b1, b2) = c.gradient(GreenPoint::new(dl - mid, z))?;
                    Ok(-(a1 * b1 + a2 * b2))
                })
                .collect()
        })
        .collect();

    Ok(WeightGrid {
        gap,
        nx,
        nz,
        dx: spec.dx,
        dz: spec.dz,
        x_origin,
        z_origin: spec.z_min,
        values: rows?.concat(),
        scale: T::one(),
        z_cut: T::zero(),
    })
}

/// Zeroes samples below `z_cut` and rescales so the maximum is exactly 1.
pub fn condition_weight<T: Real>(w: &WeightGrid<T>, z_cut: T) -> Result<WeightGrid<T>, WeightError> {
    if !(z_cut >= T::zero()) || !z_cut.is_finite() {
        return Err(WeightError::InvalidCut(z_cut.as_f64()));
    }
    let mut out = w.clone();
    for iz in 0..out.nz {
        if out.z(iz) < z_cut {
            out.values[iz * out.nx..(iz + 1) * out.nx].fill(T::zero());
        }
    }
    let cut = z_cut.max(w.z_cut);
    if out.values.iter().all(|v| *v == T::zero()) {
        return Err(WeightError::Degenerate { z_cut: cut.as_f64() });
    }
    let max = out.max_value();
    if !(max > T::zero()) {
        return Err(WeightError::NoPositiveLobe { z_cut: cut.as_f64(), max: max.as_f64() });
    }
    for v in &mut out.values {
        *v = *v / max;
    }
    out.scale = w.scale * max;
    out.z_cut = cut;
    Ok(out)
}

/// Per-row sensitivity mass of a filter.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProfile<T> {
    pub z: Vec<T>,
    /// `Σ_x |w(x, z)| dx`
    pub mass: Vec<T>,
    /// `Σ_x max(w, 0) dx`
    pub positive: Vec<T>,
    /// `Σ_x max(-w, 0) dx`
    pub negative: Vec<T>,
}

impl<T: Real> DepthProfile<T> {
    fn centroid(&self, mass: &[T]) -> Option<T> {
        let total: T = mass.iter().copied().sum();
        if total > T::zero() {
            Some(self.z.iter().zip(mass).map(|(&z, &m)| z * m).sum::<T>() / total)
        } else {
            None
        }
    }

    /// `z̄ = Σ z·mass / Σ mass`, or `None` for an all-zero filter.
    pub fn barycenter(&self) -> Option<T> {
        self.centroid(&self.mass)
    }

    /// Barycenter of the positive lobe only.
    pub fn positive_barycenter(&self) -> Option<T> {
        self.centroid(&self.positive)
    }

    pub fn negative_barycenter(&self) -> Option<T> {
        self.centroid(&self.negative)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.z.iter().copied().zip(self.mass.iter().copied())
    }
}

pub fn depth_profile<T: Real>(w: &WeightGrid<T>) -> DepthProfile<T> {
    let mut p = DepthProfile {
        z: Vec::with_capacity(w.nz),
        mass: Vec::with_capacity(w.nz),
        positive: Vec::with_capacity(w.nz),
        negative: Vec::with_capacity(w.nz),
    };
    for iz in 0..w.nz {
        let row = w.row(iz);
        p.z.push(w.z(iz));
        p.mass.push(row.iter().map(|v| v.abs()).sum::<T>() * w.dx);
        p.positive.push(row.iter().map(|&v| v.max(T::zero())).sum::<T>() * w.dx);
        p.negative.push(row.iter().map(|&v| (-v).max(T::zero())).sum::<T>() * w.dx);
    }
    p
}

/// Serializes a conditioned grid to the ECTW layout.
pub fn encode_weight<T: Real>(w: &WeightGrid<T>) -> Result<Vec<u8>, WeightError> {
    let max = w.max_value();
    if max.as_f32() != 1.0 {
        return Err(WeightError::NotConditioned(max.as_f64()));
    }
    let dim = |n: usize| u32::try_from(n).map_err(|_| FormatError::Invalid(format!("dimension {n} exceeds u32")));
    let mut out = Writer::new();
    out.bytes(WEIGHT_MAGIC)
        .u16(WEIGHT_VERSION)
        .u32(w.gap)
        .u32(dim(w.nx)?)
        .u32(dim(w.nz)?)
        .f64(w.dx.as_f64())
        .f64(w.dz.as_f64())
        .f64(w.x_origin.as_f64())
        .f64(w.z_origin.as_f64())
        .f64(w.scale.as_f64())
        .f64(w.z_cut.as_f64())
        .f32s(w.values.iter().map(|v| v.as_f32()));
    Ok(out.finish())
}

/// Parses an ECTW byte stream. Symmetry is not enforced, so externally
/// computed (e.g. finite-element) filters load unchanged.
pub fn decode_weight<T: Real>(bytes: &[u8]) -> Result<WeightGrid<T>, WeightError> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHT_MAGIC)?;
    r.version(WEIGHT_VERSION)?;
    let gap = r.u32()?;
    let nx = r.u32()? as usize;
    let nz = r.u32()? as usize;
    let mut hdr = [0.0f64; 6];
    for h in &mut hdr {
        *h = r.f64()?;
    }
    let [dx, dz, x_origin, z_origin, scale, z_cut] = hdr;
    if gap == 0 || nx == 0 || nz == 0 {
        return Err(FormatError::Invalid(format!("gap {gap}, nx {nx}, nz {nz}")).into());
    }
    if !(dx > 0.0 && dz > 0.0 && scale > 0.0) || hdr.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::Invalid("non-positive spacing or scale".into()).into());
    }
    let count = nx.checked_mul(nz).ok_or_else(|| FormatError::Invalid("grid size overflows".into()))?;
    let values = r.f32s(count)?;
    r.finish()?;
    Ok(WeightGrid {
        gap,
        nx,
        nz,
        dx: T::lit(dx),
        dz: T::lit(dz),
        x_origin: T::lit(x_origin),
        z_origin: T::lit(z_origin),
        values: values.into_iter().map(|v| T::lit(v as f64)).collect(),
        scale: T::lit(scale),
        z_cut: T::lit(z_cut),
    })
}

pub fn save_weight<T: Real>(w: &WeightGrid<T>, path: impl AsRef<Path>) -> Result<(), WeightError> {
    std::fs::write(path, encode_weight(w)?).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_weight<T: Real>(path: impl AsRef<Path>) -> Result<WeightGrid<T>, WeightError> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    decode_weight(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greenfn::{DEFAULT_EPS0, DEFAULT_ORDER};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn coeffs() -> &'static GreenCoefficients<f64> {
        static C: OnceLock<GreenCoefficients<f64>> = OnceLock::new();
        C.get_or_init(|| GreenCoefficients::new(DEFAULT_ORDER, DEFAULT_EPS0).unwrap())
    }

    fn raw(k: u32) -> WeightGrid<f64> {
        synthesize_weight(coeffs(), k, &WeightGridSpec::default()).unwrap()
    }

    fn tiny(values: Vec<f64>, nx: usize) -> WeightGrid<f64> {
        let nz = values.len() / nx;
        WeightGrid { gap: 1, nx, nz, dx: 0.5, dz: 0.5, x_origin: -1.0, z_origin: 0.5, values, scale: 1.0, z_cut: 0.0 }
    }

    #[test]
    fn default_layout() {
        let w = raw(2);
        assert_eq!(w.nx, 201);
        assert_eq!(w.nz, 160);
        assert!((w.x(0) + 4.0).abs() < 1e-12);
        assert!((w.x(w.nx - 1) - 6.0).abs() < 1e-12);
        assert!((w.z(w.nz - 1) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn synthesized_weights_are_mirror_symmetric() {
        for k in 1..=4 {
            let w = raw(k);
            let peak = w.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(w.mirror_asymmetry() <= 1e-12 * peak, "k={k}");
            assert_eq!(condition_weight(&w, 0.8).unwrap().mirror_asymmetry(), 0.0);
        }
    }

    #[test]
    fn nearest_gap_takes_both_signs() {
        let w = raw(1);
        assert!(w.max_value() > 0.0);
        assert!(w.min_value() < 0.0);
    }

    #[test]
    fn decays_far_above_the_array() {
        let spec = WeightGridSpec { z_max: 10.0, ..WeightGridSpec::default() };
        let w = synthesize_weight(coeffs(), 2, &spec).unwrap();
        let peak = w.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for iz in (0..w.nz).filter(|&iz| w.z(iz) > 8.0) {
            for v in w.row(iz) {
                assert!(v.abs() < 1e-6 * peak);
            }
        }
    }

    #[test]
    fn invalid_requests() {
        assert!(matches!(
            synthesize_weight(coeffs(), 0, &WeightGridSpec::default()),
            Err(WeightError::InvalidGap { .. })
        ));
        assert!(matches!(
            synthesize_weight(coeffs(), 16, &WeightGridSpec::default()),
            Err(WeightError::InvalidGap { .. })
        ));
        let spec = WeightGridSpec { z_min: 0.0, ..WeightGridSpec::default() };
        assert!(matches!(synthesize_weight(coeffs(), 1, &spec), Err(WeightError::InvalidGrid(_))));
        assert!(matches!(condition_weight(&raw(1), -1.0), Err(WeightError::InvalidCut(_))));
    }

    #[test]
    fn condition_identity_on_normalized_grid() {
        let w = tiny(vec![0.25, 1.0, -0.5, 0.0, 0.75, 0.5], 3);
        let c = condition_weight(&w, 0.0).unwrap();
        assert_eq!(c, w);
    }

    #[test]
    fn condition_truncates_and_normalizes() {
        let w = condition_weight(&raw(3), 1.0).unwrap();
        assert_eq!(w.max_value(), 1.0);
        assert!(w.scale > 0.0);
        assert_eq!(w.z_cut, 1.0);
        for iz in 0..w.nz {
            if w.z(iz) < 1.0 {
                assert!(w.row(iz).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn condition_scale_tracks_input_amplitude() {
        let w = raw(2);
        let mut doubled = w.clone();
        doubled.values.iter_mut().for_each(|v| *v *= 2.0);
        let a = condition_weight(&w, 1.0).unwrap();
        let b = condition_weight(&doubled, 1.0).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(b.scale, 2.0 * a.scale);
    }

    #[test]
    fn degenerate_conditioning() {
        let w = tiny(vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0], 3);
        assert!(matches!(condition_weight(&w, 1.0), Err(WeightError::Degenerate { .. })));
        let neg = tiny(vec![1.0, 2.0, 0.0, -1.0, -3.0, 0.0], 3);
        assert!(matches!(condition_weight(&neg, 1.0), Err(WeightError::NoPositiveLobe { .. })));
    }

    #[test]
    fn profile_basics() {
        // rows at z = 0.5 (zero) and z = 1.0 (one sample)
        let w = tiny(vec![0.0, 0.0, 0.0, 0.0, -0.5, 0.0], 3);
        let p = depth_profile(&w);
        assert_eq!(p.mass, vec![0.0, 0.25]);
        assert_eq!(p.barycenter(), Some(1.0));
        assert_eq!(p.positive_barycenter(), None);
        assert_eq!(p.negative_barycenter(), Some(1.0));
        let pairs: Vec<_> = p.pairs().collect();
        assert_eq!(pairs, vec![(0.5, 0.0), (1.0, 0.25)]);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let w = condition_weight(&raw(2), 1.0).unwrap().cast::<f32>();
        let bytes = encode_weight(&w).unwrap();
        assert_eq!(&bytes[..4], b"ECTW");
        let back: WeightGrid<f32> = decode_weight(&bytes).unwrap();
        assert_eq!(back, w);

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_weight::<f32>(cut), Err(WeightError::Format(FormatError::Truncated { .. }))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weight::<f32>(&bad), Err(WeightError::Format(FormatError::BadMagic { .. }))));
        bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_weight::<f32>(&bad), Err(WeightError::Format(FormatError::UnsupportedVersion { .. }))));
        assert!(matches!(encode_weight(&raw(2)), Err(WeightError::NotConditioned(_))));
    }

    #[test]
    fn asymmetric_external_grid_loads_as_is() {
        let w = tiny(vec![0.1, 1.0, 0.3, -0.2, 0.0, 0.6], 3);
        let bytes = encode_weight(&w).unwrap();
        let back: WeightGrid<f64> = decode_weight(&bytes).unwrap();
        assert!(back.mirror_asymmetry() > 0.1);
        assert_eq!(encode_weight(&back).unwrap(), bytes);
    }

    proptest! {
        #[test]
        fn conditioning_is_idempotent(cut in 0.0f64..0.8, k in 1u32..=4) {
            let once = condition_weight(&raw(k), cut).unwrap();
            let twice = condition_weight(&once, cut).unwrap();
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(once.max_value(), 1.0);
        }
    }
}
