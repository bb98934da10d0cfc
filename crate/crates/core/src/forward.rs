//! Rotating-sensor measurement sweep: weighted planar Radon transform of the
//! permittivity excess, one sinogram per electrode gap.
//!
//! Sensor axes at angle `θ`: `û = (cos θ, sin θ)` runs along the electrode
//! row, `v̂ = (−sin θ, cos θ)` along the electrodes. A reading for gap `k` at
//! electrode offset `a_i` is
//!
//! `H = Σ_{x,z} ψ_k(x, z) · P_θ(a_i + x·d, z·d) · (Δx·d)(Δz·d)`
//!
//! where `P_θ(s, z) = ∫ (ε_r(s·û + t·v̂, z) − 1) dt` and the weight grid
//! coordinates are in pitch units with the transmitter at `x = 0`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{sha256_hex, FormatError, Reader, Writer};
use crate::phantom::{Line, PermittivityField, PhantomSpec, VoxelGrid};
use crate::weights::{encode_weight, WeightGrid};
use crate::Real;

pub const SINOGRAM_MAGIC: &[u8; 4] = b"ECTS";
pub const SINOGRAM_VERSION: u16 = 1;
pub const MAX_GAP: u32 = 4;
/// Number of quantization levels over the largest reading.
pub const QUANT_LEVELS: f64 = 140.0;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("phantom reaches radius {radius} mm, outside the scan circle of radius {limit} mm")]
    OutsideScanCircle { radius: f64, limit: f64 },
    #[error("phantom bottom z = {bottom} mm lies below the standoff {standoff} mm")]
    BelowStandoff { bottom: f64, standoff: f64 },
    #[error("no weight grid supplied for gap {0}")]
    MissingWeight(u32),
    #[error("weight for gap {gap} is not conditioned (max {max})")]
    NotConditioned { gap: u32, max: f64 },
    #[error("weight for gap {gap} is truncated at {z_cut} mm but the object bottom is at {standoff} mm")]
    CutMismatch { gap: u32, z_cut: f64, standoff: f64 },
    #[error("quantization step must be finite and nonnegative, got {0}")]
    InvalidDelta(f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorGeometry<T> {
    /// Half-count: the array has `2n + 1` electrodes.
    pub n: usize,
    /// Electrode pitch `d` in mm.
    pub pitch: T,
    /// Number of angular steps over `[0, π)`.
    pub angles: usize,
    /// Height of the object bottom above the electrode plane, mm.
    pub standoff: T,
    pub gaps: Vec<u32>,
    /// Quantization step applied to the readings; 0 means none.
    pub quant_delta: T,
}

impl<T: Real> SensorGeometry<T> {
    pub fn new(n: usize, pitch: T, angles: usize, standoff: T, gaps: Vec<u32>) -> Result<Self, ForwardError> {
        let g = Self { n, pitch, angles, standoff, gaps, quant_delta: T::zero() };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ForwardError> {
        let bad = |m: String| Err(ForwardError::InvalidGeometry(m));
        if self.n < 4 {
            return bad(format!("n = {} (need at least 4)", self.n));
        }
        if self.angles == 0 {
            return bad("angle count must be positive".into());
        }
        if !(self.pitch > T::zero()) || !self.pitch.is_finite() {
            return bad(format!("pitch {}", self.pitch));
        }
        if !(self.standoff >= T::zero()) || !self.standoff.is_finite() {
            return bad(format!("standoff {}", self.standoff));
        }
        if !(self.quant_delta >= T::zero()) || !self.quant_delta.is_finite() {
            return bad(format!("quantization step {}", self.quant_delta));
        }
        if self.gaps.is_empty() {
            return bad("no gaps".into());
        }
        for (i, &k) in self.gaps.iter().enumerate() {
            if k == 0 || k > MAX_GAP {
                return bad(format!("gap {k} outside 1..={MAX_GAP}"));
            }
            if self.gaps[..i].contains(&k) {
                return bad(format!("gap {k} listed twice"));
            }
        }
        Ok(())
    }

    pub fn electrodes(&self) -> usize {
        2 * self.n + 1
    }

    pub fn detectors(&self, gap: u32) -> usize {
        self.electrodes() - gap as usize
    }

    pub fn angle(&self, j: usize) -> T {
        T::PI() * T::from_usize_lossy(j) / T::from_usize_lossy(self.angles)
    }

    /// Offset `a_i = (i − n)·d` of transmitter `i` (0-based).
    pub fn offset(&self, i: usize) -> T {
        (T::from_usize_lossy(i) - T::from_usize_lossy(self.n)) * self.pitch
    }

    pub fn scan_radius(&self) -> T {
        T::from_usize_lossy(self.n) * self.pitch
    }
}

/// Readings for one gap: `angles × detectors`, detector fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GapSinogram<T> {
    pub gap: u32,
    pub detectors: usize,
    pub values: Vec<T>,
}

impl<T: Real> GapSinogram<T> {
    pub fn row(&self, j: usize) -> &[T] {
        &self.values[j * self.detectors..(j + 1) * self.detectors]
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.detectors
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinogramSet<T> {
    pub geometry: SensorGeometry<T>,
    pub angles: Vec<T>,
    pub data: Vec<GapSinogram<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Real> SinogramSet<T> {
    pub fn gap(&self, k: u32) -> Option<&GapSinogram<T>> {
        self.data.iter().find(|g| g.gap == k)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().flat_map(|g| g.values.iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Elementwise `a·self + b·other`; geometries must agree.
    pub fn combine(&self, a: T, other: &Self, b: T) -> Self {
        let mut out = self.clone();
        for (g, h) in out.data.iter_mut().zip(&other.data) {
            assert_eq!(g.gap, h.gap, "sinogram sets disagree on gaps");
            for (v, w) in g.values.iter_mut().zip(&h.values) {
                *v = a * *v + b * *w;
            }
        }
        out
    }
}

/// Line integral `P_θ(s, z)` of the permittivity excess, checked against the
/// scan circle. Analytic phantoms are integrated exactly; other fields use the
/// midpoint rule with step `d/4`.
pub fn project_slice<T: Real, F: PermittivityField<T> + ?Sized>(
    field: &F,
    theta: T,
    s: T,
    z: T,
    geom: &SensorGeometry<T>,
) -> Result<T, ForwardError> {
    check_scan_circle(field, geom)?;
    let (sn, cs) = theta.sin_cos();
    Ok(line(field, [cs, sn], s, z, geom.scan_radius(), geom.pitch * T::lit(0.25)))
}

fn line<T: Real, F: PermittivityField<T> + ?Sized>(field: &F, u: [T; 2], s: T, z: T, r: T, step: T) -> T {
    field.line_integral(&Line::new(u, s, z), -r, r, step)
}

fn check_scan_circle<T: Real, F: PermittivityField<T> + ?Sized>(
    field: &F,
    geom: &SensorGeometry<T>,
) -> Result<(), ForwardError> {
    if let Some(b) = field.bounds() {
        let radius = b.max_radius();
        if radius > geom.scan_radius() {
            return Err(ForwardError::OutsideScanCircle {
                radius: radius.as_f64(),
                limit: geom.scan_radius().as_f64(),
            });
        }
    }
    Ok(())
}

/// Stable identifier of a field's contents for sinogram metadata.
pub trait ContentHash {
    fn content_hash(&self) -> String;
}

impl<T: Real> ContentHash for PhantomSpec<T> {
    fn content_hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

impl<T: Real> ContentHash for VoxelGrid<T> {
    fn content_hash(&self) -> String {
        sha256_hex(&self.encode())
    }
}

fn check_weight<T: Real>(w: &WeightGrid<T>, geom: &SensorGeometry<T>) -> Result<(), ForwardError> {
    let max = w.max_value();
    if max != T::one() {
        return Err(ForwardError::NotConditioned { gap: w.gap, max: max.as_f64() });
    }
    let cut = w.z_cut * geom.pitch;
    let tol = T::lit(1e-9) * geom.pitch.max(geom.standoff);
    if (cut - geom.standoff).abs() > tol {
        return Err(ForwardError::CutMismatch { gap: w.gap, z_cut: cut.as_f64(), standoff: geom.standoff.as_f64() });
    }
    Ok(())
}

/// One sinogram row: readings of every transmitter for gap `w.gap` at angle `theta`.
fn sweep_row<T: Real, F: PermittivityField<T> + ?Sized>(
    field: &F,
    w: &WeightGrid<T>,
    geom: &SensorGeometry<T>,
    theta: T,
) -> Vec<T> {
    let d = geom.pitch;
    let n_det = geom.detectors(w.gap);
    let (sn, cs) = theta.sin_cos();
    let radius = geom.scan_radius();
    let step = d * T::lit(0.25);
    let mut out = vec![T::zero(); n_det];
    let Some(b) = field.bounds() else {
        return out;
    };
    // Support of P_θ along s: projection of the bounding box.
    let h = T::lit(0.5);
    let (cx, cy) = ((b.min[0] + b.max[0]) * h, (b.min[1] + b.max[1]) * h);
    let half = ((b.max[0] - b.min[0]) * h).hypot((b.max[1] - b.min[1]) * h);
    let s_mid = cx * cs + cy * sn;
    let (s_lo, s_hi) = (s_mid - half, s_mid + half);
    let proj = |s: T, z: T| {
        if s < s_lo || s > s_hi {
            T::zero()
        } else {
            line(field, [cs, sn], s, z, radius, step)
        }
    };

    // Samples of ψ_k sit on a lattice commensurate with the pitch when 1/dx
    // is an integer, so one table of P per row serves every transmitter.
    // Table entry m sits at s = (m − m0)·dx·d, with m0 snapped to a half
    // integer when the grid is centred on the gap midpoint so that mirrored
    // positions are exact negatives.
    let per_pitch = (T::one() / w.dx).round();
    let lattice = ((T::one() / w.dx) - per_pitch).abs() < T::lit(1e-9) && per_pitch >= T::one();
    let r = per_pitch.to_usize().unwrap_or(0);
    let two = T::lit(2.0);
    let k_half = T::from_u32(w.gap).unwrap() / two;
    let mut m0 = (k_half - w.x_origin) / w.dx + (T::from_usize_lossy(geom.n) - k_half) * per_pitch;
    if ((m0 * two).round() - m0 * two).abs() < T::lit(1e-6) {
        m0 = (m0 * two).round() / two;
    }
    let lattice_step = w.dx * d;
    let mut table = Vec::new();
    let mut acc = vec![T::zero(); n_det];

    for iz in 0..w.nz {
        let row = w.row(iz);
        if row.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let z = w.z(iz) * d;
        if z < b.min[2] || z > b.max[2] {
            continue;
        }
        if lattice {
            let len = w.nx + (n_det - 1) * r;
            table.clear();
            table.extend((0..len).map(|m| proj((T::from_usize_lossy(m) - m0) * lattice_step, z)));
            for (i, a) in acc.iter_mut().enumerate() {
                let seg = &table[i * r..i * r + w.nx];
                *a = row.iter().zip(seg).fold(T::zero(), |s, (&p, &q)| s + p * q);
            }
        } else {
            for (i, a) in acc.iter_mut().enumerate() {
                let ai = geom.offset(i);
                *a = row.iter().enumerate().fold(T::zero(), |s, (ix, &p)| s + p * proj(ai + w.x(ix) * d, z));
            }
        }
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = *o + *a;
        }
    }
    let cell = (w.dx * d) * (w.dz * d);
    out.iter_mut().for_each(|v| *v = *v * cell);
    out
}

/// Simulates the full sweep. Each `(θ, gap)` row is an independent task with a
/// fixed summation order, so results do not depend on the thread count.
pub fn simulate_sweep<T: Real, F: PermittivityField<T> + ContentHash + ?Sized>(
    field: &F,
    weights: &[WeightGrid<T>],
    geom: &SensorGeometry<T>,
) -> Result<SinogramSet<T>, ForwardError> {
    geom.validate()?;
    check_scan_circle(field, geom)?;
    if let Some(b) = field.bounds() {
        if b.min[2] < geom.standoff {
            return Err(ForwardError::BelowStandoff { bottom: b.min[2].as_f64(), standoff: geom.standoff.as_f64() });
        }
    }
    let mut chosen = Vec::with_capacity(geom.gaps.len());
    let mut metadata = BTreeMap::new();
    metadata.insert("phantom_hash".to_string(), field.content_hash());
    for &k in &geom.gaps {
        let w = weights.iter().find(|w| w.gap == k).ok_or(ForwardError::MissingWeight(k))?;
        check_weight(w, geom)?;
        let bytes = encode_weight(w).map_err(|e| FormatError::Invalid(e.to_string()))?;
        metadata.insert(format!("weight_hash_k{k}"), sha256_hex(&bytes));
        chosen.push(w);
    }

    let angles: Vec<T> = (0..geom.angles).map(|j| geom.angle(j)).collect();
    let tasks: Vec<(usize, usize)> = (0..chosen.len()).flat_map(|g| (0..geom.angles).map(move |j| (g, j))).collect();
    let rows: Vec<Vec<T>> = tasks.par_iter().map(|&(g, j)| sweep_row(field, chosen[g], geom, angles[j])).collect();

    let data = chosen
        .iter()
        .enumerate()
        .map(|(g, w)| GapSinogram {
            gap: w.gap,
            detectors: geom.detectors(w.gap),
            values: rows[g * geom.angles..(g + 1) * geom.angles].concat(),
        })
        .collect();
    let mut geometry = geom.clone();
    geometry.quant_delta = T::zero();
    Ok(SinogramSet { geometry, angles, data, metadata })
}

/// `max|v| / 140` over every gap.
pub fn default_quant_delta<T: Real>(set: &SinogramSet<T>) -> T {
    set.max_abs() / T::lit(QUANT_LEVELS)
}

/// Rounds each reading to the nearest multiple of `delta`, halves away from zero.
pub fn quantize<T: Real>(set: &SinogramSet<T>, delta: T) -> Result<SinogramSet<T>, ForwardError> {
    if !(delta >= T::zero()) || !delta.is_finite() {
        return Err(ForwardError::InvalidDelta(delta.as_f64()));
    }
    let mut out = set.clone();
    if delta == T::zero() {
        return Ok(out);
    }
    for g in &mut out.data {
        for v in &mut g.values {
            *v = delta * (*v / delta).round();
        }
    }
    out.geometry.quant_delta = delta;
    Ok(out)
}

pub fn encode_sinogram<T: Real>(set: &SinogramSet<T>) -> Result<Vec<u8>, ForwardError> {
    let g = &set.geometry;
    let mut w = Writer::new();
    w.bytes(SINOGRAM_MAGIC)
        .u16(SINOGRAM_VERSION)
        .u32(g.n as u32)
        .u32(g.angles as u32)
        .f64(g.pitch.as_f64())
        .f64(g.standoff.as_f64())
        .f64(g.quant_delta.as_f64())
        .u16(set.data.len() as u16);
    for gap in &set.data {
        w.u16(gap.gap as u16).f32s(gap.values.iter().map(|v| v.as_f32()));
    }
    let mut meta = String::new();
    for (k, v) in &set.metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(FormatError::Invalid(format!("metadata entry {k:?} cannot be serialized")).into());
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    w.bytes(meta.as_bytes());
    Ok(w.finish())
}

pub fn decode_sinogram<T: Real>(bytes: &[u8]) -> Result<SinogramSet<T>, ForwardError> {
    let mut r = Reader::new(bytes);
    r.magic(SINOGRAM_MAGIC)?;
    r.version(SINOGRAM_VERSION)?;
    let n = r.u32()? as usize;
    let p = r.u32()? as usize;
    let pitch = T::lit(r.f64()?);
    let standoff = T::lit(r.f64()?);
    let quant_delta = T::lit(r.f64()?);
    let count = r.u16()? as usize;
    let mut gaps = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let k = r.u16()? as u32;
        if k == 0 || k as usize > 2 * n {
            return Err(FormatError::Invalid(format!("gap {k} for n = {n}")).into());
        }
        let detectors = 2 * n + 1 - k as usize;
        let len = p.checked_mul(detectors).ok_or_else(|| FormatError::Invalid("payload size overflows".into()))?;
        let values = r.f32s(len)?.into_iter().map(|v| T::lit(v as f64)).collect();
        gaps.push(k);
        data.push(GapSinogram { gap: k, detectors, values });
    }
    let geometry = SensorGeometry { n, pitch, angles: p, standoff, gaps, quant_delta };
    geometry.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    let text = std::str::from_utf8(r.rest()).map_err(|_| FormatError::Invalid("metadata is not UTF-8".into()))?;
    let mut metadata = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| FormatError::Invalid(format!("metadata line {line:?}")))?;
        metadata.insert(k.to_string(), v.to_string());
    }
    let angles = (0..p).map(|j| geometry.angle(j)).collect();
    Ok(SinogramSet { geometry, angles, data, metadata })
}

pub fn save_sinogram<T: Real>(set: &SinogramSet<T>, path: impl AsRef<Path>) -> Result<(), ForwardError> {
    std::fs::write(path, encode_sinogram(set)?).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_sinogram<T: Real>(path: impl AsRef<Path>) -> Result<SinogramSet<T>, ForwardError> {
    decode_sinogram(&std::fs::read(path).map_err(FormatError::from)?)
}
