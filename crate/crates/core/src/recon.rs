//! Filtered backprojection of per-gap sinograms into horizontal layer images.
//!
//! Image pixel `(ix, iy)` (row `iy`, top row first) sits at
//! `x = (ix − c)·pitch`, `y = (c − iy)·pitch` with `c = (size − 1)/2`.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::forward::{SensorGeometry, SinogramSet};
use crate::Real;

pub const LAYER_MAGIC: &[u8; 4] = b"ECTL";
pub const LAYER_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("angles must be strictly increasing in [0, π)")]
    InvalidAngles,
    #[error("sinogram shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    RamLak,
    Hamming,
    Hann,
    /// Rectangular window: the bare ramp, same response as `RamLak`.
    None,
}

impl Window {
    /// `W(ω)` with `ω` in cycles per sample, `0 ≤ ω ≤ 0.5`.
    pub fn weight(self, omega: f64) -> f64 {
        let c = (std::f64::consts::PI * omega / 0.5).cos();
        match self {
            Window::RamLak | Window::None => 1.0,
            Window::Hamming => 0.54 + 0.46 * c,
            Window::Hann => 0.5 + 0.5 * c,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::RamLak => "ram-lak",
            Window::Hamming => "hamming",
            Window::Hann => "hann",
            Window::None => "none",
        }
    }
}

impl FromStr for Window {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ram-lak" | "ramlak" => Ok(Window::RamLak),
            "hamming" => Ok(Window::Hamming),
            "hann" => Ok(Window::Hann),
            "none" => Ok(Window::None),
            _ => Err(format!("unknown filter window {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Linear,
}

impl FromStr for Interp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nearest" => Ok(Interp::Nearest),
            "linear" => Ok(Interp::Linear),
            _ => Err(format!("unknown interpolation {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec<T> {
    pub window: Window,
    pub interpolation: Interp,
    /// Output image is `size × size` pixels.
    pub size: usize,
    /// Pixel pitch, mm.
    pub pitch: T,
}

impl<T: Real> FilterSpec<T> {
    pub fn validate(&self) -> Result<(), ReconError> {
        if self.size < 2 {
            return Err(ReconError::InvalidSpec(format!("size {} < 2", self.size)));
        }
        if !(self.pitch > T::zero()) || !self.pitch.is_finite() {
            return Err(ReconError::InvalidSpec(format!("pitch {}", self.pitch)));
        }
        Ok(())
    }

    pub fn centre(&self) -> T {
        T::from_usize_lossy(self.size - 1) / T::lit(2.0)
    }

    pub fn x(&self, ix: usize) -> T {
        (T::from_usize_lossy(ix) - self.centre()) * self.pitch
    }

    pub fn y(&self, iy: usize) -> T {
        (self.centre() - T::from_usize_lossy(iy)) * self.pitch
    }
}

/// Detector sample `i` sits at `origin + i·spacing`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorAxis<T> {
    pub len: usize,
    pub origin: T,
    pub spacing: T,
}

impl<T: Real> DetectorAxis<T> {
    /// `len` samples centred on `s = 0`.
    pub fn centred(len: usize, spacing: T) -> Self {
        let origin = -T::from_usize_lossy(len - 1) / T::lit(2.0) * spacing;
        Self { len, origin, spacing }
    }
}

/// FFT length used for `n_det` samples: the next power of two ≥ `2·n_det`.
pub fn padded_len(n_det: usize) -> usize {
    (2 * n_det).next_power_of_two()
}

/// `|ω|·W(ω)` on the FFT bins of the padded length, `ω` in cycles per sample.
pub fn ramp_filter<T: Real>(n_det: usize, window: Window) -> Vec<T> {
    let len = padded_len(n_det.max(1));
    (0..len)
        .map(|b| {
            let omega = b.min(len - b) as f64 / len as f64;
            T::lit(omega * window.weight(omega))
        })
        .collect()
}

/// Ramp-filters each row of `rows` (`n_det` samples spaced `ds` apart) by
/// zero-padded frequency-domain multiplication.
pub fn filter_sinogram<T: Real>(rows: &[T], n_det: usize, window: Window, ds: T) -> Vec<T> {
    assert!(n_det > 0 && rows.len().is_multiple_of(n_det), "rows are not a multiple of n_det");
    let len = padded_len(n_det);
    let response = ramp_filter::<T>(n_det, window);
    let mut planner = FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let norm = T::one() / (T::from_usize_lossy(len) * ds);
    let mut out = vec![T::zero(); rows.len()];
    out.par_chunks_mut(n_det).zip(rows.par_chunks(n_det)).for_each(|(dst, src)| {
        let mut buf = vec![Complex::new(T::zero(), T::zero()); len];
        for (b, &v) in buf.iter_mut().zip(src) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&response) {
            *b = *b * h;
        }
        inv.process(&mut buf);
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re * norm;
        }
    });
    out
}

fn check_angles<T: Real>(angles: &[T]) -> Result<(), ReconError> {
    let ok = angles.iter().all(|&a| a >= T::zero() && a < T::PI()) && angles.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(ReconError::InvalidAngles)
    }
}

/// `image(x, y) = (π/p)·Σ_θ q_θ(x cos θ + y sin θ)`; samples off the detector contribute 0.
pub fn backproject<T: Real>(
    filtered: &[T],
    axis: &DetectorAxis<T>,
    angles: &[T],
    spec: &FilterSpec<T>,
) -> Result<Vec<T>, ReconError> {
    spec.validate()?;
    check_angles(angles)?;
    if filtered.len() != angles.len() * axis.len {
        return Err(ReconError::Shape(format!(
            "{} samples for {} angles of {} detectors",
            filtered.len(),
            angles.len(),
            axis.len
        )));
    }
    let trig: Vec<(T, T)> = angles.iter().map(|a| a.sin_cos()).collect();
    let scale = T::PI() / T::from_usize_lossy(angles.len().max(1));
    let last = T::from_usize_lossy(axis.len - 1);
    let half = T::lit(0.5);
    let mut image = vec![T::zero(); spec.size * spec.size];
    image.par_chunks_mut(spec.size).enumerate().for_each(|(iy, row)| {
        let y = spec.y(iy);
        for (ix, px) in row.iter_mut().enumerate() {
            let x = spec.x(ix);
            let mut acc = T::zero();
            for (j, &(sn, cs)) in trig.iter().enumerate() {
                let u = (x * cs + y * sn - axis.origin) / axis.spacing;
                let q = &filtered[j * axis.len..(j + 1) * axis.len];
                let v = match spec.interpolation {
                    Interp::Linear => {
                        if u < T::zero() || u > last {
                            continue;
                        }
                        let i0 = u.floor().to_usize().unwrap().min(axis.len - 1);
                        let f = u - T::from_usize_lossy(i0);
                        if f == T::zero() {
                            q[i0]
                        } else {
                            q[i0] * (T::one() - f) + q[i0 + 1] * f
                        }
                    }
                    Interp::Nearest => {
                        if u < -half || u >= last + half {
                            continue;
                        }
                        q[(u + half).floor().to_usize().unwrap().min(axis.len - 1)]
                    }
                };
                acc = acc + v;
            }
            *px = acc * scale;
        }
    });
    Ok(image)
}

/// One reconstructed `size × size` image, row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub gap: u32,
    pub size: usize,
    pub pitch: T,
    pub values: Vec<T>,
}

impl<T: Real> Layer<T> {
    pub fn get(&self, ix: usize, iy: usize) -> T {
        self.values[iy * self.size + ix]
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(LAYER_MAGIC)
            .u16(LAYER_VERSION)
            .u16(self.gap as u16)
            .u32(self.size as u32)
            .f64(self.pitch.as_f64())
            .f32s(self.values.iter().map(|v| v.as_f32()));
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ReconError> {
        let mut r = Reader::new(bytes);
        r.magic(LAYER_MAGIC)?;
        r.version(LAYER_VERSION)?;
        let gap = r.u16()? as u32;
        let size = r.u32()? as usize;
        let pitch = r.f64()?;
        if size < 2 || !(pitch > 0.0) || !pitch.is_finite() {
            return Err(FormatError::Invalid(format!("size {size}, pitch {pitch}")).into());
        }
        let count = size.checked_mul(size).ok_or_else(|| FormatError::Invalid("image size overflows".into()))?;
        let values = r.f32s(count)?;
        r.finish()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Invalid("non-finite pixel".into()).into());
        }
        Ok(Self { gap, size, pitch: T::lit(pitch), values: values.into_iter().map(|v| T::lit(v as f64)).collect() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReconError> {
        std::fs::write(path, self.encode()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReconError> {
        Self::decode(&std::fs::read(path).map_err(FormatError::from)?)
    }

    /// One line per image row, comma separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 12);
        for row in self.values.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Layers ordered by gap, `k = 1` (shallowest) first.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack<T> {
    pub geometry: SensorGeometry<T>,
    pub layers: Vec<Layer<T>>,
    /// Detector shift applied to each layer (`k·d/2`), mm.
    pub offsets: Vec<T>,
}

/// Filters and backprojects every gap. Gap-`k` reading `i` is attributed to
/// the transmitter–receiver midpoint `a_i + k·d/2`, which centres every layer
/// on the rotation axis.
pub fn reconstruct_layers<T: Real>(set: &SinogramSet<T>, spec: &FilterSpec<T>) -> Result<LayerStack<T>, ReconError> {
    spec.validate()?;
    let g = &set.geometry;
    let d = g.pitch;
    let mut order: Vec<usize> = (0..set.data.len()).collect();
    order.sort_by_key(|&i| set.data[i].gap);
    let mut layers = Vec::with_capacity(order.len());
    let mut offsets = Vec::with_capacity(order.len());
    for i in order {
        let gs = &set.data[i];
        let n_det = g.detectors(gs.gap);
        if gs.detectors != n_det || gs.values.len() != n_det * set.angles.len() {
            return Err(ReconError::Shape(format!("gap {} has {} detectors", gs.gap, gs.detectors)));
        }
        let shift = T::from_u32(gs.gap).unwrap() * d / T::lit(2.0);
        let axis = DetectorAxis { len: n_det, origin: g.offset(0) + shift, spacing: d };
        let filtered = filter_sinogram(&gs.values, n_det, spec.window, d);
        let values = backproject(&filtered, &axis, &set.angles, spec)?;
        layers.push(Layer { gap: gs.gap, size: spec.size, pitch: spec.pitch, values });
        offsets.push(shift);
    }
    Ok(LayerStack { geometry: g.clone(), layers, offsets })
}
