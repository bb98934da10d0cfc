//! 16-bit binary PGM (P5) rendering of layer images.

use std::fmt;
use std::str::FromStr;

use crate::Real;

pub const MAXVAL: u16 = 65535;

/// How pixel values map onto `0..=65535`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mapping {
    /// `[min, max] → [0, 65535]`; a constant image maps to 0.
    MinMax,
    /// `[−M, M] → [0, 65535]` with `M = max|v|`; 0 maps to 32768.
    Symmetric,
    /// `[lo, hi] → [0, 65535]`, clamped.
    Fixed(f64, f64),
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mapping::MinMax => write!(f, "minmax"),
            Mapping::Symmetric => write!(f, "symmetric"),
            Mapping::Fixed(lo, hi) => write!(f, "fixed:{lo}:{hi}"),
        }
    }
}

impl FromStr for Mapping {
    type Err = String;

    /// `minmax`, `symmetric` or `fixed:LO:HI`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "minmax" => Ok(Mapping::MinMax),
            "symmetric" => Ok(Mapping::Symmetric),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                let parse = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite());
                match parts.as_slice() {
                    ["fixed", lo, hi] => match (parse(lo), parse(hi)) {
                        (Some(lo), Some(hi)) if hi > lo => Ok(Mapping::Fixed(lo, hi)),
                        _ => Err(format!("fixed range needs finite lo < hi: {s:?}")),
                    },
                    _ => Err(format!("unknown mapping {s:?}")),
                }
            }
        }
    }
}

fn to_level(t: f64) -> u16 {
    (t.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16
}

/// Maps values to 16-bit grey levels.
pub fn map_levels<T: Real>(values: &[T], mapping: Mapping) -> Vec<u16> {
    let vals = values.iter().map(|v| v.as_f64());
    match mapping {
        Mapping::MinMax => {
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return vec![0; values.len()];
            }
            vals.map(|v| to_level((v - lo) / (hi - lo))).collect()
        }
        Mapping::Symmetric => {
            let m = vals.clone().fold(0.0f64, |a, v| a.max(v.abs()));
            if m == 0.0 {
                return vec![to_level(0.5); values.len()];
            }
            vals.map(|v| to_level((v + m) / (2.0 * m))).collect()
        }
        Mapping::Fixed(lo, hi) => vals.map(|v| to_level((v - lo) / (hi - lo))).collect(),
    }
}

/// Encodes a `width × height` image (row-major, top row first) as P5 with
/// maxval 65535 and big-endian samples. The mapping is recorded in a comment.
pub fn render_pgm<T: Real>(values: &[T], width: usize, height: usize, mapping: Mapping) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "image size mismatch");
    let header = format!("P5\n# mapping={mapping}\n{width} {height}\n{MAXVAL}\n");
    let mut out = header.into_bytes();
    out.reserve(values.len() * 2);
    for level in map_levels(values, mapping) {
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}
