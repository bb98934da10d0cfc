//! Analytic relative-permittivity phantoms and their voxel rasterization.
//!
//! Coordinates are millimetres, `z` is height above the electrode plane.
//! Outside every primitive the permittivity is exactly 1.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::Real;

pub const VOXEL_MAGIC: &[u8; 4] = b"ECTV";

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("primitive {index} extends outside the declared bounds")]
    OutOfBounds { index: usize },
    #[error("raster grid does not cover the phantom bounds")]
    GridTooSmall,
    #[error("invalid raster geometry: {0}")]
    InvalidGeometry(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Real> Aabb<T> {
    pub fn union(&self, o: &Self) -> Self {
        Aabb {
            min: std::array::from_fn(|i| self.min[i].min(o.min[i])),
            max: std::array::from_fn(|i| self.max[i].max(o.max[i])),
        }
    }

    pub fn contains_box(&self, o: &Self) -> bool {
        (0..3).all(|i| o.min[i] >= self.min[i] && o.max[i] <= self.max[i])
    }

    /// Largest horizontal distance from the z axis over the box.
    pub fn max_radius(&self) -> T {
        let fx = self.min[0].abs().max(self.max[0].abs());
        let fy = self.min[1].abs().max(self.max[1].abs());
        fx.hypot(fy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape<T> {
    /// Box rotated by `theta_deg` about the vertical axis through its centre.
    Box {
        center: [T; 3],
        half: [T; 3],
        theta_deg: T,
    },
    /// Vertical cylinder.
    Cylinder {
        center: [T; 2],
        z0: T,
        z1: T,
        radius: T,
    },
    Sphere {
        center: [T; 3],
        radius: T,
    },
    /// Simple polygon extruded between `z0` and `z1`.
    Polygon {
        z0: T,
        z1: T,
        vertices: Vec<[T; 2]>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive<T> {
    pub shape: Shape<T>,
    pub contrast: T,
}

fn rot<T: Real>(p: [T; 2], c: T, s: T) -> [T; 2] {
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Horizontal line `{ offset·n + t·(−n_y, n_x) : t ∈ ℝ }` at height `z`,
/// with `n` a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line<T> {
    pub normal: [T; 2],
    pub offset: T,
    pub z: T,
}

impl<T: Real> Line<T> {
    pub fn new(normal: [T; 2], offset: T, z: T) -> Self {
        Self { normal, offset, z }
    }

    /// The line with unit normal at angle `theta` and signed distance `s` from the z axis.
    pub fn at_angle(theta: T, s: T, z: T) -> Self {
        let (sn, cs) = theta.sin_cos();
        Self::new([cs, sn], s, z)
    }

    pub fn dir(&self) -> [T; 2] {
        [-self.normal[1], self.normal[0]]
    }

    pub fn origin(&self) -> [T; 2] {
        [self.offset * self.normal[0], self.offset * self.normal[1]]
    }

    pub fn point(&self, t: T) -> [T; 3] {
        let (o, d) = (self.origin(), self.dir());
        [o[0] + t * d[0], o[1] + t * d[1], self.z]
    }
}

/// How a line meets a shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Chord<T> {
    Miss,
    /// Convex shapes: the open interval `(t_in, t_out)` lies inside.
    Span(T, T),
    /// Polygons: crossings were pushed, membership is tested pointwise.
    Crossings,
}

/// Crossings of the line with the circle `|q − c|² = r2`.
fn disc_chord<T: Real>(l: &Line<T>, c: [T; 2], r2: T) -> Chord<T> {
    let d = l.dir();
    // Perpendicular distance and foot of the perpendicular, computed so that a
    // centred disc sees exactly the offset.
    let h = l.offset - (c[0] * l.normal[0] + c[1] * l.normal[1]);
    let foot = c[0] * d[0] + c[1] * d[1];
    let disc = r2 - h * h;
    if disc > T::zero() {
        let root = disc.sqrt();
        Chord::Span(foot - root, foot + root)
    } else {
        Chord::Miss
    }
}

impl<T: Real> Shape<T> {
    /// Closed membership: boundary points count as inside.
    pub fn contains(&self, p: [T; 3]) -> bool {
        self.member(p, |a, b| a <= b)
    }

    /// Open membership, used where a sample may land exactly on a tangency.
    pub fn contains_interior(&self, p: [T; 3]) -> bool {
        self.member(p, |a, b| a < b)
    }

    fn member(&self, p: [T; 3], within: impl Fn(T, T) -> bool) -> bool {
        match self {
            Shape::Box { center, half, theta_deg } => {
                let (s, c) = theta_deg.to_radians().sin_cos();
                let q = rot([p[0] - center[0], p[1] - center[1]], c, -s);
                within(q[0].abs(), half[0]) && within(q[1].abs(), half[1]) && within((p[2] - center[2]).abs(), half[2])
            }
            Shape::Cylinder { center, z0, z1, radius } => {
                within(*z0, p[2]) && within(p[2], *z1) && within((p[0] - center[0]).hypot(p[1] - center[1]), *radius)
            }
            Shape::Sphere { center, radius } => {
                let (dx, dy, dz) = (p[0] - center[0], p[1] - center[1], p[2] - center[2]);
                within(dx * dx + dy * dy + dz * dz, *radius * *radius)
            }
            Shape::Polygon { z0, z1, vertices } => {
                within(*z0, p[2]) && within(p[2], *z1) && point_in_polygon(vertices, [p[0], p[1]])
            }
        }
    }

    pub fn bounds(&self) -> Aabb<T> {
        match self {
            Shape::Box { center, half, theta_deg } => {
                let (s, c) = theta_deg.to_radians().sin_cos();
                let ex = (c * half[0]).abs() + (s * half[1]).abs();
                let ey = (s * half[0]).abs() + (c * half[1]).abs();
                Aabb {
                    min: [center[0] - ex, center[1] - ey, center[2] - half[2]],
                    max: [center[0] + ex, center[1] + ey, center[2] + half[2]],
                }
            }
            Shape::Cylinder { center, z0, z1, radius } => Aabb {
                min: [center[0] - *radius, center[1] - *radius, *z0],
                max: [center[0] + *radius, center[1] + *radius, *z1],
            },
            Shape::Sphere { center, radius } => {
                Aabb { min: center.map(|c| c - *radius), max: center.map(|c| c + *radius) }
            }
            Shape::Polygon { z0, z1, vertices } => {
                let mut b =
                    Aabb { min: [T::infinity(), T::infinity(), *z0], max: [T::neg_infinity(), T::neg_infinity(), *z1] };
                for v in vertices {
                    b.min[0] = b.min[0].min(v[0]);
                    b.min[1] = b.min[1].min(v[1]);
                    b.max[0] = b.max[0].max(v[0]);
                    b.max[1] = b.max[1].max(v[1]);
                }
                b
            }
        }
    }

    /// Intersects the line with this shape, pushing every boundary crossing
    /// `t` onto `out`. Lines grazing a face or tangent to a curved surface miss.
    pub fn chord(&self, l: &Line<T>, out: &mut Vec<T>) -> Chord<T> {
        let (o, d, z) = (l.origin(), l.dir(), l.z);
        let chord = match self {
            Shape::Box { center, half, theta_deg } => {
                if (z - center[2]).abs() >= half[2] {
                    return Chord::Miss;
                }
                let (s, c) = theta_deg.to_radians().sin_cos();
                let lo = rot([o[0] - center[0], o[1] - center[1]], c, -s);
                let ld = rot(d, c, -s);
                let (mut t0, mut t1) = (T::neg_infinity(), T::infinity());
                for a in 0..2 {
                    if ld[a] == T::zero() {
                        if lo[a].abs() >= half[a] {
                            return Chord::Miss;
                        }
                    } else {
                        let ta = (-half[a] - lo[a]) / ld[a];
                        let tb = (half[a] - lo[a]) / ld[a];
                        t0 = t0.max(ta.min(tb));
                        t1 = t1.min(ta.max(tb));
                    }
                }
                if t1 > t0 {
                    Chord::Span(t0, t1)
                } else {
                    Chord::Miss
                }
            }
            Shape::Cylinder { center, z0, z1, radius } => {
                if z > *z0 && z < *z1 {
                    disc_chord(l, *center, *radius * *radius)
                } else {
                    Chord::Miss
                }
            }
            Shape::Sphere { center, radius } => {
                let h = z - center[2];
                disc_chord(l, [center[0], center[1]], *radius * *radius - h * h)
            }
            Shape::Polygon { z0, z1, vertices } => {
                if z <= *z0 || z >= *z1 {
                    return Chord::Miss;
                }
                for (i, a) in vertices.iter().enumerate() {
                    let b = vertices[(i + 1) % vertices.len()];
                    let e = [b[0] - a[0], b[1] - a[1]];
                    let den = d[0] * e[1] - d[1] * e[0];
                    if den == T::zero() {
                        continue;
                    }
                    let w = [a[0] - o[0], a[1] - o[1]];
                    let t = (w[0] * e[1] - w[1] * e[0]) / den;
                    let u = (w[0] * d[1] - w[1] * d[0]) / den;
                    if u >= T::zero() && u <= T::one() {
                        out.push(t);
                    }
                }
                return Chord::Crossings;
            }
        };
        if let Chord::Span(a, b) = chord {
            out.push(a);
            out.push(b);
        }
        chord
    }

    /// The same shape rotated by `phi` radians about the z axis.
    pub fn rotated_z(&self, phi: T) -> Self {
        let (s, c) = phi.sin_cos();
        match self {
            Shape::Box { center, half, theta_deg } => {
                let q = rot([center[0], center[1]], c, s);
                Shape::Box { center: [q[0], q[1], center[2]], half: *half, theta_deg: *theta_deg + phi.to_degrees() }
            }
            Shape::Cylinder { center, z0, z1, radius } => {
                Shape::Cylinder { center: rot(*center, c, s), z0: *z0, z1: *z1, radius: *radius }
            }
            Shape::Sphere { center, radius } => {
                let q = rot([center[0], center[1]], c, s);
                Shape::Sphere { center: [q[0], q[1], center[2]], radius: *radius }
            }
            Shape::Polygon { z0, z1, vertices } => {
                Shape::Polygon { z0: *z0, z1: *z1, vertices: vertices.iter().map(|v| rot(*v, c, s)).collect() }
            }
        }
    }

    /// The same shape translated by `v`.
    pub fn translated(&self, v: [T; 3]) -> Self {
        let mut out = self.clone();
        match &mut out {
            Shape::Box { center, .. } | Shape::Sphere { center, .. } => {
                for i in 0..3 {
                    center[i] = center[i] + v[i];
                }
            }
            Shape::Cylinder { center, z0, z1, .. } => {
                center[0] = center[0] + v[0];
                center[1] = center[1] + v[1];
                *z0 = *z0 + v[2];
                *z1 = *z1 + v[2];
            }
            Shape::Polygon { z0, z1, vertices } => {
                vertices.iter_mut().for_each(|p| *p = [p[0] + v[0], p[1] + v[1]]);
                *z0 = *z0 + v[2];
                *z1 = *z1 + v[2];
            }
        }
        out
    }

    /// The same shape mirrored in x (`x -> -x`).
    pub fn mirrored_x(&self) -> Self {
        let mut out = self.clone();
        match &mut out {
            Shape::Box { center, theta_deg, .. } => {
                center[0] = -center[0];
                *theta_deg = -*theta_deg;
            }
            Shape::Sphere { center, .. } => center[0] = -center[0],
            Shape::Cylinder { center, .. } => center[0] = -center[0],
            Shape::Polygon { vertices, .. } => vertices.iter_mut().for_each(|p| p[0] = -p[0]),
        }
        out
    }
}

/// Even-odd rule.
fn point_in_polygon<T: Real>(v: &[[T; 2]], p: [T; 2]) -> bool {
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Anything that assigns a relative permittivity to points in space.
pub trait PermittivityField<T: Real>: Sync {
    fn permittivity(&self, p: [T; 3]) -> T;

    /// Region outside of which the field is exactly 1; `None` if it is 1 everywhere.
    fn bounds(&self) -> Option<Aabb<T>>;

    /// `∫_{t0}^{t1} (ε_r(line(t)) − 1) dt`. The default is the composite
    /// midpoint rule with step at most `max_step`.
    fn line_integral(&self, l: &Line<T>, t0: T, t1: T, max_step: T) -> T {
        if !(t1 > t0) {
            return T::zero();
        }
        let steps = ((t1 - t0) / max_step).ceil().to_usize().unwrap_or(1).max(1);
        let h = (t1 - t0) / T::from_usize_lossy(steps);
        let half = T::lit(0.5);
        let sum: T = (0..steps)
            .map(|i| {
                let t = t0 + (T::from_usize_lossy(i) + half) * h;
                self.permittivity(l.point(t)) - T::one()
            })
            .sum();
        sum * h
    }
}

/// An ordered list of primitives; later ones override earlier ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhantomSpec<T> {
    primitives: Vec<Primitive<T>>,
    declared: Option<Aabb<T>>,
}

impl<T: Real> PhantomSpec<T> {
    pub fn new() -> Self {
        Self { primitives: Vec::new(), declared: None }
    }

    /// Validates every primitive against the declared bounds, if any.
    pub fn from_parts(primitives: Vec<Primitive<T>>, declared: Option<Aabb<T>>) -> Result<Self, PhantomError> {
        let spec = Self { primitives, declared };
        if let Some(b) = &spec.declared {
            if let Some(index) = spec.primitives.iter().position(|p| !b.contains_box(&p.shape.bounds())) {
                return Err(PhantomError::OutOfBounds { index });
            }
        }
        Ok(spec)
    }

    pub fn push(&mut self, shape: Shape<T>, contrast: T) -> &mut Self {
        self.primitives.push(Primitive { shape, contrast });
        self
    }

    pub fn primitives(&self) -> &[Primitive<T>] {
        &self.primitives
    }

    pub fn declared_bounds(&self) -> Option<Aabb<T>> {
        self.declared
    }

    /// Union of the primitive extents (ignores the declared bounds).
    pub fn extent(&self) -> Option<Aabb<T>> {
        self.primitives.iter().map(|p| p.shape.bounds()).reduce(|a, b| a.union(&b))
    }

    pub fn map_shapes(&self, f: impl Fn(&Shape<T>) -> Shape<T>) -> Self {
        Self {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive { shape: f(&p.shape), contrast: p.contrast })
                .collect(),
            declared: None,
        }
    }

    pub fn rotated_z(&self, phi: T) -> Self {
        self.map_shapes(|s| s.rotated_z(phi))
    }

    pub fn translated(&self, v: [T; 3]) -> Self {
        self.map_shapes(|s| s.translated(v))
    }

    pub fn mirrored_x(&self) -> Self {
        self.map_shapes(Shape::mirrored_x)
    }

    /// Replaces every contrast `c` by `1 + f(c − 1)`.
    pub fn map_contrast(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive { shape: p.shape.clone(), contrast: T::one() + f(p.contrast - T::one()) })
                .collect(),
            declared: self.declared,
        }
    }

    /// Canonical text form; parses back to an equal spec.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(b) = &self.declared {
            let _ = writeln!(s, "bounds {} {} {} {} {} {}", b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]);
        }
        for p in &self.primitives {
            match &p.shape {
                Shape::Box { center: c, half: h, theta_deg } => {
                    let _ = write!(s, "box {} {} {} {} {} {} {}", c[0], c[1], c[2], h[0], h[1], h[2], theta_deg);
                }
                Shape::Cylinder { center: c, z0, z1, radius } => {
                    let _ = write!(s, "cylinder {} {} {} {} {}", c[0], c[1], z0, z1, radius);
                }
                Shape::Sphere { center: c, radius } => {
                    let _ = write!(s, "sphere {} {} {} {}", c[0], c[1], c[2], radius);
                }
                Shape::Polygon { z0, z1, vertices } => {
                    let _ = write!(s, "polygon {z0} {z1} {}", p.contrast);
                    for v in vertices {
                        let _ = write!(s, " {} {}", v[0], v[1]);
                    }
                    s.push('\n');
                    continue;
                }
            }
            let _ = writeln!(s, " {}", p.contrast);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PhantomError> {
        let mut primitives = Vec::new();
        let mut declared = None;
        let mut lines_of = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |message: String| PhantomError::Parse { line, message };
            let mut words = body.split_whitespace();
            let kind = words.next().unwrap();
            let nums = words
                .map(|w| {
                    w.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .map(T::lit)
                        .ok_or_else(|| err(format!("malformed number {w:?}")))
                })
                .collect::<Result<Vec<T>, _>>()?;
            let want = |n: usize| {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(err(format!("{kind} takes {n} numbers, found {}", nums.len())))
                }
            };
            let positive = |v: T, what: &str| {
                if v > T::zero() {
                    Ok(v)
                } else {
                    Err(err(format!("{what} must be positive, got {v}")))
                }
            };
            let (shape, contrast) = match kind {
                "bounds" => {
                    want(6)?;
                    let b = Aabb { min: [nums[0], nums[1], nums[2]], max: [nums[3], nums[4], nums[5]] };
                    if (0..3).any(|i| b.max[i] < b.min[i]) {
                        return Err(err("bounds max below min".into()));
                    }
                    declared = Some(b);
                    continue;
                }
                "box" => {
                    want(8)?;
                    let half = [positive(nums[3], "hx")?, positive(nums[4], "hy")?, positive(nums[5], "hz")?];
                    (Shape::Box { center: [nums[0], nums[1], nums[2]], half, theta_deg: nums[6] }, nums[7])
                }
                "cylinder" => {
                    want(6)?;
                    if nums[3] < nums[2] {
                        return Err(err("cylinder z1 below z0".into()));
                    }
                    let radius = positive(nums[4], "radius")?;
                    (Shape::Cylinder { center: [nums[0], nums[1]], z0: nums[2], z1: nums[3], radius }, nums[5])
                }
                "sphere" => {
                    want(5)?;
                    let radius = positive(nums[3], "radius")?;
                    (Shape::Sphere { center: [nums[0], nums[1], nums[2]], radius }, nums[4])
                }
                "polygon" => {
                    if nums.len() < 9 || nums.len() % 2 == 0 {
                        return Err(err("polygon takes z0 z1 eps_r and at least three x y vertices".into()));
                    }
                    if nums[1] < nums[0] {
                        return Err(err("polygon z1 below z0".into()));
                    }
                    let vertices = nums[3..].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                    (Shape::Polygon { z0: nums[0], z1: nums[1], vertices }, nums[2])
                }
                other => return Err(err(format!("unknown primitive {other:?}"))),
            };
            positive(contrast, "contrast")?;
            primitives.push(Primitive { shape, contrast });
            lines_of.push(line);
        }
        Self::from_parts(primitives, declared).map_err(|e| match e {
            PhantomError::OutOfBounds { index } => PhantomError::Parse {
                line: lines_of[index],
                message: "primitive extends outside the declared bounds".into(),
            },
            e => e,
        })
    }
}

pub fn build_phantom<T: Real>(text: &str) -> Result<PhantomSpec<T>, PhantomError> {
    PhantomSpec::parse(text)
}

pub fn eval_permittivity<T: Real>(spec: &PhantomSpec<T>, p: [T; 3]) -> T {
    spec.permittivity(p)
}

impl<T: Real> PermittivityField<T> for PhantomSpec<T> {
    fn permittivity(&self, p: [T; 3]) -> T {
        self.primitives.iter().rev().find(|q| q.shape.contains(p)).map_or(T::one(), |q| q.contrast)
    }

    fn bounds(&self) -> Option<Aabb<T>> {
        self.declared.or_else(|| self.extent())
    }

    /// Exact: the integrand is piecewise constant between boundary crossings.
    fn line_integral(&self, l: &Line<T>, t0: T, t1: T, _max_step: T) -> T {
        if !(t1 > t0) {
            return T::zero();
        }
        let mut ts = vec![t0, t1];
        let chords: Vec<Chord<T>> = self.primitives.iter().map(|p| p.shape.chord(l, &mut ts)).collect();
        ts.retain(|&t| t >= t0 && t <= t1);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let half = T::lit(0.5);
        ts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let t = (w[0] + w[1]) * half;
                let inside = |(p, c): &(&Primitive<T>, &Chord<T>)| match c {
                    Chord::Miss => false,
                    Chord::Span(a, b) => *a < t && t < *b,
                    Chord::Crossings => p.shape.contains_interior(l.point(t)),
                };
                let eps = self.primitives.iter().zip(&chords).rev().find(inside).map_or(T::one(), |(p, _)| p.contrast);
                (eps - T::one()) * (w[1] - w[0])
            })
            .sum()
    }
}

/// Regular voxel lattice: voxel `(ix, iy, iz)` spans
/// `origin + [i, i+1)·spacing` and is stored at `(iz·ny + iy)·nx + ix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterGeometry<T> {
    pub dims: [usize; 3],
    pub spacing: [T; 3],
    pub origin: [T; 3],
}

impl<T: Real> RasterGeometry<T> {
    /// Smallest lattice with the given spacing that covers `b` plus `pad` on every side.
    pub fn covering(b: &Aabb<T>, spacing: T, pad: T) -> Self {
        let origin = b.min.map(|m| m - pad);
        let dims =
            std::array::from_fn(|i| ((b.max[i] + pad - origin[i]) / spacing).ceil().to_usize().unwrap_or(0).max(1));
        Self { dims, spacing: [spacing; 3], origin }
    }

    pub fn extent(&self) -> Aabb<T> {
        Aabb {
            min: self.origin,
            max: std::array::from_fn(|i| self.origin[i] + T::from_usize_lossy(self.dims[i]) * self.spacing[i]),
        }
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> [T; 3] {
        let h = T::lit(0.5);
        let idx = [ix, iy, iz];
        std::array::from_fn(|i| self.origin[i] + (T::from_usize_lossy(idx[i]) + h) * self.spacing[i])
    }

    pub fn voxel_volume(&self) -> T {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.contains(&0) {
            return Err(PhantomError::InvalidGeometry("zero dimension".into()));
        }
        if self.spacing.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return Err(PhantomError::InvalidGeometry("spacing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    pub geometry: RasterGeometry<T>,
    pub values: Vec<T>,
}

impl<T: Real> VoxelGrid<T> {
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> T {
        let [nx, ny, _] = self.geometry.dims;
        self.values[(iz * ny + iy) * nx + ix]
    }

    /// `Σ (ε_r − 1)·voxel volume`.
    pub fn excess_volume(&self) -> T {
        self.values.iter().map(|&v| v - T::one()).sum::<T>() * self.geometry.voxel_volume()
    }

    /// Trilinear interpolation between voxel centres; background 1 beyond the grid.
    pub fn sample(&self, p: [T; 3]) -> T {
        let g = &self.geometry;
        let mut base = [0isize; 3];
        let mut frac = [T::zero(); 3];
        for i in 0..3 {
            let u = (p[i] - g.origin[i]) / g.spacing[i] - T::lit(0.5);
            let f = u.floor();
            if !f.is_finite() {
                return T::one();
            }
            base[i] = f.to_isize().unwrap_or(isize::MIN / 2);
            frac[i] = u - f;
        }
        let at = |ix: isize, iy: isize, iz: isize| {
            let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
            if inside(ix, g.dims[0]) && inside(iy, g.dims[1]) && inside(iz, g.dims[2]) {
                self.get(ix as usize, iy as usize, iz as usize)
            } else {
                T::one()
            }
        };
        let mut acc = T::zero();
        for corner in 0..8 {
            let o = [(corner & 1) as isize, ((corner >> 1) & 1) as isize, ((corner >> 2) & 1) as isize];
            let w = (0..3).fold(T::one(), |w, i| w * if o[i] == 1 { frac[i] } else { T::one() - frac[i] });
            if w != T::zero() {
                acc = acc + w * at(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
            }
        }
        acc
    }

    pub fn encode(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut w = Writer::new();
        w.bytes(VOXEL_MAGIC);
        for d in g.dims {
            w.u32(d as u32);
        }
        for v in g.spacing.iter().chain(&g.origin) {
            w.f64(v.as_f64());
        }
        w.f32s(self.values.iter().map(|v| v.as_f32()));
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PhantomError> {
        let mut r = Reader::new(bytes);
        r.magic(VOXEL_MAGIC)?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let mut f = [0.0f64; 6];
        for v in &mut f {
            *v = r.f64()?;
        }
        let geometry =
            RasterGeometry { dims, spacing: [f[0], f[1], f[2]].map(T::lit), origin: [f[3], f[4], f[5]].map(T::lit) };
        geometry.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
        if f[3..].iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Invalid("non-finite origin".into()).into());
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Invalid("grid size overflows".into()))?;
        let raw = r.f32s(count)?;
        r.finish()?;
        if raw.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(FormatError::Invalid("permittivity values must be positive".into()).into());
        }
        Ok(Self { geometry, values: raw.into_iter().map(|v| T::lit(v as f64)).collect() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PhantomError> {
        std::fs::write(path, self.encode()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PhantomError> {
        Self::decode(&std::fs::read(path).map_err(FormatError::from)?)
    }
}

impl<T: Real> PermittivityField<T> for VoxelGrid<T> {
    fn permittivity(&self, p: [T; 3]) -> T {
        self.sample(p)
    }

    /// Includes the half-voxel fringe reached by trilinear interpolation.
    fn bounds(&self) -> Option<Aabb<T>> {
        Some(self.geometry.extent())
    }
}

/// Samples `spec` at voxel centres, or averages a 2×2×2 sub-lattice when
/// `supersample` is set.
pub fn rasterize<T: Real>(
    spec: &PhantomSpec<T>,
    geometry: &RasterGeometry<T>,
    supersample: bool,
) -> Result<VoxelGrid<T>, PhantomError> {
    geometry.validate()?;
    if let Some(b) = spec.bounds() {
        if !geometry.extent().contains_box(&b) {
            return Err(PhantomError::GridTooSmall);
        }
    }
    let [nx, ny, nz] = geometry.dims;
    let quarter = geometry.spacing.map(|s| s * T::lit(0.25));
    let eighth = T::lit(0.125);
    let values = (0..nz)
        .into_par_iter()
        .flat_map_iter(|iz| {
            (0..ny).flat_map(move |iy| {
                (0..nx).map(move |ix| {
                    let c = geometry.center(ix, iy, iz);
                    if !supersample {
                        return spec.permittivity(c);
                    }
                    (0..8)
                        .map(|k| {
                            let sgn = |bit: usize| if (k >> bit) & 1 == 1 { T::one() } else { -T::one() };
                            spec.permittivity(std::array::from_fn(|i| c[i] + sgn(i) * quarter[i]))
                        })
                        .sum::<T>()
                        * eighth
                })
            })
        })
        .collect();
    Ok(VoxelGrid { geometry: *geometry, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> PhantomSpec<f64> {
        build_phantom(text).unwrap()
    }

    #[test]
    fn background_is_one() {
        let spec = PhantomSpec::<f64>::new();
        assert_eq!(eval_permittivity(&spec, [3.0, -2.0, 7.0]), 1.0);
        assert!(spec.bounds().is_none());
    }

    #[test]
    fn sphere_line() {
        let spec = parse("sphere 0 0 10 5 2.0");
        assert_eq!(
            spec.primitives()[0],
            Primitive { shape: Shape::Sphere { center: [0.0, 0.0, 10.0], radius: 5.0 }, contrast: 2.0 }
        );
        assert_eq!(eval_permittivity(&spec, [1.0, 1.0, 11.0]), 2.0);
        assert_eq!(eval_permittivity(&spec, [0.0, 0.0, 4.0]), 1.0);
    }

    #[test]
    fn later_primitives_win() {
        let spec = parse("box 0 0 5 2 2 2 0 2\nsphere 1 0 5 2 5");
        assert_eq!(eval_permittivity(&spec, [1.0, 0.0, 5.0]), 5.0);
        assert_eq!(eval_permittivity(&spec, [-1.8, 0.0, 5.0]), 2.0);
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let spec = parse("# header\n\n  cylinder 0 0 1 3 2 1.5  # trailing\n");
        assert_eq!(spec.primitives().len(), 1);

        let e = build_phantom::<f64>("sphere 0 0 1 1 2\nsphere 0 0 x 1 2").unwrap_err();
        assert!(matches!(e, PhantomError::Parse { line: 2, .. }), "{e}");
        let e = build_phantom::<f64>("\nbox 0 0 1 1 1 1 0 -1").unwrap_err();
        assert!(matches!(e, PhantomError::Parse { line: 2, .. }));
        assert!(build_phantom::<f64>("sphere 0 0 1 1 0").is_err());
        assert!(build_phantom::<f64>("cone 0 0 1").is_err());
        assert!(build_phantom::<f64>("sphere 0 0 1 1").is_err());
        assert!(build_phantom::<f64>("polygon 0 1 2 0 0 1 0").is_err());
    }

    #[test]
    fn declared_bounds_are_enforced() {
        let e = build_phantom::<f64>("bounds -5 -5 0 5 5 10\nsphere 0 0 5 1 2\nsphere 4.5 0 5 1 2").unwrap_err();
        assert!(matches!(e, PhantomError::Parse { line: 3, .. }), "{e}");
        let ok = parse("bounds -5 -5 0 5 5 10\nsphere 0 0 5 1 2");
        assert_eq!(ok.bounds().unwrap().max, [5.0, 5.0, 10.0]);
    }

    #[test]
    fn text_round_trip() {
        let spec = parse(
            "bounds -20 -20 0 20 20 20\nbox 1.5 -2 4 1 2 0.5 30 2\ncylinder 0 0 1 3 2 1.5\n\
             sphere 0 0 10 5 2.0\npolygon 2 6 3 0 0 4 0 4 3 1 5",
        );
        assert_eq!(parse(&spec.to_text()), spec);
    }

    #[test]
    fn polygon_membership() {
        // L-shaped (non-convex) prism
        let spec = parse("polygon 0 2 4 0 0 4 0 4 1 1 1 1 4 0 4");
        assert_eq!(spec.permittivity([3.0, 0.5, 1.0]), 4.0);
        assert_eq!(spec.permittivity([0.5, 3.0, 1.0]), 4.0);
        assert_eq!(spec.permittivity([3.0, 3.0, 1.0]), 1.0);
        assert_eq!(spec.permittivity([0.5, 0.5, 2.5]), 1.0);
    }

    #[test]
    fn exact_chords() {
        let spec = parse("cylinder 0 0 0 10 3 2.5\nbox 10 0 5 1 1 5 45 3");
        // chord through the cylinder at offset 1
        let got = spec.line_integral(&Line::new([0.0, -1.0], -1.0, 5.0), -20.0, 20.0, 1.0);
        let want = 1.5 * 2.0 * (9.0f64 - 1.0).sqrt() + 2.0 * 2.0 * 2f64.sqrt() * (1.0 - 1.0 / 2f64.sqrt());
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        // non-convex polygon chord: y = 0.5 crosses the full 4-wide foot
        let l = parse("polygon 0 2 4 0 0 4 0 4 1 1 1 1 4 0 4");
        let c = l.line_integral(&Line::new([0.0, -1.0], -0.5, 1.0), -1.0, 9.0, 1.0);
        assert!((c - 12.0).abs() < 1e-12);
        let c = l.line_integral(&Line::new([1.0, 0.0], 0.5, 1.0), -1.0, 9.0, 1.0);
        assert!((c - 12.0).abs() < 1e-12);
        let c = l.line_integral(&Line::new([0.0, -1.0], -2.0, 1.0), -1.0, 9.0, 1.0);
        assert!((c - 3.0).abs() < 1e-12);

        // tangent to the cylinder
        let c = spec.line_integral(&Line::new([0.0, -1.0], -3.0, 5.0), -20.0, 20.0, 1.0);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn midpoint_default_approaches_exact() {
        let spec = parse("sphere 0 0 0 4 3");
        let g = RasterGeometry::covering(&spec.bounds().unwrap(), 0.1, 0.5);
        let grid = rasterize(&spec, &g, true).unwrap();
        let exact = spec.line_integral(&Line::new([0.0, -1.0], -0.3, 0.2), -10.0, 10.0, 1.0);
        let approx = grid.line_integral(&Line::new([0.0, -1.0], -0.3, 0.2), -10.0, 10.0, 0.05);
        assert!((exact - approx).abs() < 0.05 * exact, "{exact} {approx}");
    }

    #[test]
    fn raster_empty_and_too_small() {
        let g = RasterGeometry { dims: [4, 3, 2], spacing: [1.0; 3], origin: [0.0; 3] };
        let grid = rasterize(&PhantomSpec::<f64>::new(), &g, false).unwrap();
        assert!(grid.values.iter().all(|&v| v == 1.0));
        assert_eq!(grid.values.len(), 24);
        let spec = parse("sphere 2 2 1 1.5 2");
        assert!(matches!(rasterize(&spec, &g, false), Err(PhantomError::GridTooSmall)));
    }

    fn box_volume_error(h: f64, supersample: bool) -> f64 {
        let spec = parse("box 0.3 -0.2 5.1 3.3 2.1 1.7 23 2");
        let g = RasterGeometry::covering(&spec.bounds().unwrap(), h, h);
        let grid = rasterize(&spec, &g, supersample).unwrap();
        (grid.excess_volume() - 8.0 * 3.3 * 2.1 * 1.7).abs()
    }

    #[test]
    fn box_volume_within_one_voxel_shell() {
        let area = 8.0 * (3.3 * 2.1 + 3.3 * 1.7 + 2.1 * 1.7);
        for h in [0.4, 0.2, 0.1] {
            assert!(box_volume_error(h, false) < area * h, "h={h}");
        }
    }

    #[test]
    fn raster_converges() {
        let errs: Vec<f64> = [0.4, 0.2, 0.1, 0.05].iter().map(|&h| box_volume_error(h, false)).collect();
        assert!(errs[3] < errs[1] && errs[2] < errs[0], "{errs:?}");
    }

    #[test]
    fn supersampled_edges_are_mixed() {
        let spec = parse("box 0 0 0 1.3 1.3 1.3 0 3");
        let g = RasterGeometry { dims: [6, 6, 6], spacing: [0.5; 3], origin: [-1.5; 3] };
        let grid = rasterize(&spec, &g, true).unwrap();
        // voxel [1.0, 1.5) straddles the face at 1.3
        let v = grid.get(5, 3, 3);
        assert!(v > 1.0 && v < 3.0, "{v}");
        assert_eq!(grid.get(3, 3, 3), 3.0);
    }

    #[test]
    fn trilinear_hits_centres_and_background() {
        let g = RasterGeometry { dims: [2, 2, 2], spacing: [1.0; 3], origin: [0.0; 3] };
        let grid = VoxelGrid { geometry: g, values: (1..=8).map(f64::from).collect() };
        assert_eq!(grid.sample([0.5, 0.5, 0.5]), 1.0);
        assert_eq!(grid.sample([1.5, 1.5, 1.5]), 8.0);
        assert_eq!(grid.sample([1.0, 1.0, 1.0]), 4.5);
        assert_eq!(grid.sample([-5.0, 0.5, 0.5]), 1.0);
    }

    #[test]
    fn voxel_file_round_trip() {
        let spec = parse("sphere 0 0 2 1 2.5");
        let g = RasterGeometry::covering(&spec.bounds().unwrap(), 0.25, 0.0);
        let grid: VoxelGrid<f32> = rasterize(&spec.map_contrast(|c| c), &g, true)
            .map(|v| VoxelGrid {
                geometry: RasterGeometry {
                    dims: v.geometry.dims,
                    spacing: v.geometry.spacing.map(|s| s as f32),
                    origin: v.geometry.origin.map(|s| s as f32),
                },
                values: v.values.iter().map(|&x| x as f32).collect(),
            })
            .unwrap();
        let bytes = grid.encode();
        assert_eq!(VoxelGrid::<f32>::decode(&bytes).unwrap(), grid);
        assert!(VoxelGrid::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(VoxelGrid::<f32>::decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn rotation_equivariance(phi in -3.2f64..3.2, x in -8.0f64..8.0, y in -8.0f64..8.0, z in 0.0f64..10.0) {
            let spec = parse(
                "box 1.5 -2 4 3 2 2.5 30 2\ncylinder -3 1 1 6 2 1.5\n\
                 sphere 2 3 5 2.5 3\npolygon 2 6 4 0 0 4 0 4 3 1 5",
            );
            let rotated = spec.rotated_z(phi);
            let (s, c) = phi.sin_cos();
            let back = [c * x + s * y, -s * x + c * y, z];
            prop_assert!((rotated.permittivity([x, y, z]) - spec.permittivity(back)).abs() <= 1e-12);
        }
    }
}
