// Random closed integration loops (circles and axis-aligned squares) and
// their midpoint-rule discretization.
//
// Every loop is traversed counter-clockwise; the outward normal of a sample
// is n = (t.y, -t.x) for its unit tangent t.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;

use crate::error::{FluxError, Result};
use crate::geom::Vec2;
use crate::scene::{DomainBounds, SceneConfig, WIRE_ON_PATH_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathShape {
    Circle,
    Square,
}

/// Analytic description of a loop. `size` is the radius of a circle or the
/// half-side of a square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpec {
    pub shape: PathShape,
    pub center: Vec2,
    pub size: f64,
}

impl PathSpec {
    pub fn new(shape: PathShape, center: Vec2, size: f64) -> Self {
        Self { shape, center, size }
    }

    pub fn perimeter(&self) -> f64 {
        match self.shape {
            PathShape::Circle => 2.0 * PI * self.size,
            PathShape::Square => 8.0 * self.size,
        }
    }

    /// Signed distance from `p` to the loop curve, negative inside.
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        let d = p - self.center;
        match self.shape {
            PathShape::Circle => d.norm() - self.size,
            PathShape::Square => {
                let qx = d.x.abs() - self.size;
                let qy = d.y.abs() - self.size;
                let outside = qx.max(0.0).hypot(qy.max(0.0));
                let inside = qx.max(qy).min(0.0);
                outside + inside
            }
        }
    }

    /// Whether the loop lies inside the (closed) domain.
    pub fn fits(&self, bounds: &DomainBounds) -> bool {
        self.size > 0.0
            && self.center.x - self.size >= bounds.x_min
            && self.center.x + self.size <= bounds.x_max
            && self.center.y - self.size >= bounds.y_min
            && self.center.y + self.size <= bounds.y_max
    }
}

/// Largest loop size that fits the domain.
pub fn max_feasible_size(bounds: &DomainBounds) -> f64 {
    0.5 * bounds.width().min(bounds.height())
}

/// Draws random loop specs inside a domain, keeping every loop at least
/// `clearance` away from each wire.
#[derive(Debug, Clone)]
pub struct PathSampler {
    pub bounds: DomainBounds,
    pub wires: Vec<Vec2>,
    pub min_size: f64,
    pub max_size: f64,
    pub clearance: f64,
}

impl PathSampler {
    pub const MAX_ATTEMPTS: usize = 100;

    pub fn new(bounds: DomainBounds, wires: Vec<Vec2>, min_size: f64, clearance: f64) -> Result<Self> {
        let max_size = max_feasible_size(&bounds);
        if !(min_size > 0.0 && min_size <= max_size) {
            return Err(FluxError::Config(format!(
                "min path size {min_size} must lie in (0, {max_size}] for this domain"
            )));
        }
        Ok(Self { bounds, wires, min_size, max_size, clearance: clearance.max(WIRE_ON_PATH_TOL) })
    }

    /// Sampler for a scene, with wire clearance equal to its singularity radius.
    pub fn for_scene(scene: &SceneConfig, min_size: f64) -> Result<Self> {
        let wires = scene.wires.iter().map(|w| w.position).collect();
        Self::new(scene.bounds, wires, min_size, scene.singularity_radius)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PathSpec> {
        let b = &self.bounds;
        for _ in 0..Self::MAX_ATTEMPTS {
            let shape = if rng.gen_bool(0.5) { PathShape::Circle } else { PathShape::Square };
            let size = if self.max_size > self.min_size {
                rng.gen_range(self.min_size..=self.max_size)
            } else {
                self.min_size
            };
            let cx = uniform_or_mid(rng, b.x_min + size, b.x_max - size);
            let cy = uniform_or_mid(rng, b.y_min + size, b.y_max - size);
            let spec = PathSpec::new(shape, Vec2::new(cx, cy), size);
            if self.wires.iter().all(|&w| spec.signed_distance(w).abs() > self.clearance) {
                return Ok(spec);
            }
        }
        Err(FluxError::Generation(format!(
            "no admissible loop after {} attempts (min_size={}, clearance={})",
            Self::MAX_ATTEMPTS,
            self.min_size,
            self.clearance
        )))
    }
}

impl PathSampler {
    /// Draws and discretizes `n` loops, redrawing any that touch a wire.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        scene: &SceneConfig,
        disc: &Discretization,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<ClosedPath>> {
        let mut out = Vec::with_capacity(n);
        let mut rejected = 0;
        while out.len() < n {
            let spec = self.sample(rng)?;
            match discretize(scene, &spec, disc) {
                Ok(path) => out.push(path),
                Err(FluxError::RejectedPath(msg)) => {
                    rejected += 1;
                    if rejected > Self::MAX_ATTEMPTS {
                        return Err(FluxError::Generation(msg));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

fn uniform_or_mid<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        0.5 * (lo + hi)
    }
}

/// Quadrature density of a loop discretization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub samples_per_unit_length: f64,
    pub min_samples: usize,
}

impl Discretization {
    pub fn for_bounds(bounds: &DomainBounds) -> Self {
        Self { samples_per_unit_length: 64.0 / bounds.width(), min_samples: 64 }
    }

    pub fn sample_count(&self, perimeter: f64) -> usize {
        let n = (perimeter * self.samples_per_unit_length).ceil();
        (n as usize).max(self.min_samples).max(4)
    }
}

/// A discretized loop ready for quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedPath {
    pub spec: PathSpec,
    pub points: Vec<Vec2>,
    pub tangents: Vec<Vec2>,
    pub normals: Vec<Vec2>,
    pub seg_lengths: Vec<f64>,
    pub enclosed_current: f64,
}

impl ClosedPath {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.seg_lengths.iter().sum()
    }

    /// Same loop traversed clockwise: tangents, normals and the enclosed
    /// current all change sign.
    pub fn reversed(&self) -> ClosedPath {
        ClosedPath {
            spec: self.spec,
            points: self.points.iter().rev().copied().collect(),
            tangents: self.tangents.iter().rev().map(|&t| -t).collect(),
            normals: self.normals.iter().rev().map(|&n| -n).collect(),
            seg_lengths: self.seg_lengths.iter().rev().copied().collect(),
            enclosed_current: -self.enclosed_current,
        }
    }

    /// Rigid translation of the loop (the enclosed current is kept).
    pub fn translated(&self, offset: Vec2) -> ClosedPath {
        let mut out = self.clone();
        out.spec.center = out.spec.center + offset;
        for p in &mut out.points {
            *p = *p + offset;
        }
        out
    }
}

/// Midpoint-rule discretization of a loop. Squares receive the same number
/// of samples on each edge, so their sample count is rounded up to a
/// multiple of four; corners are never sampled.
pub fn discretize(scene: &SceneConfig, spec: &PathSpec, disc: &Discretization) -> Result<ClosedPath> {
    if !spec.fits(&scene.bounds) {
        return Err(FluxError::Domain(format!("{spec:?} does not fit inside {:?}", scene.bounds)));
    }
    let enclosed_current = scene.enclosed_current(spec)?;
    let n = disc.sample_count(spec.perimeter());
    let (points, tangents, seg_lengths) = match spec.shape {
        PathShape::Circle => circle_samples(spec, n),
        PathShape::Square => square_samples(spec, n),
    };
    let normals = tangents.iter().map(|t| Vec2::new(t.y, -t.x)).collect();
    Ok(ClosedPath { spec: *spec, points, tangents, normals, seg_lengths, enclosed_current })
}

fn circle_samples(spec: &PathSpec, n: usize) -> (Vec<Vec2>, Vec<Vec2>, Vec<f64>) {
    let r = spec.size;
    let ds = 2.0 * PI * r / n as f64;
    let mut points = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    for k in 0..n {
        let theta = 2.0 * PI * (k as f64 + 0.5) / n as f64;
        let (s, c) = theta.sin_cos();
        points.push(spec.center + Vec2::new(c, s) * r);
        tangents.push(Vec2::new(-s, c));
    }
    (points, tangents, vec![ds; n])
}

fn square_samples(spec: &PathSpec, n: usize) -> (Vec<Vec2>, Vec<Vec2>, Vec<f64>) {
    let per_edge = n.div_ceil(4);
    let h = spec.size;
    let c = spec.center;
    let ds = 2.0 * h / per_edge as f64;
    // (start corner, direction) counter-clockwise from the bottom-left corner
    let edges = [
        (Vec2::new(c.x - h, c.y - h), Vec2::new(1.0, 0.0)),
        (Vec2::new(c.x + h, c.y - h), Vec2::new(0.0, 1.0)),
        (Vec2::new(c.x + h, c.y + h), Vec2::new(-1.0, 0.0)),
        (Vec2::new(c.x - h, c.y + h), Vec2::new(0.0, -1.0)),
    ];
    let mut points = Vec::with_capacity(4 * per_edge);
    let mut tangents = Vec::with_capacity(4 * per_edge);
    for (start, dir) in edges {
        for k in 0..per_edge {
            points.push(start + dir * ((k as f64 + 0.5) * ds));
            tangents.push(dir);
        }
    }
    (points, tangents, vec![ds; 4 * per_edge])
}

/// Midpoint-rule loop integrals `(sum (B.n) ds, sum (B.t)/mu ds)`.
pub fn loop_integrals(path: &ClosedPath, field: &[Vec2], mu: &[f64]) -> Result<(f64, f64)> {
    if field.len() != path.len() || mu.len() != path.len() {
        return Err(FluxError::Contract(format!(
            "loop has {} samples but got {} field values and {} permeabilities",
            path.len(),
            field.len(),
            mu.len()
        )));
    }
    let mut flux = 0.0;
    let mut ampere = 0.0;
    for k in 0..path.len() {
        let b = field[k];
        let ds = path.seg_lengths[k];
        flux += b.dot(path.normals[k]) * ds;
        ampere += b.dot(path.tangents[k]) / mu[k] * ds;
    }
    Ok((flux, ampere))
}

/// Dumps loops as CSV polylines (`path,k,x,y`), closing each loop by
/// repeating its first sample.
pub fn write_paths_csv<W: Write>(mut out: W, paths: &[ClosedPath]) -> Result<()> {
    writeln!(out, "path,k,x,y")?;
    for (id, path) in paths.iter().enumerate() {
        for (k, p) in path.points.iter().chain(path.points.first()).enumerate() {
            writeln!(out, "{id},{k},{},{}", p.x, p.y)?;
        }
    }
    Ok(())
}
