// Finite-difference vector-potential reference: div((1/mu) grad Az) = -J on
// a node grid with Az = 0 on the boundary, solved by red-black SOR.
// B = (dAz/dy, -dAz/dx) lands on cell centres.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};
use crate::field::VectorField;
use crate::geom::Vec2;
use crate::scene::{DomainBounds, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdConfig {
    /// Cells per side.
    pub grid_n: usize,
    /// Sweep budget of one linear solve.
    pub max_iterations: usize,
    /// Target relative residual.
    pub tolerance: f64,
    pub relaxation_omega: f64,
    pub saturation_outer_iterations: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            grid_n: 257,
            max_iterations: 200_000,
            tolerance: 1e-8,
            relaxation_omega: 1.9,
            saturation_outer_iterations: 8,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 33 {
            return Err(FluxError::Config(format!("grid_n must be at least 33 (got {})", self.grid_n)));
        }
        if !(self.tolerance > 0.0) {
            return Err(FluxError::Config(format!("tolerance must be positive (got {})", self.tolerance)));
        }
        if !(self.relaxation_omega > 1.0 && self.relaxation_omega < 2.0) {
            return Err(FluxError::Config(format!(
                "relaxation_omega must lie in (1, 2) (got {})",
                self.relaxation_omega
            )));
        }
        if self.max_iterations == 0 {
            return Err(FluxError::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cell-centred flux density on a regular grid. Cell `(i, j)` has index
/// `j * nx + i`; `mask[k]` is true for cells excluded from every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub bounds: DomainBounds,
    pub nx: usize,
    pub ny: usize,
    pub bx: Vec<f64>,
    pub by: Vec<f64>,
    pub mask: Vec<bool>,
}

const FGRD_MAGIC: &[u8; 4] = b"FGRD";
const FGRD_VERSION: u32 = 1;

impl FieldGrid {
    pub fn zeros(bounds: DomainBounds, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(FluxError::Contract(format!("grid must have at least one cell (got {nx}x{ny})")));
        }
        let n = nx * ny;
        Ok(Self { bounds, nx, ny, bx: vec![0.0; n], by: vec![0.0; n], mask: vec![false; n] })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (self.bounds.width() / self.nx as f64, self.bounds.height() / self.ny as f64)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        let (hx, hy) = self.cell_size();
        Vec2::new(self.bounds.x_min + (i as f64 + 0.5) * hx, self.bounds.y_min + (j as f64 + 0.5) * hy)
    }

    pub fn centers(&self) -> Vec<Vec2> {
        (0..self.ny).flat_map(|j| (0..self.nx).map(move |i| (i, j))).map(|(i, j)| self.cell_center(i, j)).collect()
    }

    pub fn value(&self, k: usize) -> Vec2 {
        Vec2::new(self.bx[k], self.by[k])
    }

    pub fn magnitude(&self, k: usize) -> f64 {
        self.value(k).norm()
    }

    /// Masks every cell whose centre lies inside a wire's singularity disk.
    pub fn mask_wires(&mut self, scene: &SceneConfig) {
        for (k, c) in self.centers().into_iter().enumerate() {
            self.mask[k] = scene.in_wire_mask(c);
        }
    }

    /// Bilinear interpolation between cell centres; points closer to the
    /// domain edge than half a cell take the value of the nearest row or
    /// column of centres.
    pub fn interpolate(&self, p: Vec2) -> Result<Vec2> {
        self.bounds.check(p)?;
        let (hx, hy) = self.cell_size();
        let axis = |v: f64, lo: f64, h: f64, n: usize| {
            let t = ((v - lo) / h - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (t.floor() as usize).min(n.saturating_sub(2));
            let f = if n == 1 { 0.0 } else { t - i0 as f64 };
            (i0, (i0 + 1).min(n - 1), f)
        };
        let (i0, i1, fx) = axis(p.x, self.bounds.x_min, hx, self.nx);
        let (j0, j1, fy) = axis(p.y, self.bounds.y_min, hy, self.ny);
        let at = |i: usize, j: usize| self.value(j * self.nx + i);
        let bottom = at(i0, j0) * (1.0 - fx) + at(i1, j0) * fx;
        let top = at(i0, j1) * (1.0 - fx) + at(i1, j1) * fx;
        Ok(bottom * (1.0 - fy) + top * fy)
    }

    /// `x,y,Bx,By,|B|,mask`, one row per cell.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,Bx,By,|B|,mask")?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let k = j * self.nx + i;
                let c = self.cell_center(i, j);
                writeln!(
                    out,
                    "{},{},{:e},{:e},{:e},{}",
                    c.x,
                    c.y,
                    self.bx[k],
                    self.by[k],
                    self.magnitude(k),
                    u8::from(self.mask[k])
                )?;
            }
        }
        Ok(())
    }

    /// Binary dump: magic `FGRD`, version, `nx`, `ny` (u32 LE), bounds
    /// (4 x f64 LE), `Bx` and `By` (f64 LE), then one mask byte per cell.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(FGRD_MAGIC)?;
        out.write_all(&FGRD_VERSION.to_le_bytes())?;
        out.write_all(&(self.nx as u32).to_le_bytes())?;
        out.write_all(&(self.ny as u32).to_le_bytes())?;
        let b = &self.bounds;
        for v in [b.x_min, b.x_max, b.y_min, b.y_max].iter().chain(&self.bx).chain(&self.by) {
            out.write_all(&v.to_le_bytes())?;
        }
        let mask: Vec<u8> = self.mask.iter().map(|&m| u8::from(m)).collect();
        out.write_all(&mask)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| FluxError::Format("truncated grid header".into()))?;
        if &magic != FGRD_MAGIC {
            return Err(FluxError::Format("not a field grid (bad magic)".into()));
        }
        let mut u = [0u8; 4];
        let mut read_u32 = |input: &mut R| -> Result<u32> {
            input.read_exact(&mut u).map_err(|_| FluxError::Format("truncated grid header".into()))?;
            Ok(u32::from_le_bytes(u))
        };
        let version = read_u32(&mut input)?;
        if version != FGRD_VERSION {
            return Err(FluxError::Format(format!("unsupported grid version {version}")));
        }
        let nx = read_u32(&mut input)? as usize;
        let ny = read_u32(&mut input)? as usize;
        if nx == 0 || ny == 0 || nx.checked_mul(ny).is_none_or(|n| n > 1 << 28) {
            return Err(FluxError::Format(format!("implausible grid size {nx}x{ny}")));
        }
        let n = nx * ny;
        let mut buf = vec![0u8; 8 * (4 + 2 * n)];
        input.read_exact(&mut buf).map_err(|_| FluxError::Format("truncated grid data".into()))?;
        let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let bounds = DomainBounds::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| FluxError::Format(e.to_string()))?;
        let mut mask = vec![0u8; n];
        input.read_exact(&mut mask).map_err(|_| FluxError::Format("truncated grid mask".into()))?;
        if mask.iter().any(|&m| m > 1) {
            return Err(FluxError::Format("mask bytes must be 0 or 1".into()));
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(FluxError::Format(format!("{} trailing bytes after grid", rest.len())));
        }
        Ok(Self {
            bounds,
            nx,
            ny,
            bx: vals[4..4 + n].to_vec(),
            by: vals[4 + n..].to_vec(),
            mask: mask.into_iter().map(|m| m == 1).collect(),
        })
    }
}

impl VectorField for FieldGrid {
    fn sample(&self, points: &[Vec2]) -> Result<Vec<Vec2>> {
        points.iter().map(|&p| self.interpolate(p)).collect()
    }
}

/// Statistics of a finished reference solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    /// SOR sweeps per outer (saturation) round.
    pub sweeps: Vec<usize>,
    pub final_residual: f64,
    /// Nodes whose permeability changed in the last saturation round.
    pub last_mu_changes: usize,
}

/// Node grid with its discrete operator.
struct NodeSystem {
    n: usize,
    hx: f64,
    hy: f64,
    /// Reluctivity 1/mu at each node.
    nu: Vec<f64>,
    /// Current through each node's dual cell.
    source: Vec<f64>,
    az: Vec<f64>,
}

impl NodeSystem {
    fn stride(&self) -> usize {
        self.n + 1
    }

    fn node(&self, bounds: &DomainBounds, i: usize, j: usize) -> Vec2 {
        Vec2::new(bounds.x_min + i as f64 * self.hx, bounds.y_min + j as f64 * self.hy)
    }

    /// Face coefficients `(left, right, down, up)` of node `k`.
    #[inline]
    fn coeffs(&self, k: usize) -> (f64, f64, f64, f64) {
        let s = self.stride();
        let harm = |a: f64, b: f64| 2.0 * a * b / (a + b);
        let (cx, cy) = (self.hy / self.hx, self.hx / self.hy);
        let c = self.nu[k];
        (
            cx * harm(c, self.nu[k - 1]),
            cx * harm(c, self.nu[k + 1]),
            cy * harm(c, self.nu[k - s]),
            cy * harm(c, self.nu[k + s]),
        )
    }

    /// Residual `I + sum c (A_nb - A_c)` at interior node `k`. Neighbour
    /// pairs are summed first so mirror images add up bit-identically.
    #[inline]
    fn residual_at(&self, k: usize, c: (f64, f64, f64, f64)) -> f64 {
        let s = self.stride();
        let a = &self.az;
        let horiz = c.0 * a[k - 1] + c.1 * a[k + 1];
        let vert = c.2 * a[k - s] + c.3 * a[k + s];
        self.source[k] + (horiz + vert) - ((c.0 + c.1) + (c.2 + c.3)) * a[k]
    }

    fn relative_residual(&self, coeffs: &[(f64, f64, f64, f64)], source_norm: f64) -> f64 {
        let s = self.stride();
        let mut sum = 0.0;
        for j in 1..self.n {
            for i in 1..self.n {
                let k = j * s + i;
                let r = self.residual_at(k, coeffs[k]);
                sum += r * r;
            }
        }
        sum.sqrt() / source_norm
    }

    /// Red-black SOR until the relative residual drops below `tol`.
    fn solve(&mut self, cfg: &FdConfig) -> Result<(usize, f64)> {
        let s = self.stride();
        let source_norm = self.source.iter().map(|v| v * v).sum::<f64>().sqrt();
        if source_norm == 0.0 {
            self.az.iter_mut().for_each(|v| *v = 0.0);
            return Ok((0, 0.0));
        }
        let mut coeffs = vec![(0.0, 0.0, 0.0, 0.0); self.az.len()];
        for j in 1..self.n {
            for i in 1..self.n {
                coeffs[j * s + i] = self.coeffs(j * s + i);
            }
        }
        let omega = cfg.relaxation_omega;
        let mut residual = self.relative_residual(&coeffs, source_norm);
        let mut sweeps = 0;
        while residual > cfg.tolerance {
            if sweeps >= cfg.max_iterations {
                return Err(FluxError::Solver { iterations: sweeps, residual });
            }
            for color in 0..2 {
                for j in 1..self.n {
                    let start = 1 + (j + 1 + color) % 2;
                    for i in (start..self.n).step_by(2) {
                        let k = j * s + i;
                        let c = coeffs[k];
                        let diag = (c.0 + c.1) + (c.2 + c.3);
                        let r = self.residual_at(k, c);
                        self.az[k] += omega * r / diag;
                    }
                }
            }
            sweeps += 1;
            if sweeps % 10 == 0 || sweeps >= cfg.max_iterations {
                residual = self.relative_residual(&coeffs, source_norm);
                if !residual.is_finite() {
                    return Err(FluxError::Numeric(format!("reference solve diverged after {sweeps} sweeps")));
                }
            }
        }
        Ok((sweeps, residual))
    }

    /// Cell-centred curl of `az`.
    fn field(&self, bounds: DomainBounds) -> FieldGrid {
        let n = self.n;
        let s = self.stride();
        let mut grid = FieldGrid::zeros(bounds, n, n).expect("n >= 1");
        let a = &self.az;
        for j in 0..n {
            for i in 0..n {
                let k = j * s + i;
                let dy = (a[k + s] - a[k]) + (a[k + s + 1] - a[k + 1]);
                let dx = (a[k + 1] - a[k]) + (a[k + s + 1] - a[k + s]);
                grid.bx[j * n + i] = dy / (2.0 * self.hy);
                grid.by[j * n + i] = -dx / (2.0 * self.hx);
            }
        }
        grid
    }
}

/// Current through every node's dual cell, from the uniform disk density
/// of each wire supersampled `SUPERSAMPLE`^2 times per cell and rescaled
/// so each wire carries its exact current.
const SUPERSAMPLE: usize = 8;

fn rasterize_sources(scene: &SceneConfig, sys: &NodeSystem) -> Vec<f64> {
    let s = sys.stride();
    let mut total = vec![0.0; s * s];
    let a = scene.singularity_radius;
    for wire in &scene.wires {
        let mut part = vec![0.0; s * s];
        let (lo_i, hi_i) = node_range(wire.position.x - a, wire.position.x + a, scene.bounds.x_min, sys.hx, sys.n);
        let (lo_j, hi_j) = node_range(wire.position.y - a, wire.position.y + a, scene.bounds.y_min, sys.hy, sys.n);
        let mut sum = 0.0;
        for j in lo_j..=hi_j {
            for i in lo_i..=hi_i {
                let c = sys.node(&scene.bounds, i, j);
                let mut hits = 0usize;
                for sj in 0..SUPERSAMPLE {
                    for si in 0..SUPERSAMPLE {
                        let ox = ((si as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5) * sys.hx;
                        let oy = ((sj as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5) * sys.hy;
                        let d = Vec2::new(c.x + ox, c.y + oy) - wire.position;
                        if d.dot(d) < a * a {
                            hits += 1;
                        }
                    }
                }
                part[j * s + i] = hits as f64;
                sum += hits as f64;
            }
        }
        if sum == 0.0 {
            // disk smaller than the supersampling: give it to the nearest node
            let i = (((wire.position.x - scene.bounds.x_min) / sys.hx).round() as usize).clamp(1, sys.n - 1);
            let j = (((wire.position.y - scene.bounds.y_min) / sys.hy).round() as usize).clamp(1, sys.n - 1);
            part[j * s + i] = 1.0;
            sum = 1.0;
        }
        for (t, p) in total.iter_mut().zip(&part) {
            *t += wire.current * p / sum;
        }
    }
    // boundary nodes are fixed, so current there is dropped
    for j in 0..s {
        for i in 0..s {
            if i == 0 || j == 0 || i == sys.n || j == sys.n {
                total[j * s + i] = 0.0;
            }
        }
    }
    total
}

fn node_range(lo: f64, hi: f64, origin: f64, h: f64, n: usize) -> (usize, usize) {
    let a = (((lo - origin) / h).floor() - 1.0).max(0.0) as usize;
    let b = ((((hi - origin) / h).ceil() + 1.0).max(0.0) as usize).min(n);
    (a.min(n), b)
}

fn has_saturation(scene: &SceneConfig) -> bool {
    scene.regions.iter().any(|r| r.b_sat.is_finite() && r.mu_sat != r.mu_unsat)
}

/// Solves for the reference field; see `solve_reference_stats`.
pub fn solve_reference(scene: &SceneConfig, cfg: &FdConfig) -> Result<FieldGrid> {
    Ok(solve_reference_stats(scene, cfg)?.0)
}

/// Solves the vector-potential problem on `grid_n`^2 cells. With saturable
/// materials the permeability is re-evaluated from the previous field and
/// the solve repeated (warm-started) up to `saturation_outer_iterations`
/// times or until no node changes state.
pub fn solve_reference_stats(scene: &SceneConfig, cfg: &FdConfig) -> Result<(FieldGrid, SolveStats)> {
    cfg.validate()?;
    scene.validate()?;
    let n = cfg.grid_n;
    let bounds = scene.bounds;
    let mut sys = NodeSystem {
        n,
        hx: bounds.width() / n as f64,
        hy: bounds.height() / n as f64,
        nu: Vec::new(),
        source: Vec::new(),
        az: vec![0.0; (n + 1) * (n + 1)],
    };
    let s = sys.stride();
    let nodes: Vec<Vec2> = (0..s).flat_map(|j| (0..s).map(move |i| (i, j))).map(|(i, j)| sys.node(&bounds, i, j)).collect();
    // unsaturated start
    sys.nu = nodes.iter().map(|&p| 1.0 / scene.mu_unchecked(p, 0.0)).collect();
    sys.source = rasterize_sources(scene, &sys);

    let mut stats = SolveStats { sweeps: Vec::new(), final_residual: 0.0, last_mu_changes: 0 };
    let rounds = if has_saturation(scene) { cfg.saturation_outer_iterations.max(1) } else { 1 };
    let mut grid = FieldGrid::zeros(bounds, n, n)?;
    for round in 0..rounds {
        let (sweeps, residual) = sys.solve(cfg)?;
        stats.sweeps.push(sweeps);
        stats.final_residual = residual;
        grid = sys.field(bounds);
        if round + 1 == rounds {
            break;
        }
        let b_nodes = node_magnitudes(&grid);
        let mut changes = 0;
        for (k, p) in nodes.iter().enumerate() {
            let nu = 1.0 / scene.mu_unchecked(*p, b_nodes[k]);
            if nu != sys.nu[k] {
                sys.nu[k] = nu;
                changes += 1;
            }
        }
        stats.last_mu_changes = changes;
        if changes == 0 {
            break;
        }
    }
    grid.mask_wires(scene);
    Ok((grid, stats))
}

/// |B| at nodes as the mean over the adjacent cells.
fn node_magnitudes(grid: &FieldGrid) -> Vec<f64> {
    let n = grid.nx;
    let s = n + 1;
    let mut out = vec![0.0; s * s];
    for j in 0..s {
        for i in 0..s {
            let mut sum = 0.0;
            let mut count = 0.0;
            for (ci, cj) in [(i.wrapping_sub(1), j.wrapping_sub(1)), (i, j.wrapping_sub(1)), (i.wrapping_sub(1), j), (i, j)] {
                if ci < n && cj < n {
                    sum += grid.magnitude(cj * n + ci);
                    count += 1.0;
                }
            }
            out[j * s + i] = sum / count;
        }
    }
    out
}

/// Divergence at interior nodes from the four surrounding cells; it
/// vanishes up to rounding for any field built as the discrete curl above.
pub fn discrete_divergence(grid: &FieldGrid) -> Vec<f64> {
    let (hx, hy) = grid.cell_size();
    let nx = grid.nx;
    let mut out = Vec::with_capacity(grid.nx.saturating_sub(1) * grid.ny.saturating_sub(1));
    for j in 1..grid.ny {
        for i in 1..grid.nx {
            let c = |ci: usize, cj: usize| cj * nx + ci;
            let (sw, se, nw, ne) = (c(i - 1, j - 1), c(i, j - 1), c(i - 1, j), c(i, j));
            let dbx = ((grid.bx[se] - grid.bx[sw]) + (grid.bx[ne] - grid.bx[nw])) / (2.0 * hx);
            let dby = ((grid.by[nw] - grid.by[sw]) + (grid.by[ne] - grid.by[se])) / (2.0 * hy);
            out.push(dbx + dby);
        }
    }
    out
}
