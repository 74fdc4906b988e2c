// Multiresolution hash-grid encoding of points in the unit square.
//
// Level l has resolution N_l = floor(N_min * b^l). A point is scaled by N_l,
// the four vertices of its cell are looked up (directly when the level's
// (N_l + 1)^2 vertices fit the table, through a spatial hash otherwise) and
// their feature rows are blended bilinearly. Level outputs are concatenated,
// optionally followed by the raw coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};
use crate::geom::Vec2;

pub const HASH_PRIME_X: u64 = 1;
pub const HASH_PRIME_Y: u64 = 2_654_435_761;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub append_raw_coords: bool,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            features_per_level: 2,
            log2_table_size: 14,
            base_resolution: 16,
            growth_factor: 1.5,
            append_raw_coords: true,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.features_per_level < 1 {
            return Err(FluxError::Config("encoder needs at least one level and one feature".into()));
        }
        if self.log2_table_size < 1 || self.log2_table_size > 26 {
            return Err(FluxError::Config(format!("log2_table_size {} out of range [1, 26]", self.log2_table_size)));
        }
        if self.base_resolution < 2 {
            return Err(FluxError::Config("base_resolution must be at least 2".into()));
        }
        if !(self.growth_factor > 1.0 && self.growth_factor.is_finite()) {
            return Err(FluxError::Config(format!("growth_factor must exceed 1 (got {})", self.growth_factor)));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor() as usize
    }

    /// Whether a level addresses its vertices without hashing.
    pub fn is_direct(&self, level: usize) -> bool {
        let n = self.resolution(level) + 1;
        n * n <= self.table_size()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level + if self.append_raw_coords { 2 } else { 0 }
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size() * self.features_per_level
    }

    /// Row of vertex `(i, j)` at `level`.
    pub fn vertex_row(&self, level: usize, i: u64, j: u64) -> usize {
        let t = self.table_size() as u64;
        if self.is_direct(level) {
            let stride = self.resolution(level) as u64 + 1;
            (i + j * stride) as usize
        } else {
            spatial_hash(i, j, t)
        }
    }
}

/// `(i * pi1 XOR j * pi2) mod T` for a power-of-two table size `T`.
pub fn spatial_hash(i: u64, j: u64, table_size: u64) -> usize {
    debug_assert!(table_size.is_power_of_two());
    ((i.wrapping_mul(HASH_PRIME_X) ^ j.wrapping_mul(HASH_PRIME_Y)) & (table_size - 1)) as usize
}

/// Feature tables, level-major: entry `(level, row, f)` lives at
/// `(level * T + row) * F + f`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    pub cfg: HashGridConfig,
    pub tables: Vec<f64>,
}

/// One interpolation corner: flat row offset into `tables` and its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub offset: usize,
    pub weight: f64,
}

/// Gradient rows touched by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad {
    pub level: usize,
    pub row: usize,
    pub grad: Vec<f64>,
}

impl HashGrid {
    pub const INIT_SCALE: f64 = 1e-4;

    pub fn zeros(cfg: HashGridConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, tables: vec![0.0; cfg.param_count()] })
    }

    /// Tables drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn init<R: Rng + ?Sized>(cfg: HashGridConfig, rng: &mut R) -> Result<Self> {
        let mut grid = Self::zeros(cfg)?;
        for v in &mut grid.tables {
            *v = rng.gen_range(-Self::INIT_SCALE..=Self::INIT_SCALE);
        }
        Ok(grid)
    }

    pub fn from_tables(cfg: HashGridConfig, tables: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if tables.len() != cfg.param_count() {
            return Err(FluxError::Contract(format!(
                "expected {} table entries, got {}",
                cfg.param_count(),
                tables.len()
            )));
        }
        Ok(Self { cfg, tables })
    }

    /// Feature row `row` of `level`.
    pub fn row(&self, level: usize, row: usize) -> &[f64] {
        let f = self.cfg.features_per_level;
        let start = (level * self.cfg.table_size() + row) * f;
        &self.tables[start..start + f]
    }

    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [f64] {
        let f = self.cfg.features_per_level;
        let start = (level * self.cfg.table_size() + row) * f;
        &mut self.tables[start..start + f]
    }

    fn check_point(p: Vec2) -> Result<()> {
        if !(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0) {
            return Err(FluxError::Domain(format!("encoder input ({}, {}) outside the unit square", p.x, p.y)));
        }
        Ok(())
    }

    /// Interpolation corners of `p` at every level, four per level.
    pub fn corners(&self, p: Vec2, out: &mut [Corner]) {
        let cfg = &self.cfg;
        let f = cfg.features_per_level;
        let t = cfg.table_size();
        debug_assert_eq!(out.len(), 4 * cfg.levels);
        for level in 0..cfg.levels {
            let n = cfg.resolution(level);
            let (i0, fx) = cell_coord(p.x, n);
            let (j0, fy) = cell_coord(p.y, n);
            let base = level * t;
            let verts = [(i0, j0), (i0 + 1, j0), (i0, j0 + 1), (i0 + 1, j0 + 1)];
            let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
            for c in 0..4 {
                let (i, j) = verts[c];
                let row = cfg.vertex_row(level, i, j);
                out[4 * level + c] = Corner { offset: (base + row) * f, weight: weights[c] };
            }
        }
    }

    /// Encodes a point of the unit square given its precomputed corners.
    pub fn encode_with_corners(&self, p: Vec2, corners: &[Corner], out: &mut [f64]) {
        let cfg = &self.cfg;
        let f = cfg.features_per_level;
        for level in 0..cfg.levels {
            let slot = &mut out[level * f..(level + 1) * f];
            slot.fill(0.0);
            for c in &corners[4 * level..4 * level + 4] {
                let row = &self.tables[c.offset..c.offset + f];
                for (o, v) in slot.iter_mut().zip(row) {
                    *o += c.weight * v;
                }
            }
        }
        if cfg.append_raw_coords {
            let k = cfg.levels * f;
            out[k] = p.x;
            out[k + 1] = p.y;
        }
    }

    pub fn encode(&self, p: Vec2) -> Result<Vec<f64>> {
        Self::check_point(p)?;
        let mut corners = vec![Corner { offset: 0, weight: 0.0 }; 4 * self.cfg.levels];
        self.corners(p, &mut corners);
        let mut out = vec![0.0; self.cfg.output_dim()];
        self.encode_with_corners(p, &corners, &mut out);
        Ok(out)
    }

    /// Scatters `upstream` (gradient w.r.t. the encoding) into a dense
    /// gradient laid out like `tables`.
    pub fn accumulate_backward(&self, corners: &[Corner], upstream: &[f64], grad: &mut [f64]) {
        let f = self.cfg.features_per_level;
        for level in 0..self.cfg.levels {
            let up = &upstream[level * f..(level + 1) * f];
            for c in &corners[4 * level..4 * level + 4] {
                if c.weight == 0.0 {
                    continue;
                }
                for (g, u) in grad[c.offset..c.offset + f].iter_mut().zip(up) {
                    *g += c.weight * u;
                }
            }
        }
    }

    /// Sparse parameter gradient of `upstream . encode(p)`: one entry per
    /// corner with non-zero weight, at most `4 L` rows. Rows that coincide
    /// (hash collisions) are listed separately and must be summed.
    pub fn encode_backward(&self, p: Vec2, upstream: &[f64]) -> Result<Vec<RowGrad>> {
        Self::check_point(p)?;
        if upstream.len() != self.cfg.output_dim() {
            return Err(FluxError::Contract(format!(
                "upstream gradient has {} entries, encoding has {}",
                upstream.len(),
                self.cfg.output_dim()
            )));
        }
        let f = self.cfg.features_per_level;
        let t = self.cfg.table_size();
        let mut corners = vec![Corner { offset: 0, weight: 0.0 }; 4 * self.cfg.levels];
        self.corners(p, &mut corners);
        let mut rows = Vec::with_capacity(4 * self.cfg.levels);
        for level in 0..self.cfg.levels {
            let up = &upstream[level * f..(level + 1) * f];
            for c in &corners[4 * level..4 * level + 4] {
                if c.weight == 0.0 {
                    continue;
                }
                let flat_row = c.offset / f;
                rows.push(RowGrad {
                    level,
                    row: flat_row - level * t,
                    grad: up.iter().map(|u| c.weight * u).collect(),
                });
            }
        }
        Ok(rows)
    }
}

/// Cell index and fractional offset of coordinate `u` in `[0, 1]` on a grid
/// of `n` cells; `u = 1` falls in the last cell with offset 1.
#[inline]
fn cell_coord(u: f64, n: usize) -> (u64, f64) {
    let x = u * n as f64;
    let i = (x.floor() as usize).min(n - 1);
    (i as u64, x - i as f64)
}
