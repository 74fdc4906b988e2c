// Rasterization, grid-vs-grid metrics, the horseshoe flux checks and image
// export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};
use crate::field::VectorField;
use crate::geom::{Rect, Vec2};
use crate::refsolver::FieldGrid;
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Raster resolution used for comparison and images.
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Inner corner must exceed its outer partner by this factor.
    pub corner_ratio: f64,
    /// Gap tips must exceed the gap centre by this factor.
    pub vshape_ratio: f64,
    /// Minimum iron-to-air mean |B| ratio.
    pub containment_min: f64,
    /// Probe disk radius, in cells.
    pub probe_radius_cells: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_nx: 128,
            grid_ny: 128,
            corner_ratio: 2.0,
            vshape_ratio: 1.5,
            containment_min: 10.0,
            probe_radius_cells: 1.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_nx == 0 || self.grid_ny == 0 {
            return Err(FluxError::Config("eval grid must have at least one cell per side".into()));
        }
        for (name, v) in [
            ("corner_ratio", self.corner_ratio),
            ("vshape_ratio", self.vshape_ratio),
            ("containment_min", self.containment_min),
            ("probe_radius_cells", self.probe_radius_cells),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(FluxError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Samples `field` at every cell centre; cells inside a wire's singularity
/// disk keep their value but are flagged in the mask.
pub fn rasterize<F: VectorField + ?Sized>(field: &F, scene: &SceneConfig, nx: usize, ny: usize) -> Result<FieldGrid> {
    let mut grid = FieldGrid::zeros(scene.bounds, nx, ny)?;
    let values = field.sample(&grid.centers())?;
    for (k, b) in values.into_iter().enumerate() {
        grid.bx[k] = b.x;
        grid.by[k] = b.y;
    }
    grid.mask_wires(scene);
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub relative_l2: f64,
    pub pearson: f64,
    /// Number of cells that entered the metrics.
    pub cells: usize,
}

/// Compares `|B|` of `a` against the reference `b` over cells unmasked in
/// both grids.
pub fn compare(a: &FieldGrid, b: &FieldGrid) -> Result<Metrics> {
    if a.nx != b.nx || a.ny != b.ny || a.bounds != b.bounds {
        return Err(FluxError::Contract(format!(
            "grid shapes differ: {}x{} over {:?} vs {}x{} over {:?}",
            a.nx, a.ny, a.bounds, b.nx, b.ny, b.bounds
        )));
    }
    let pairs: Vec<(f64, f64)> =
        (0..a.len()).filter(|&k| !a.mask[k] && !b.mask[k]).map(|k| (a.magnitude(k), b.magnitude(k))).collect();
    if pairs.is_empty() {
        return Err(FluxError::Empty("every cell is masked".into()));
    }
    let n = pairs.len() as f64;
    let (mut diff2, mut ref2) = (0.0, 0.0);
    let (mut ma, mut mb) = (0.0, 0.0);
    for &(x, y) in &pairs {
        diff2 += (x - y) * (x - y);
        ref2 += y * y;
        ma += x;
        mb += y;
    }
    ma /= n;
    mb /= n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let relative_l2 = if ref2 > 0.0 {
        (diff2 / ref2).sqrt()
    } else if diff2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    // Constant fields have no variance; call them perfectly correlated only
    // when they coincide.
    let pearson = if saa > 0.0 && sbb > 0.0 {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    } else if diff2 == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(Metrics { relative_l2, pearson, cells: pairs.len() })
}

/// Rectangles of a horseshoe-family scene, recovered from its regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorseshoeLayout {
    pub core: Rect,
    pub window: Rect,
    pub gap: Rect,
}

fn is_iron(scene: &SceneConfig, p: Vec2) -> bool {
    scene.region_at(p).map(|r| r.mu_unsat > 1.0).unwrap_or(false)
}

impl HorseshoeLayout {
    /// The core is the first permeable region; the window is an air region
    /// strictly inside it; the gap is an air region joining the window to
    /// the core's outer edge.
    pub fn from_scene(scene: &SceneConfig) -> Result<Self> {
        let core = scene
            .regions
            .iter()
            .find(|r| r.mu_unsat > 1.0)
            .map(|r| r.rect)
            .ok_or_else(|| FluxError::Contract("scene has no iron region".into()))?;
        let air: Vec<Rect> = scene.regions.iter().filter(|r| r.mu_unsat <= 1.0).map(|r| r.rect).collect();
        let inside = |r: &Rect| r.x0 > core.x0 && r.x1 < core.x1 && r.y0 > core.y0 && r.y1 < core.y1;
        let window = *air.iter().find(|r| inside(r)).ok_or_else(|| FluxError::Contract("scene has no window".into()))?;
        let touches = |a: &Rect, b: &Rect| a.x0 <= b.x1 && b.x0 <= a.x1 && a.y0 <= b.y1 && b.y0 <= a.y1;
        let on_edge = |r: &Rect| r.x0 <= core.x0 || r.x1 >= core.x1 || r.y0 <= core.y0 || r.y1 >= core.y1;
        let gap = *air
            .iter()
            .find(|r| !inside(r) && on_edge(r) && touches(r, &window))
            .ok_or_else(|| FluxError::Contract("scene has no air gap".into()))?;
        Ok(Self { core, window, gap })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualitativeReport {
    pub corner_cutting: bool,
    pub airgap_vshape: bool,
    pub containment_ratio: f64,
    /// Smallest inner/outer ratio over the four corner pairs.
    pub corner_ratio: f64,
    /// Mean |B| at the gap tips over |B| at the gap centre.
    pub vshape_ratio: f64,
}

impl QualitativeReport {
    pub fn passes(&self, cfg: &EvalConfig) -> bool {
        self.corner_cutting && self.airgap_vshape && self.containment_ratio >= cfg.containment_min
    }
}

/// Mean |B| over unmasked cells whose centre lies within `radius` of `c`
/// and satisfies `keep`; falls back to the cell containing `c` when the
/// disk catches no centre.
fn disk_mean_where(grid: &FieldGrid, c: Vec2, radius: f64, keep: impl Fn(Vec2) -> bool) -> f64 {
    let (hx, hy) = grid.cell_size();
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let i0 = clamp(((c.x - radius - grid.bounds.x_min) / hx).floor(), grid.nx);
    let i1 = clamp(((c.x + radius - grid.bounds.x_min) / hx).ceil(), grid.nx);
    let j0 = clamp(((c.y - radius - grid.bounds.y_min) / hy).floor(), grid.ny);
    let j1 = clamp(((c.y + radius - grid.bounds.y_min) / hy).ceil(), grid.ny);
    let (mut sum, mut n) = (0.0, 0usize);
    for j in j0..=j1 {
        for i in i0..=i1 {
            let k = j * grid.nx + i;
            let p = grid.cell_center(i, j);
            if !grid.mask[k] && (p - c).norm() <= radius && keep(p) {
                sum += grid.magnitude(k);
                n += 1;
            }
        }
    }
    if n > 0 {
        return sum / n as f64;
    }
    let i = clamp(((c.x - grid.bounds.x_min) / hx).floor(), grid.nx);
    let j = clamp(((c.y - grid.bounds.y_min) / hy).floor(), grid.ny);
    grid.magnitude(j * grid.nx + i)
}

fn disk_mean(grid: &FieldGrid, c: Vec2, radius: f64) -> f64 {
    disk_mean_where(grid, c, radius, |_| true)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        // no field anywhere: nothing stands out
        1.0
    }
}

/// A gap corner is an iron tip when some quadrant next to it is iron.
fn is_iron_tip(scene: &SceneConfig, t: Vec2, h: f64) -> bool {
    let d = 0.25 * h;
    [(d, d), (-d, d), (-d, -d), (d, -d)].iter().any(|&(dx, dy)| is_iron(scene, t + Vec2::new(dx, dy)))
}

/// Checks the three flux features of a horseshoe magnet on a grid:
///
/// * corner cutting: at each corner of the window, in the iron, |B| is more
///   than `corner_ratio` times |B| at the matching outer corner of the core;
/// * air-gap v-shape: in the iron at the pole tips bounding the gap, |B|
///   exceeds `vshape_ratio` times |B| at the gap centre;
/// * containment: mean |B| over iron cells over mean |B| over air cells,
///   leaving out the gap and the cells near a wire.
pub fn qualitative_checks(grid: &FieldGrid, scene: &SceneConfig, cfg: &EvalConfig) -> Result<QualitativeReport> {
    cfg.validate()?;
    let layout = HorseshoeLayout::from_scene(scene)?;
    let (hx, hy) = grid.cell_size();
    let radius = cfg.probe_radius_cells * hx.max(hy);
    // Disks sit diagonally inside the iron, just touching both edges.
    let off = radius;

    let (w, c) = (layout.window, layout.core);
    let pairs = [
        (Vec2::new(w.x0 - off, w.y0 - off), Vec2::new(c.x0 + off, c.y0 + off)),
        (Vec2::new(w.x1 + off, w.y0 - off), Vec2::new(c.x1 - off, c.y0 + off)),
        (Vec2::new(w.x1 + off, w.y1 + off), Vec2::new(c.x1 - off, c.y1 - off)),
        (Vec2::new(w.x0 - off, w.y1 + off), Vec2::new(c.x0 + off, c.y1 - off)),
    ];
    let corner_ratio = pairs
        .iter()
        .map(|&(inner, outer)| ratio(disk_mean(grid, inner, radius), disk_mean(grid, outer, radius)))
        .fold(f64::INFINITY, f64::min);

    // Each corner of the gap rectangle is the tip of a pole face; the tip
    // disk only averages the iron cells, where the flux crowds together.
    let g = layout.gap;
    let tips: Vec<Vec2> = g.corners().into_iter().filter(|&t| is_iron_tip(scene, t, hx.min(hy))).collect();
    if tips.is_empty() {
        return Err(FluxError::Contract("air gap has no iron corners".into()));
    }
    let tip = tips.iter().map(|&t| disk_mean_where(grid, t, radius, |p| is_iron(scene, p))).sum::<f64>() / tips.len() as f64;
    let vshape_ratio = ratio(tip, disk_mean(grid, g.center(), radius));

    let near_wire = 2.0 * scene.singularity_radius;
    let (mut iron, mut ni, mut air, mut na) = (0.0, 0usize, 0.0, 0usize);
    for (k, p) in grid.centers().into_iter().enumerate() {
        if grid.mask[k] {
            continue;
        }
        if is_iron(scene, p) {
            iron += grid.magnitude(k);
            ni += 1;
        } else if !g.contains(p) && scene.wires.iter().all(|wr| (p - wr.position).norm() > near_wire) {
            air += grid.magnitude(k);
            na += 1;
        }
    }
    if ni == 0 || na == 0 {
        return Err(FluxError::Empty("grid has no iron or no air cells to compare".into()));
    }
    let containment_ratio = ratio(iron / ni as f64, air / na as f64);

    Ok(QualitativeReport {
        corner_cutting: corner_ratio > cfg.corner_ratio,
        airgap_vshape: vshape_ratio > cfg.vshape_ratio,
        containment_ratio,
        corner_ratio,
        vshape_ratio,
    })
}

/// Blue -> white -> red over `t` in `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let to_u8 = |v: f64| (v * 255.0).round() as u8;
    if t < 0.5 {
        let s = 2.0 * t;
        [to_u8(s), to_u8(s), 255]
    } else {
        let s = 2.0 * (1.0 - t);
        [255, to_u8(s), to_u8(s)]
    }
}

/// Binary PPM of `|B|`, scaled over the unmasked min/max; masked cells are
/// black. The top image row is the largest `y`.
pub fn write_ppm<W: Write>(grid: &FieldGrid, mut out: W) -> Result<()> {
    let mags: Vec<f64> = (0..grid.len()).map(|k| grid.magnitude(k)).collect();
    let (lo, hi) = mags
        .iter()
        .zip(&grid.mask)
        .filter(|(_, &m)| !m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(out, "P6\n{} {}\n255\n", grid.nx, grid.ny)?;
    let mut pixels = Vec::with_capacity(3 * grid.len());
    for j in (0..grid.ny).rev() {
        for i in 0..grid.nx {
            let k = j * grid.nx + i;
            let rgb = if grid.mask[k] { [0, 0, 0] } else { colormap((mags[k] - lo) / span) };
            pixels.extend_from_slice(&rgb);
        }
    }
    out.write_all(&pixels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;
    use crate::scene::{horseshoe_scene, single_wire_scene, DomainBounds};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, n: usize) -> FieldGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = FieldGrid::zeros(DomainBounds::unit(), n, n).unwrap();
        for k in 0..g.len() {
            g.bx[k] = rng.gen_range(-1.0..1.0);
            g.by[k] = rng.gen_range(-1.0..1.0);
        }
        g
    }

    #[test]
    fn zero_field_rasterizes_to_zero() {
        let scene = horseshoe_scene();
        let g = rasterize(&FnField(|_| Vec2::new(0.0, 0.0)), &scene, 16, 12).unwrap();
        assert_eq!((g.nx, g.ny), (16, 12));
        assert!(g.bx.iter().chain(&g.by).all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_samples_the_centre() {
        let scene = single_wire_scene();
        let g = rasterize(&FnField(|p| p), &scene, 1, 1).unwrap();
        assert_eq!(g.value(0), Vec2::new(0.5, 0.5));
    }

    #[test]
    fn mask_counts_cells_inside_wire_disks() {
        let scene = horseshoe_scene();
        let g = rasterize(&FnField(|p| p), &scene, 100, 100).unwrap();
        let mut expected = 0;
        for j in 0..100 {
            for i in 0..100 {
                let c = Vec2::new((i as f64 + 0.5) / 100.0, (j as f64 + 0.5) / 100.0);
                if scene.wires.iter().any(|w| (c - w.position).norm() <= scene.singularity_radius) {
                    expected += 1;
                }
            }
        }
        assert!(expected > 0);
        assert_eq!(g.mask.iter().filter(|&&m| m).count(), expected);
    }

    #[test]
    fn rasterized_values_reproduce_pointwise_queries() {
        let scene = single_wire_scene();
        let f = FnField(|p: Vec2| Vec2::new(p.x.sin() * p.y, p.y.exp()));
        let g = rasterize(&f, &scene, 23, 17).unwrap();
        for (k, c) in g.centers().into_iter().enumerate() {
            if !g.mask[k] {
                assert_eq!(g.value(k), f.sample(&[c]).unwrap()[0]);
            }
        }
    }

    #[test]
    fn identical_grids_compare_perfectly() {
        let g = random_grid(1, 32);
        let m = compare(&g, &g).unwrap();
        assert_eq!(m.relative_l2, 0.0);
        assert!((m.pearson - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_reference_gives_half_error() {
        let g = random_grid(2, 32);
        let mut twice = g.clone();
        twice.bx.iter_mut().chain(twice.by.iter_mut()).for_each(|v| *v *= 2.0);
        let m = compare(&g, &twice).unwrap();
        assert!((m.relative_l2 - 0.5).abs() < 1e-12);
        assert!((m.pearson - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_random_grids_are_uncorrelated() {
        let m = compare(&random_grid(3, 64), &random_grid(4, 64)).unwrap();
        assert!(m.pearson.abs() < 0.1, "{}", m.pearson);
    }

    #[test]
    fn shape_mismatch_and_full_mask_are_errors() {
        let a = random_grid(5, 8);
        let b = random_grid(5, 9);
        assert!(matches!(compare(&a, &b), Err(FluxError::Contract(_))));
        let mut c = a.clone();
        c.mask.iter_mut().for_each(|m| *m = true);
        assert!(matches!(compare(&a, &c), Err(FluxError::Empty(_))));
    }

    #[test]
    fn union_mask_is_applied() {
        let a = random_grid(6, 8);
        let mut b = a.clone();
        b.bx[3] += 100.0;
        b.mask[3] = true;
        assert_eq!(compare(&a, &b).unwrap().relative_l2, 0.0);
        assert_eq!(compare(&a, &b).unwrap().cells, 63);
    }

    #[test]
    fn uniform_field_cuts_no_corners() {
        let scene = horseshoe_scene();
        let g = rasterize(&FnField(|_| Vec2::new(0.3, -0.4)), &scene, 64, 64).unwrap();
        let q = qualitative_checks(&g, &scene, &EvalConfig::default()).unwrap();
        assert!(!q.corner_cutting);
        assert!(!q.airgap_vshape);
        assert!((q.corner_ratio - 1.0).abs() < 1e-12);
        assert!((q.containment_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scene_without_gap_is_rejected() {
        let mut scene = horseshoe_scene();
        scene.regions.truncate(2);
        let g = FieldGrid::zeros(scene.bounds, 8, 8).unwrap();
        assert!(matches!(qualitative_checks(&g, &scene, &EvalConfig::default()), Err(FluxError::Contract(_))));
        assert!(matches!(
            qualitative_checks(&g, &single_wire_scene(), &EvalConfig::default()),
            Err(FluxError::Contract(_))
        ));
    }

    #[test]
    fn layout_matches_the_horseshoe_constants() {
        use crate::scene::horseshoe::{CORE, GAP, WINDOW};
        let l = HorseshoeLayout::from_scene(&horseshoe_scene()).unwrap();
        assert_eq!((l.core, l.window, l.gap), (CORE, WINDOW, GAP));
    }

    #[test]
    fn ppm_has_header_and_black_mask() {
        let scene = single_wire_scene();
        let g = rasterize(&FnField(|p: Vec2| p), &scene, 40, 30).unwrap();
        let mut buf = Vec::new();
        write_ppm(&g, &mut buf).unwrap();
        let header = b"P6\n40 30\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf.len(), header.len() + 3 * 40 * 30);
        // the wire sits at the image centre
        let px = |i: usize, row: usize| &buf[header.len() + 3 * (row * 40 + i)..][..3];
        assert_eq!(px(20, 15), &[0, 0, 0]);
        assert_ne!(px(0, 0), &[0, 0, 0]);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(0.5), [255, 255, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
    }

    proptest! {
        #[test]
        fn correlation_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (random_grid(s1, 12), random_grid(s2, 12));
            let (ab, ba) = (compare(&a, &b).unwrap(), compare(&b, &a).unwrap());
            prop_assert!((ab.pearson - ba.pearson).abs() < 1e-12);
        }

        #[test]
        fn checks_are_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let scene = horseshoe_scene();
            let g = random_grid(seed, 48);
            let mut s = g.clone();
            s.bx.iter_mut().chain(s.by.iter_mut()).for_each(|v| *v *= scale);
            let cfg = EvalConfig::default();
            let (q, qs) = (qualitative_checks(&g, &scene, &cfg).unwrap(), qualitative_checks(&s, &scene, &cfg).unwrap());
            prop_assert_eq!(q.corner_cutting, qs.corner_cutting);
            prop_assert_eq!(q.airgap_vshape, qs.airgap_vshape);
            prop_assert!((q.containment_ratio - qs.containment_ratio).abs() <= 1e-9 * q.containment_ratio);
            prop_assert!((q.corner_ratio - qs.corner_ratio).abs() <= 1e-9 * q.corner_ratio);
        }
    }
}
