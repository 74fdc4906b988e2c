// Problem definition: domain bounds, permeability map with a two-value
// saturation model, and point-wire current sources.
//
// Units are normalized with mu0 = 1, so H = B / mu_r everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};
use crate::geom::{Rect, Vec2};
use crate::paths::PathSpec;

/// Distance below which a wire counts as lying on a loop.
pub const WIRE_ON_PATH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl DomainBounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, x_max, y_min, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn unit() -> Self {
        Self { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(FluxError::Config(format!("degenerate domain bounds {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn as_rect(&self) -> Rect {
        Rect::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.as_rect().contains(p)
    }

    pub fn contains_strictly(&self, p: Vec2) -> bool {
        self.as_rect().contains_strictly(p)
    }

    /// Affine map onto the unit square.
    pub fn to_unit(&self, p: Vec2) -> Vec2 {
        Vec2::new((p.x - self.x_min) / self.width(), (p.y - self.y_min) / self.height())
    }

    pub fn check(&self, p: Vec2) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(FluxError::Domain(format!("point ({}, {}) outside domain {:?}", p.x, p.y, self)))
        }
    }
}

/// Rectangle of material with a two-value B/H model: `mu_unsat` below the
/// saturation threshold `b_sat`, `mu_sat` above it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialRegion {
    pub rect: Rect,
    pub mu_unsat: f64,
    #[serde(default = "MaterialRegion::default_mu_sat")]
    pub mu_sat: f64,
    #[serde(default = "MaterialRegion::default_b_sat")]
    pub b_sat: f64,
}

impl MaterialRegion {
    pub const DEFAULT_MU_SAT: f64 = 100.0;
    pub const DEFAULT_B_SAT: f64 = 1.6;

    fn default_mu_sat() -> f64 {
        Self::DEFAULT_MU_SAT
    }

    fn default_b_sat() -> f64 {
        Self::DEFAULT_B_SAT
    }

    /// Saturating iron with the default knee.
    pub fn iron(rect: Rect, mu_unsat: f64) -> Self {
        Self { rect, mu_unsat, mu_sat: Self::DEFAULT_MU_SAT, b_sat: Self::DEFAULT_B_SAT }
    }

    /// Linear material (never saturates).
    pub fn linear(rect: Rect, mu: f64) -> Self {
        Self { rect, mu_unsat: mu, mu_sat: mu, b_sat: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rect.is_valid() {
            return Err(FluxError::Config(format!("material rectangle {:?} is degenerate", self.rect)));
        }
        if !(self.mu_unsat >= 1.0 && self.mu_sat >= 1.0 && self.mu_sat <= self.mu_unsat) {
            return Err(FluxError::Config(format!(
                "permeabilities must satisfy 1 <= mu_sat <= mu_unsat (got mu_unsat={}, mu_sat={})",
                self.mu_unsat, self.mu_sat
            )));
        }
        if !(self.b_sat > 0.0) {
            return Err(FluxError::Config(format!("b_sat must be positive (got {})", self.b_sat)));
        }
        Ok(())
    }

    pub fn mu(&self, b_magnitude: f64) -> f64 {
        if b_magnitude > self.b_sat {
            self.mu_sat
        } else {
            self.mu_unsat
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireSource {
    pub position: Vec2,
    /// Signed total current, positive out of the plane.
    pub current: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub bounds: DomainBounds,
    /// Painter's order: later regions override earlier ones.
    pub regions: Vec<MaterialRegion>,
    pub background_mu: f64,
    pub wires: Vec<WireSource>,
    pub singularity_radius: f64,
}

impl SceneConfig {
    pub fn new(
        bounds: DomainBounds,
        regions: Vec<MaterialRegion>,
        background_mu: f64,
        wires: Vec<WireSource>,
        singularity_radius: f64,
    ) -> Result<Self> {
        let scene = Self { bounds, regions, background_mu, wires, singularity_radius };
        scene.validate()?;
        Ok(scene)
    }

    pub fn default_singularity_radius(bounds: &DomainBounds) -> f64 {
        0.03 * bounds.width()
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.background_mu >= 1.0) {
            return Err(FluxError::Config(format!("background_mu must be >= 1 (got {})", self.background_mu)));
        }
        if !(self.singularity_radius > 0.0 && self.singularity_radius < 0.1 * self.bounds.diagonal()) {
            return Err(FluxError::Config(format!(
                "singularity_radius must lie in (0, {}) (got {})",
                0.1 * self.bounds.diagonal(),
                self.singularity_radius
            )));
        }
        let inner = self.bounds.as_rect();
        for (k, region) in self.regions.iter().enumerate() {
            region.validate().map_err(|e| FluxError::Config(format!("region {k}: {e}")))?;
            let r = region.rect;
            if !(r.x0 > inner.x0 && r.x1 < inner.x1 && r.y0 > inner.y0 && r.y1 < inner.y1) {
                return Err(FluxError::Config(format!("region {k} {r:?} is not strictly inside the domain")));
            }
        }
        for (k, wire) in self.wires.iter().enumerate() {
            if !wire.position.is_finite() || !wire.current.is_finite() {
                return Err(FluxError::Config(format!("wire {k} has non-finite data")));
            }
            if !self.bounds.contains_strictly(wire.position) {
                return Err(FluxError::Config(format!("wire {k} at {:?} is not strictly inside the domain", wire.position)));
            }
        }
        Ok(())
    }

    /// Topmost region containing `p`, if any.
    pub fn region_at(&self, p: Vec2) -> Option<&MaterialRegion> {
        self.regions.iter().rev().find(|r| r.rect.contains(p))
    }

    /// Relative permeability at `p` given the local flux density magnitude.
    pub fn mu_at(&self, p: Vec2, b_magnitude: f64) -> Result<f64> {
        self.bounds.check(p)?;
        if !(b_magnitude >= 0.0) {
            return Err(FluxError::Domain(format!("flux magnitude must be non-negative (got {b_magnitude})")));
        }
        Ok(self.mu_unchecked(p, b_magnitude))
    }

    /// `mu_at` without argument validation, for hot loops over points that
    /// are known to be inside the domain.
    #[inline]
    pub fn mu_unchecked(&self, p: Vec2, b_magnitude: f64) -> f64 {
        match self.region_at(p) {
            Some(region) => region.mu(b_magnitude),
            None => self.background_mu,
        }
    }

    /// Whether the region at `p` is above its saturation threshold.
    pub fn is_saturated(&self, p: Vec2, b_magnitude: f64) -> bool {
        self.region_at(p).is_some_and(|r| b_magnitude > r.b_sat && r.mu_sat != r.mu_unsat)
    }

    /// Signed current enclosed by a counter-clockwise loop, decided on the
    /// analytic shape of the loop.
    pub fn enclosed_current(&self, spec: &PathSpec) -> Result<f64> {
        let mut total = 0.0;
        for wire in &self.wires {
            let d = spec.signed_distance(wire.position);
            if d.abs() <= WIRE_ON_PATH_TOL {
                return Err(FluxError::RejectedPath(format!(
                    "wire at ({}, {}) lies on {:?}",
                    wire.position.x, wire.position.y, spec
                )));
            }
            if d < 0.0 {
                total += wire.current;
            }
        }
        Ok(total)
    }

    /// Current density of the wires smeared uniformly over their
    /// singularity disks.
    pub fn current_density(&self, p: Vec2) -> f64 {
        let a = self.singularity_radius;
        let density = 1.0 / (std::f64::consts::PI * a * a);
        self.wires
            .iter()
            .filter(|w| (p - w.position).norm() < a)
            .map(|w| w.current * density)
            .sum()
    }

    /// Whether `p` lies inside any wire's singularity disk.
    pub fn in_wire_mask(&self, p: Vec2) -> bool {
        self.wires.iter().any(|w| (p - w.position).norm() < self.singularity_radius)
    }

    pub fn total_current(&self) -> f64 {
        self.wires.iter().map(|w| w.current).sum()
    }
}

/// Geometry constants of the horseshoe electromagnet on the unit square.
pub mod horseshoe {
    use crate::geom::{Rect, Vec2};

    /// Solid iron block the core is cut from.
    pub const CORE: Rect = Rect::new(0.2, 0.2, 0.8, 0.8);
    /// Air window cut out of the block; the remaining ring is the C-core.
    pub const WINDOW: Rect = Rect::new(0.34, 0.34, 0.66, 0.66);
    /// Air gap splitting the right bar of the ring.
    pub const GAP: Rect = Rect::new(0.66, 0.45, 0.8, 0.55);
    pub const WIRE: Vec2 = Vec2::new(0.5, 0.5);
    pub const CURRENT: f64 = 0.05;
    pub const MU_IRON: f64 = 5000.0;
}

/// The horseshoe electromagnet test scene: a square iron ring with an air
/// gap in its right bar, driven by a wire in the window of the C.
pub fn horseshoe_scene() -> SceneConfig {
    let bounds = DomainBounds::unit();
    let regions = vec![
        MaterialRegion::iron(horseshoe::CORE, horseshoe::MU_IRON),
        MaterialRegion::linear(horseshoe::WINDOW, 1.0),
        MaterialRegion::linear(horseshoe::GAP, 1.0),
    ];
    let wires = vec![WireSource { position: horseshoe::WIRE, current: horseshoe::CURRENT }];
    SceneConfig::new(bounds, regions, 1.0, wires, SceneConfig::default_singularity_radius(&bounds))
        .expect("horseshoe scene is valid")
}

/// A unit wire at the center of the unit square in air.
pub fn single_wire_scene() -> SceneConfig {
    let bounds = DomainBounds::unit();
    let wires = vec![WireSource { position: bounds.center(), current: 1.0 }];
    SceneConfig::new(bounds, Vec::new(), 1.0, wires, SceneConfig::default_singularity_radius(&bounds))
        .expect("single wire scene is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::PathShape;
    use proptest::prelude::*;

    fn iron_scene(b_sat: f64) -> SceneConfig {
        let region = MaterialRegion { rect: Rect::new(0.2, 0.2, 0.6, 0.6), mu_unsat: 5000.0, mu_sat: 100.0, b_sat };
        SceneConfig::new(DomainBounds::unit(), vec![region], 1.0, vec![], 0.03).unwrap()
    }

    #[test]
    fn mu_air_iron_and_saturated() {
        let s = iron_scene(1.6);
        assert_eq!(s.mu_at(Vec2::new(0.9, 0.9), 0.0).unwrap(), 1.0);
        assert_eq!(s.mu_at(Vec2::new(0.9, 0.9), 50.0).unwrap(), 1.0);
        assert_eq!(s.mu_at(Vec2::new(0.4, 0.4), 0.0).unwrap(), 5000.0);
        assert_eq!(s.mu_at(Vec2::new(0.4, 0.4), 2.0).unwrap(), 100.0);
        assert_eq!(s.mu_at(Vec2::new(0.4, 0.4), 1.6).unwrap(), 5000.0);
    }

    #[test]
    fn infinite_b_sat_disables_saturation() {
        let s = iron_scene(f64::INFINITY);
        assert_eq!(s.mu_at(Vec2::new(0.4, 0.4), 1e12).unwrap(), 5000.0);
    }

    #[test]
    fn mu_rejects_outside_points_and_negative_b() {
        let s = iron_scene(1.6);
        assert!(matches!(s.mu_at(Vec2::new(1.2, 0.5), 0.0), Err(FluxError::Domain(_))));
        assert!(matches!(s.mu_at(Vec2::new(0.5, 0.5), -1.0), Err(FluxError::Domain(_))));
    }

    #[test]
    fn scene_validation() {
        let b = DomainBounds::unit();
        assert!(SceneConfig::new(b, vec![], 0.5, vec![], 0.03).is_err());
        assert!(SceneConfig::new(b, vec![], 1.0, vec![], 0.2).is_err());
        assert!(SceneConfig::new(b, vec![], 1.0, vec![], 0.0).is_err());
        let outside = WireSource { position: Vec2::new(1.0, 0.5), current: 1.0 };
        assert!(SceneConfig::new(b, vec![], 1.0, vec![outside], 0.03).is_err());
        let bad = MaterialRegion { rect: Rect::new(0.1, 0.1, 0.2, 0.2), mu_unsat: 10.0, mu_sat: 20.0, b_sat: 1.0 };
        assert!(SceneConfig::new(b, vec![bad], 1.0, vec![], 0.03).is_err());
        assert!(DomainBounds::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn enclosed_current_examples() {
        let mut s = single_wire_scene();
        s.wires[0].current = 2.0;
        let circle = PathSpec::new(PathShape::Circle, Vec2::new(0.5, 0.5), 0.2);
        assert_eq!(s.enclosed_current(&circle).unwrap(), 2.0);

        s.wires[0].position = Vec2::new(0.9, 0.9);
        let square = PathSpec::new(PathShape::Square, Vec2::new(0.25, 0.25), 0.25);
        assert_eq!(s.enclosed_current(&square).unwrap(), 0.0);

        s.wires = vec![
            WireSource { position: Vec2::new(0.45, 0.5), current: 1.0 },
            WireSource { position: Vec2::new(0.55, 0.5), current: -1.0 },
        ];
        assert_eq!(s.enclosed_current(&circle).unwrap(), 0.0);
    }

    #[test]
    fn wire_on_path_is_rejected() {
        let s = single_wire_scene();
        let through = PathSpec::new(PathShape::Circle, Vec2::new(0.3, 0.5), 0.2);
        assert!(matches!(s.enclosed_current(&through), Err(FluxError::RejectedPath(_))));
        let edge = PathSpec::new(PathShape::Square, Vec2::new(0.4, 0.4), 0.1);
        assert!(matches!(s.enclosed_current(&edge), Err(FluxError::RejectedPath(_))));
    }

    #[test]
    fn horseshoe_examples() {
        let s = horseshoe_scene();
        let bar_center = Vec2::new(0.5 * (horseshoe::CORE.x0 + horseshoe::WINDOW.x0), 0.5);
        assert_eq!(s.mu_at(bar_center, 0.0).unwrap(), 5000.0);
        assert_eq!(s.mu_at(Vec2::new(0.0, 0.0), 0.0).unwrap(), 1.0);
        assert_eq!(s.mu_at(Vec2::new(1.0, 1.0), 0.0).unwrap(), 1.0);
        assert_eq!(s.mu_at(s.wires[0].position, 0.0).unwrap(), 1.0);
        assert_eq!(s.mu_at(horseshoe::GAP.center(), 0.0).unwrap(), 1.0);
        // the gap fully separates the right bar
        for k in 0..=20 {
            let x = horseshoe::GAP.x0 + horseshoe::GAP.width() * k as f64 / 20.0;
            assert_eq!(s.mu_at(Vec2::new(x, 0.5), 0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn painter_order_full_cover_wins() {
        let mut s = horseshoe_scene();
        s.regions.push(MaterialRegion::linear(Rect::new(0.0, 0.0, 1.0, 1.0), 7.0));
        for &(x, y) in &[(0.0, 0.0), (0.27, 0.5), (0.5, 0.5), (0.73, 0.5), (1.0, 0.3)] {
            assert_eq!(s.mu_at(Vec2::new(x, y), 0.0).unwrap(), 7.0);
        }
    }

    fn arb_spec() -> impl Strategy<Value = PathSpec> {
        (any::<bool>(), 0.2..0.8f64, 0.2..0.8f64, 0.02..0.19f64).prop_map(|(circle, x, y, s)| {
            let shape = if circle { PathShape::Circle } else { PathShape::Square };
            PathSpec::new(shape, Vec2::new(x, y), s)
        })
    }

    proptest! {
        #[test]
        fn enclosed_current_is_additive(
            spec in arb_spec(),
            wires in prop::collection::vec((0.05..0.95f64, 0.05..0.95f64, -3.0..3.0f64), 0..5),
        ) {
            let wires: Vec<_> = wires.into_iter()
                .map(|(x, y, i)| WireSource { position: Vec2::new(x, y), current: i })
                .collect();
            let scene = SceneConfig::new(DomainBounds::unit(), vec![], 1.0, wires.clone(), 0.03).unwrap();
            let total = scene.enclosed_current(&spec);
            let parts: Result<Vec<f64>> = wires.iter().map(|w| {
                let single = SceneConfig { wires: vec![*w], ..scene.clone() };
                single.enclosed_current(&spec)
            }).collect();
            if let (Ok(total), Ok(parts)) = (total, parts) {
                let sum: f64 = parts.iter().sum();
                prop_assert!((total - sum).abs() <= 1e-12);
            }
        }

        #[test]
        fn mu_is_non_increasing_in_b(x in 0.0..1.0f64, y in 0.0..1.0f64, b1 in 0.0..5.0f64, b2 in 0.0..5.0f64) {
            let s = horseshoe_scene();
            let p = Vec2::new(x, y);
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let m_lo = s.mu_at(p, lo).unwrap();
            let m_hi = s.mu_at(p, hi).unwrap();
            prop_assert!(m_hi <= m_lo);
            prop_assert!(m_hi >= 1.0);
        }

        #[test]
        fn mu_piecewise_constant_inside_region(fx in 0.05..0.95f64, fy in 0.05..0.95f64, dx in -1.0..1.0f64, dy in -1.0..1.0f64, b in 0.0..3.0f64) {
            let s = iron_scene(1.6);
            let r = s.regions[0].rect;
            let p = Vec2::new(r.x0 + fx * r.width(), r.y0 + fy * r.height());
            let clearance = (p.x - r.x0).min(r.x1 - p.x).min(p.y - r.y0).min(r.y1 - p.y);
            let q = p + Vec2::new(dx, dy) * (0.7 * clearance);
            prop_assert_eq!(s.mu_at(p, b).unwrap(), s.mu_at(q, b).unwrap());
        }
    }
}
