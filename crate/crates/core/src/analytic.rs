// Closed-form fields used as oracles.

use std::f64::consts::PI;

use crate::error::Result;
use crate::field::VectorField;
use crate::geom::Vec2;
use crate::scene::DomainBounds;

/// Free-space field of a straight line current through `wire`:
/// `B = I / (2 pi r^2) * (-(y - cy), x - cx)` with mu0 = 1.
pub fn wire_field(wire: Vec2, current: f64, p: Vec2) -> Vec2 {
    let d = p - wire;
    let r2 = d.dot(d);
    Vec2::new(-d.y, d.x) * (current / (2.0 * PI * r2))
}

/// Magnitude of the free-space wire field at distance `r`.
pub fn wire_field_magnitude(current: f64, r: f64) -> f64 {
    current.abs() / (2.0 * PI * r)
}

/// Field of a line current inside a rectangle whose boundary is held at
/// `Az = 0` (zero normal flux), by the method of images.
///
/// Images along x are summed in closed form: a row of alternating line
/// currents with period `2w` has the complex potential
/// `-(I / 2 pi) ln(sin(pi (z - a) / 2w) / sin(pi (z - b) / 2w))`. Rows
/// repeat along y with period `2h` and their fields decay like
/// `exp(-pi |dy| / w)`, so `k` rows on either side suffice.
pub fn grounded_box_field(bounds: &DomainBounds, wire: Vec2, current: f64, p: Vec2, k: i32) -> Vec2 {
    let (w, h) = (bounds.width(), bounds.height());
    let (x0, y0) = (wire.x - bounds.x_min, wire.y - bounds.y_min);
    let (x, y) = (p.x - bounds.x_min, p.y - bounds.y_min);
    let s = PI / (2.0 * w);
    // dF/dz, with F the complex potential; B = (-Im F', -Re F')
    let mut dfdz = (0.0, 0.0);
    for j in -k..=k {
        for (yc, sign) in [(2.0 * h * j as f64 + y0, 1.0), (2.0 * h * j as f64 - y0, -1.0)] {
            let a = cot(s * (x - x0), s * (y - yc));
            let b = cot(s * (x + x0), s * (y - yc));
            let c = -current * sign / (2.0 * PI) * s;
            dfdz.0 += c * (a.0 - b.0);
            dfdz.1 += c * (a.1 - b.1);
        }
    }
    Vec2::new(-dfdz.1, -dfdz.0)
}

/// Complex cotangent of `u + iv` as `(re, im)`.
fn cot(u: f64, v: f64) -> (f64, f64) {
    let d = (2.0 * v).cosh() - (2.0 * u).cos();
    ((2.0 * u).sin() / d, -(2.0 * v).sinh() / d)
}

pub const PROBE_RADII: usize = 16;
pub const PROBE_ANGLES: usize = 32;

/// Worst relative deviation of a field from `I / (2 pi r)` over
/// `PROBE_RADII` circles with radii in `[0.1, 0.4]` of the domain width.
///
/// Each radius is scored by the mean `|B|` over `PROBE_ANGLES` points on
/// the circle: inside a bounded domain the pointwise field is not radially
/// symmetric, but its azimuthal mean stays within a fraction of a percent
/// of the free-space value.
pub fn wire_probe_error<F: VectorField + ?Sized>(field: &F, bounds: &DomainBounds, wire: Vec2, current: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..PROBE_RADII {
        let r = bounds.width() * (0.1 + 0.3 * k as f64 / (PROBE_RADII - 1) as f64);
        let pts: Vec<Vec2> = (0..PROBE_ANGLES)
            .map(|a| {
                let th = 2.0 * PI * (a as f64 + 0.5) / PROBE_ANGLES as f64;
                wire + Vec2::new(r * th.cos(), r * th.sin())
            })
            .collect();
        let mean = field.sample(&pts)?.iter().map(|b| b.norm()).sum::<f64>() / PROBE_ANGLES as f64;
        let exact = wire_field_magnitude(current, r);
        worst = worst.max((mean - exact).abs() / exact);
    }
    Ok(worst)
}
