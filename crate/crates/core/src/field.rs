// Anything that can be sampled as a 2D flux density: the trained network,
// a rasterized grid, or a closed-form field.

use crate::error::Result;
use crate::geom::Vec2;
use crate::net::FieldModel;

pub trait VectorField {
    fn sample(&self, points: &[Vec2]) -> Result<Vec<Vec2>>;
}

impl VectorField for FieldModel {
    fn sample(&self, points: &[Vec2]) -> Result<Vec<Vec2>> {
        self.eval_many(points)
    }
}

/// Adapter for closed-form fields.
pub struct FnField<F>(pub F);

impl<F: Fn(Vec2) -> Vec2> VectorField for FnField<F> {
    fn sample(&self, points: &[Vec2]) -> Result<Vec<Vec2>> {
        Ok(points.iter().map(|&p| (self.0)(p)).collect())
    }
}
