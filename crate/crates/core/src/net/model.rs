// The trainable field B_net(x, y): affine map to the unit square, hash-grid
// encoding, then the MLP.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{FluxError, Result};
use crate::geom::{Rect, Vec2};
use crate::hashgrid::{Corner, HashGrid, HashGridConfig};
use crate::net::adam::AdamState;
use crate::net::mlp::{Dense, Mlp, MlpConfig};
use crate::scene::{DomainBounds, SceneConfig};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Optional extra network input: a piecewise-constant indicator of the
/// material at the query point. Later regions override earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialChannel {
    pub regions: Vec<(Rect, f64)>,
}

impl MaterialChannel {
    /// 1 inside permeable regions, 0 elsewhere.
    pub fn from_scene(scene: &SceneConfig) -> Self {
        Self { regions: scene.regions.iter().map(|r| (r.rect, if r.mu_unsat > 1.0 { 1.0 } else { 0.0 })).collect() }
    }

    pub fn value(&self, p: Vec2) -> f64 {
        self.regions.iter().rev().find(|(r, _)| r.contains(p)).map_or(0.0, |&(_, v)| v)
    }
}

#[derive(Debug, Clone)]
pub struct FieldModel {
    bounds: DomainBounds,
    hash: HashGrid,
    mlp: Mlp,
    material: Option<MaterialChannel>,
    /// Changes on every parameter mutation; caches remember the value they
    /// were computed with.
    generation: u64,
}

/// Models are equal when their parameters are; the cache generation is
/// bookkeeping only.
impl PartialEq for FieldModel {
    fn eq(&self, other: &Self) -> bool {
        self.bounds == other.bounds && self.hash == other.hash && self.mlp == other.mlp && self.material == other.material
    }
}

/// Dense gradient for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub hash: Vec<f64>,
    pub mlp: Vec<Dense>,
}

impl ModelGrad {
    pub fn add_assign(&mut self, other: &ModelGrad) {
        for (a, b) in self.hash.iter_mut().zip(&other.hash) {
            *a += b;
        }
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.hash.iter_mut().for_each(|v| *v *= s);
        self.mlp.iter_mut().for_each(|d| d.scale(s));
    }

    /// Tensors in the optimizer's order: hash tables, then each layer's
    /// weight and bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.hash];
        for d in &self.mlp {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Activations of a batch of forward evaluations, needed for the reverse pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    generation: u64,
    corners: Vec<Corner>,
    acts: Vec<f64>,
    pub outputs: Vec<Vec2>,
}

impl BatchCache {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Cache of a single-point evaluation.
pub type FieldCache = BatchCache;

/// MLP gradient plus the not yet scattered encoder gradient of a batch.
/// Splitting the two lets batches be processed in parallel while the
/// scatter into the shared hash-table gradient happens in a fixed order.
#[derive(Debug, Clone)]
pub struct PendingGrad {
    pub mlp: Vec<Dense>,
    corners: Vec<Corner>,
    feature_grads: Vec<f64>,
}

impl PendingGrad {
    pub fn apply(&self, model: &FieldModel, grad: &mut ModelGrad) {
        for (a, b) in grad.mlp.iter_mut().zip(&self.mlp) {
            a.add_assign(b);
        }
        let levels = model.hash.cfg.levels;
        let width = model.mlp.cfg.input_dim;
        for (s, up) in self.feature_grads.chunks_exact(width).enumerate() {
            model.hash.accumulate_backward(&self.corners[s * 4 * levels..(s + 1) * 4 * levels], up, &mut grad.hash);
        }
    }
}

impl FieldModel {
    pub fn new<R: Rng + ?Sized>(
        bounds: DomainBounds,
        hash_cfg: HashGridConfig,
        mlp_cfg: MlpConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_material(bounds, hash_cfg, mlp_cfg, None, rng)
    }

    /// Like `new`, optionally feeding a material indicator to the network.
    pub fn with_material<R: Rng + ?Sized>(
        bounds: DomainBounds,
        hash_cfg: HashGridConfig,
        mlp_cfg: MlpConfig,
        material: Option<MaterialChannel>,
        rng: &mut R,
    ) -> Result<Self> {
        let hash = HashGrid::init(hash_cfg, rng)?;
        let input_dim = hash_cfg.output_dim() + usize::from(material.is_some());
        let mlp = Mlp::init(MlpConfig { input_dim, ..mlp_cfg }, rng)?;
        Self::from_parts(bounds, hash, mlp, material)
    }

    pub fn from_parts(bounds: DomainBounds, hash: HashGrid, mlp: Mlp, material: Option<MaterialChannel>) -> Result<Self> {
        bounds.validate()?;
        let features = hash.cfg.output_dim() + usize::from(material.is_some());
        if features != mlp.cfg.input_dim {
            return Err(FluxError::Contract(format!(
                "encoder emits {} features but the network expects {}",
                features, mlp.cfg.input_dim
            )));
        }
        Ok(Self { bounds, hash, mlp, material, generation: next_generation() })
    }

    pub fn material(&self) -> Option<&MaterialChannel> {
        self.material.as_ref()
    }

    pub fn bounds(&self) -> &DomainBounds {
        &self.bounds
    }

    pub fn hash(&self) -> &HashGrid {
        &self.hash
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Mutable access to the encoder; invalidates outstanding caches.
    pub fn hash_mut(&mut self) -> &mut HashGrid {
        self.generation = next_generation();
        &mut self.hash
    }

    /// Mutable access to the network; invalidates outstanding caches.
    pub fn mlp_mut(&mut self) -> &mut Mlp {
        self.generation = next_generation();
        &mut self.mlp
    }

    pub fn param_count(&self) -> usize {
        self.hash.tables.len() + self.mlp.param_count()
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad { hash: vec![0.0; self.hash.tables.len()], mlp: self.mlp.zero_grad() }
    }

    pub fn tensor_lens(&self) -> Vec<usize> {
        self.zero_grad().tensors().iter().map(|t| t.len()).collect()
    }

    pub fn all_params_finite(&self) -> bool {
        self.hash.tables.iter().all(|v| v.is_finite())
            && self.mlp.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Applies one optimizer step with `grad`.
    pub fn adam_step(&mut self, state: &mut AdamState, grad: &ModelGrad) -> Result<()> {
        let generation = next_generation();
        let mut params: Vec<&mut [f64]> = vec![&mut self.hash.tables];
        for d in &mut self.mlp.layers {
            params.push(&mut d.weight);
            params.push(&mut d.bias);
        }
        state.step(&mut params, &grad.tensors())?;
        self.generation = generation;
        Ok(())
    }

    /// Evaluates the field at every point, keeping activations for a
    /// reverse pass.
    pub fn forward_batch(&self, points: &[Vec2]) -> Result<BatchCache> {
        let levels = self.hash.cfg.levels;
        let stride = self.mlp.cfg.activation_len();
        let width = self.mlp.cfg.input_dim;
        let mut corners = vec![Corner { offset: 0, weight: 0.0 }; points.len() * 4 * levels];
        let mut acts = vec![0.0; points.len() * stride];
        let mut outputs = Vec::with_capacity(points.len());
        for (s, &p) in points.iter().enumerate() {
            self.bounds.check(p)?;
            let u = self.bounds.to_unit(p);
            let u = Vec2::new(u.x.clamp(0.0, 1.0), u.y.clamp(0.0, 1.0));
            let c = &mut corners[s * 4 * levels..(s + 1) * 4 * levels];
            self.hash.corners(u, c);
            let a = &mut acts[s * stride..(s + 1) * stride];
            let features = self.hash.cfg.output_dim();
            self.hash.encode_with_corners(u, c, &mut a[..features]);
            if let Some(m) = &self.material {
                a[width - 1] = m.value(p);
            }
            self.mlp.forward_in_place(a);
            let out = Vec2::new(a[stride - 2], a[stride - 1]);
            if !out.is_finite() {
                let layer = self.mlp.first_non_finite_layer(a).unwrap_or(self.mlp.layers.len());
                return Err(FluxError::Numeric(format!(
                    "non-finite activation at layer {layer} for point ({}, {})",
                    p.x, p.y
                )));
            }
            outputs.push(out);
        }
        Ok(BatchCache { generation: self.generation, corners, acts, outputs })
    }

    /// Reverse pass of a batch with upstream gradients `dL/dB` per point;
    /// the encoder part of the gradient is returned unscattered.
    pub fn backward_pending(&self, cache: &BatchCache, upstream: &[Vec2]) -> Result<PendingGrad> {
        if cache.generation != self.generation {
            return Err(FluxError::Contract("activation cache is stale: parameters changed since forward".into()));
        }
        if upstream.len() != cache.len() {
            return Err(FluxError::Contract(format!(
                "{} upstream gradients for a batch of {}",
                upstream.len(),
                cache.len()
            )));
        }
        let stride = self.mlp.cfg.activation_len();
        let width = self.mlp.cfg.input_dim;
        let mut mlp = self.mlp.zero_grad();
        let mut feature_grads = vec![0.0; cache.len() * width];
        let mut scratch = Vec::new();
        for (s, up) in upstream.iter().enumerate() {
            if up.x == 0.0 && up.y == 0.0 {
                continue;
            }
            let a = &cache.acts[s * stride..(s + 1) * stride];
            let d_in = &mut feature_grads[s * width..(s + 1) * width];
            self.mlp.backward_in_place(a, &[up.x, up.y], &mut mlp, d_in, &mut scratch);
        }
        Ok(PendingGrad { mlp, corners: cache.corners.clone(), feature_grads })
    }

    pub fn backward_batch(&self, cache: &BatchCache, upstream: &[Vec2], grad: &mut ModelGrad) -> Result<()> {
        let pending = self.backward_pending(cache, upstream)?;
        pending.apply(self, grad);
        Ok(())
    }

    /// `B_net(p)` together with the activations needed by `field_backward`.
    pub fn field_forward(&self, p: Vec2) -> Result<(Vec2, FieldCache)> {
        let cache = self.forward_batch(&[p])?;
        Ok((cache.outputs[0], cache))
    }

    /// Exact parameter gradient of `upstream . B_net(p)`.
    pub fn field_backward(&self, cache: &FieldCache, upstream: Vec2) -> Result<ModelGrad> {
        let mut grad = self.zero_grad();
        self.backward_batch(cache, &[upstream], &mut grad)?;
        Ok(grad)
    }

    pub fn eval(&self, p: Vec2) -> Result<Vec2> {
        Ok(self.forward_batch(&[p])?.outputs[0])
    }

    pub fn eval_many(&self, points: &[Vec2]) -> Result<Vec<Vec2>> {
        Ok(self.forward_batch(points)?.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::adam::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> FieldModel {
        let hash = HashGridConfig {
            levels: 2,
            features_per_level: 2,
            log2_table_size: 6,
            base_resolution: 4,
            growth_factor: 2.0,
            append_raw_coords: true,
        };
        let mlp = MlpConfig { input_dim: 0, hidden_layers: 1, hidden_width: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FieldModel::new(DomainBounds::new(-1.0, 1.0, 0.0, 2.0).unwrap(), hash, mlp, &mut rng).unwrap();
        // spread the tables so the encoder contributes visibly
        for v in &mut m.hash_mut().tables {
            *v = rng.gen_range(-1.0..1.0);
        }
        for l in &mut m.mlp_mut().layers {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        m
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = tiny(0);
        for l in &mut m.mlp_mut().layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        for p in [Vec2::new(-1.0, 0.0), Vec2::new(0.3, 1.7), Vec2::new(1.0, 2.0)] {
            assert_eq!(m.eval(p).unwrap(), Vec2::ZERO);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_batch_independent() {
        let m = tiny(1);
        let pts: Vec<Vec2> = (0..50).map(|k| Vec2::new(-1.0 + 0.04 * k as f64, 0.037 * k as f64)).collect();
        let batch = m.eval_many(&pts).unwrap();
        for (p, b) in pts.iter().zip(&batch) {
            let single = m.eval(*p).unwrap();
            assert_eq!(single.x.to_bits(), b.x.to_bits());
            assert_eq!(single.y.to_bits(), b.y.to_bits());
        }
        assert_eq!(tiny(1).eval_many(&pts).unwrap(), batch);
    }

    #[test]
    fn outside_point_is_domain_error() {
        let m = tiny(2);
        assert!(matches!(m.eval(Vec2::new(1.5, 1.0)), Err(FluxError::Domain(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = tiny(3);
        let (_, cache) = m.field_forward(Vec2::new(0.1, 0.9)).unwrap();
        assert!(m.field_backward(&cache, Vec2::ZERO).unwrap().is_zero());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = tiny(4);
        let (_, cache) = m.field_forward(Vec2::new(0.1, 0.9)).unwrap();
        let grad = m.field_backward(&cache, Vec2::new(1.0, 0.0)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &m.tensor_lens());
        m.adam_step(&mut adam, &grad).unwrap();
        assert!(matches!(m.field_backward(&cache, Vec2::new(1.0, 0.0)), Err(FluxError::Contract(_))));

        // a cache from one clone cannot be used with a diverged sibling
        let a = tiny(5);
        let mut b = a.clone();
        let (_, cache) = a.field_forward(Vec2::new(0.0, 1.0)).unwrap();
        assert!(b.field_backward(&cache, Vec2::new(1.0, 1.0)).is_ok());
        b.mlp_mut();
        assert!(b.field_backward(&cache, Vec2::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let mut m = tiny(6);
        m.mlp_mut().layers[0].bias[0] = f64::INFINITY;
        let err = m.eval(Vec2::new(0.0, 1.0)).unwrap_err();
        assert!(matches!(&err, FluxError::Numeric(msg) if msg.contains("layer 1")), "{err}");
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut m = tiny(7);
        let p = Vec2::new(0.23, 1.31);
        let up = Vec2::new(0.8, -0.4);
        let (_, cache) = m.field_forward(p).unwrap();
        let grad = m.field_backward(&cache, up).unwrap();
        let objective = |m: &FieldModel| m.eval(p).unwrap().dot(up);
        let h = 1e-4;
        let n_hash = m.hash().tables.len();
        for idx in 0..n_hash {
            let orig = m.hash().tables[idx];
            m.hash_mut().tables[idx] = orig + h;
            let plus = objective(&m);
            m.hash_mut().tables[idx] = orig - h;
            let minus = objective(&m);
            m.hash_mut().tables[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - grad.hash[idx]).abs() <= 1e-4 * grad.hash[idx].abs().max(1e-3), "hash {idx}: {fd} vs {}", grad.hash[idx]);
        }
        for l in 0..m.mlp().layers.len() {
            for k in 0..m.mlp().layers[l].weight.len() {
                let orig = m.mlp().layers[l].weight[k];
                m.mlp_mut().layers[l].weight[k] = orig + h;
                let plus = objective(&m);
                m.mlp_mut().layers[l].weight[k] = orig - h;
                let minus = objective(&m);
                m.mlp_mut().layers[l].weight[k] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = grad.mlp[l].weight[k];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "w{l}[{k}]: {fd} vs {an}");
            }
        }
    }
}
