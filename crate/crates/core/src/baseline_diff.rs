// Differential-form baseline: pointwise curl/divergence residuals from
// central differences of the network, plus a far-field B = 0 boundary term.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};
use crate::exec::Exec;
use crate::field::VectorField;
use crate::geom::Vec2;
use crate::integral_loss::{holdout_set, training_rng, HoldoutMonitor, LossConfig, Progress};
use crate::net::{AdamState, FieldModel, PendingGrad};
use crate::report::{IterationRecord, Method, TrainReport};
use crate::scene::SceneConfig;

/// Collocation points handled per work item.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffLossConfig {
    pub collocation_points: usize,
    pub boundary_points: usize,
    /// Finite-difference step; `None` means domain-width / 2048.
    pub fd_step: Option<f64>,
    pub lambda_interior: f64,
    pub lambda_boundary: f64,
    pub iterations: usize,
}

impl Default for DiffLossConfig {
    fn default() -> Self {
        Self {
            collocation_points: 4096,
            boundary_points: 512,
            fd_step: None,
            lambda_interior: 1.0,
            lambda_boundary: 10.0,
            iterations: 10_000,
        }
    }
}

impl DiffLossConfig {
    pub fn step(&self, scene: &SceneConfig) -> f64 {
        self.fd_step.unwrap_or(scene.bounds.width() / 2048.0)
    }

    pub fn validate(&self, scene: &SceneConfig) -> Result<()> {
        let h = self.step(scene);
        if !(h > 0.0 && h < scene.bounds.width() / 16.0) {
            return Err(FluxError::Config(format!(
                "fd_step must lie in (0, {}) (got {h})",
                scene.bounds.width() / 16.0
            )));
        }
        if !(self.lambda_interior > 0.0 && self.lambda_boundary >= 0.0) {
            return Err(FluxError::Config(format!(
                "lambda_interior must be positive and lambda_boundary non-negative (got {}, {})",
                self.lambda_interior, self.lambda_boundary
            )));
        }
        if self.collocation_points == 0 {
            return Err(FluxError::Config("collocation_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// `[x+h, x-h, y+h, y-h]` neighbours of `p`.
fn stencil(p: Vec2, h: f64) -> [Vec2; 4] {
    [
        Vec2::new(p.x + h, p.y),
        Vec2::new(p.x - h, p.y),
        Vec2::new(p.x, p.y + h),
        Vec2::new(p.x, p.y - h),
    ]
}

fn check_stencil(scene: &SceneConfig, pts: &[Vec2; 4]) -> Result<()> {
    for q in pts {
        if !scene.bounds.contains(*q) {
            return Err(FluxError::Domain(format!("stencil point ({}, {}) leaves the domain", q.x, q.y)));
        }
    }
    Ok(())
}

/// Residuals from the four stencil samples `b` (ordered as in `stencil`)
/// and their permeabilities.
fn residuals_from_stencil(b: &[Vec2], mu: &[f64], h: f64, jc: f64) -> (f64, f64) {
    let inv = 1.0 / (2.0 * h);
    let curl = (b[0].y / mu[0] - b[1].y / mu[1]) * inv - (b[2].x / mu[2] - b[3].x / mu[3]) * inv - jc;
    let div = (b[0].x - b[1].x) * inv + (b[2].y - b[3].y) * inv;
    (curl, div)
}

/// `(r_curl, r_div)` at `p` by central differences of step `h`, with the
/// wire current smeared over its singularity disk.
pub fn diff_residuals<F: VectorField + ?Sized>(field: &F, scene: &SceneConfig, p: Vec2, h: f64) -> Result<(f64, f64)> {
    let pts = stencil(p, h);
    check_stencil(scene, &pts)?;
    let b = field.sample(&pts)?;
    let mu = pts.iter().zip(&b).map(|(&q, v)| scene.mu_at(q, v.norm())).collect::<Result<Vec<_>>>()?;
    Ok(residuals_from_stencil(&b, &mu, h, scene.current_density(p)))
}

/// Contribution of one chunk of collocation and boundary points.
struct ChunkEval {
    interior: f64,
    boundary: f64,
    pending: PendingGrad,
}

/// Loss terms (already scaled by the batch means and weights) and the
/// pending gradient of a chunk.
fn chunk_loss(
    model: &FieldModel,
    scene: &SceneConfig,
    cfg: &DiffLossConfig,
    h: f64,
    interior: &[Vec2],
    boundary: &[Vec2],
) -> Result<ChunkEval> {
    let mut pts = Vec::with_capacity(4 * interior.len() + boundary.len());
    for &p in interior {
        let s = stencil(p, h);
        check_stencil(scene, &s)?;
        pts.extend_from_slice(&s);
    }
    pts.extend_from_slice(boundary);
    let cache = model.forward_batch(&pts)?;
    let b = &cache.outputs;
    let mut upstream = vec![Vec2::ZERO; pts.len()];
    let wi = cfg.lambda_interior / cfg.collocation_points as f64;
    let inv = 1.0 / (2.0 * h);
    let mut interior_loss = 0.0;
    for (k, &p) in interior.iter().enumerate() {
        let s = 4 * k;
        let mu: Vec<f64> = (0..4).map(|j| scene.mu_unchecked(pts[s + j], b[s + j].norm())).collect();
        let (curl, div) = residuals_from_stencil(&b[s..s + 4], &mu, h, scene.current_density(p));
        interior_loss += wi * (curl * curl + div * div);
        let gc = 2.0 * wi * curl * inv;
        let gd = 2.0 * wi * div * inv;
        upstream[s] = Vec2::new(gd, gc / mu[0]);
        upstream[s + 1] = Vec2::new(-gd, -gc / mu[1]);
        upstream[s + 2] = Vec2::new(-gc / mu[2], gd);
        upstream[s + 3] = Vec2::new(gc / mu[3], -gd);
    }
    let mut boundary_loss = 0.0;
    if cfg.boundary_points > 0 {
        let wb = cfg.lambda_boundary / cfg.boundary_points as f64;
        for k in 4 * interior.len()..pts.len() {
            boundary_loss += wb * b[k].dot(b[k]);
            upstream[k] = b[k] * (2.0 * wb);
        }
    }
    let total = interior_loss + boundary_loss;
    if !total.is_finite() {
        return Err(FluxError::Numeric(format!("non-finite differential loss {total}")));
    }
    let pending = model.backward_pending(&cache, &upstream)?;
    Ok(ChunkEval { interior: interior_loss, boundary: boundary_loss, pending })
}

/// Uniform collocation points whose stencils stay inside the domain.
pub fn sample_collocation<R: Rng + ?Sized>(scene: &SceneConfig, h: f64, n: usize, rng: &mut R) -> Vec<Vec2> {
    let b = &scene.bounds;
    (0..n)
        .map(|_| Vec2::new(rng.gen_range(b.x_min + h..b.x_max - h), rng.gen_range(b.y_min + h..b.y_max - h)))
        .collect()
}

/// Uniform points on the domain boundary.
pub fn sample_boundary<R: Rng + ?Sized>(scene: &SceneConfig, n: usize, rng: &mut R) -> Vec<Vec2> {
    let b = &scene.bounds;
    let (w, hgt) = (b.width(), b.height());
    let perimeter = 2.0 * (w + hgt);
    (0..n)
        .map(|_| {
            let s = rng.gen_range(0.0..perimeter);
            if s < w {
                Vec2::new(b.x_min + s, b.y_min)
            } else if s < w + hgt {
                Vec2::new(b.x_max, b.y_min + (s - w))
            } else if s < 2.0 * w + hgt {
                Vec2::new(b.x_max - (s - w - hgt), b.y_max)
            } else {
                Vec2::new(b.x_min, b.y_max - (s - 2.0 * w - hgt))
            }
        })
        .collect()
}

/// Differential loss of one batch and its exact gradient w.r.t. the
/// network parameters (derivatives in space are finite differences).
pub fn batch_loss(
    model: &FieldModel,
    scene: &SceneConfig,
    cfg: &DiffLossConfig,
    interior: &[Vec2],
    boundary: &[Vec2],
) -> Result<(f64, f64, crate::net::ModelGrad)> {
    let h = cfg.step(scene);
    let eval = chunk_loss(model, scene, cfg, h, interior, boundary)?;
    let mut grad = model.zero_grad();
    eval.pending.apply(model, &mut grad);
    Ok((eval.interior, eval.boundary, grad))
}

pub fn train_baseline(
    model: &mut FieldModel,
    scene: &SceneConfig,
    cfg: &DiffLossConfig,
    shared: &LossConfig,
    exec: &Exec,
) -> Result<TrainReport> {
    train_baseline_with(model, scene, cfg, shared, exec, |_| ControlFlow::Continue(()))
}

/// Trains with the differential loss for `cfg.iterations` iterations.
/// Seed, learning-rate schedule and held-out loops come from `shared`, so
/// both methods are scored on the same loops with the same optimizer.
pub fn train_baseline_with<O>(
    model: &mut FieldModel,
    scene: &SceneConfig,
    cfg: &DiffLossConfig,
    shared: &LossConfig,
    exec: &Exec,
    mut observer: O,
) -> Result<TrainReport>
where
    O: FnMut(&Progress) -> ControlFlow<()>,
{
    cfg.validate(scene)?;
    shared.validate()?;
    scene.validate()?;
    if model.bounds() != &scene.bounds {
        return Err(FluxError::Contract("model and scene cover different domains".into()));
    }
    let h = cfg.step(scene);
    let schedule = LossConfig { iterations: cfg.iterations, ..shared.clone() };
    let mut monitor = HoldoutMonitor::new(holdout_set(scene, shared)?);
    let mut rng = training_rng(shared.seed);
    let mut adam = AdamState::new(shared.adam(), &model.tensor_lens());
    let pool = exec.pool()?;
    let mut report = TrainReport::new(Method::Differential);
    let mut elapsed_ms = 0.0;
    report.holdout.push(monitor.record(model, scene, 0, 0.0)?);

    for it in 0..cfg.iterations {
        let start = Instant::now();
        let at_iteration = |e: FluxError| match e {
            FluxError::Numeric(msg) => FluxError::Numeric(format!("iteration {it}: {msg}")),
            other => other,
        };
        let interior = sample_collocation(scene, h, cfg.collocation_points, &mut rng);
        let boundary = sample_boundary(scene, cfg.boundary_points, &mut rng);
        // boundary points ride along with the first chunk
        let chunks: Vec<(&[Vec2], &[Vec2])> = interior
            .chunks(CHUNK)
            .enumerate()
            .map(|(k, c)| (c, if k == 0 { &boundary[..] } else { &boundary[..0] }))
            .collect();
        let mut grad = model.zero_grad();
        let (mut interior_loss, mut boundary_loss) = (0.0, 0.0);
        {
            let model_ref = &*model;
            exec.map_fold(
                &pool,
                &chunks,
                |(c, bnd)| chunk_loss(model_ref, scene, cfg, h, c, bnd),
                |eval| {
                    interior_loss += eval.interior;
                    boundary_loss += eval.boundary;
                    eval.pending.apply(model_ref, &mut grad);
                },
            )
            .map_err(at_iteration)?;
        }
        adam.cfg.learning_rate = schedule.lr_at(it);
        match model.adam_step(&mut adam, &grad) {
            Ok(()) => {}
            Err(FluxError::Numeric(_)) => report.skipped_steps += 1,
            Err(e) => return Err(e),
        }
        let ms = start.elapsed().as_secs_f64() * 1e3;
        elapsed_ms += ms;
        report.iterations.push(IterationRecord {
            iteration: it,
            flux_loss: interior_loss,
            ampere_loss: boundary_loss,
            energy_loss: 0.0,
            total: interior_loss + boundary_loss,
            ms,
        });
        let done = it + 1;
        if done % shared.holdout_every == 0 || done == cfg.iterations {
            report.holdout.push(monitor.record(model, scene, done, elapsed_ms).map_err(at_iteration)?);
        }
        let progress = Progress { iteration: done, model, report: &report };
        if observer(&progress).is_break() {
            if report.holdout.last().map(|r| r.iteration) != Some(done) {
                report.holdout.push(monitor.record(model, scene, done, elapsed_ms)?);
            }
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::wire_field;
    use crate::field::FnField;
    use crate::hashgrid::HashGridConfig;
    use crate::net::MlpConfig;
    use crate::scene::{horseshoe_scene, single_wire_scene, DomainBounds};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> FieldModel {
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
        let mut m = FieldModel::new(DomainBounds::unit(), hash, mlp, &mut rng).unwrap();
        for v in &mut m.hash_mut().tables {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    fn air() -> SceneConfig {
        SceneConfig::new(DomainBounds::unit(), vec![], 1.0, vec![], 0.03).unwrap()
    }

    #[test]
    fn constant_field_has_no_residual() {
        let field = FnField(|_| Vec2::new(0.3, -1.7));
        let (c, d) = diff_residuals(&field, &single_wire_scene(), Vec2::new(0.2, 0.7), 1e-3).unwrap();
        assert!(c.abs() <= 1e-9 && d.abs() <= 1e-9, "{c} {d}");
    }

    #[test]
    fn analytic_wire_field_is_nearly_free_of_residual() {
        let scene = single_wire_scene();
        let w = scene.wires[0];
        let field = FnField(|p| wire_field(w.position, w.current, p));
        let (c, d) = diff_residuals(&field, &scene, Vec2::new(0.5 + 0.3, 0.5), 1e-3).unwrap();
        assert!(c.abs() <= 1e-3 && d.abs() <= 1e-3, "{c} {d}");
    }

    #[test]
    fn shear_field_has_unit_curl() {
        let field = FnField(|p: Vec2| Vec2::new(p.y, 0.0));
        let (c, d) = diff_residuals(&field, &air(), Vec2::new(0.5, 0.25), 0.0625).unwrap();
        assert_eq!(c, -1.0);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn residuals_converge_quadratically_in_h() {
        let scene = single_wire_scene();
        let w = scene.wires[0];
        let field = FnField(|p| wire_field(w.position, w.current, p));
        let p = Vec2::new(0.72, 0.61);
        let mut prev: Option<(f64, f64)> = None;
        for k in 0..4 {
            let h = 0.02 / f64::powi(2.0, k);
            let (c, d) = diff_residuals(&field, &scene, p, h).unwrap();
            if let Some((pc, pd)) = prev {
                assert!(pc.abs() / c.abs() > 3.5 && pd.abs() / d.abs() > 3.5, "h={h}: {pc}/{c}, {pd}/{d}");
            }
            prev = Some((c, d));
        }
    }

    #[test]
    fn stencil_outside_domain_is_domain_error() {
        let field = FnField(|_| Vec2::ZERO);
        let r = diff_residuals(&field, &air(), Vec2::new(0.0005, 0.5), 1e-3);
        assert!(matches!(r, Err(FluxError::Domain(_))));
    }

    #[test]
    fn zero_boundary_weight_drops_the_boundary_term() {
        let scene = single_wire_scene();
        let m = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DiffLossConfig { lambda_boundary: 0.0, collocation_points: 8, boundary_points: 8, ..Default::default() };
        let interior = sample_collocation(&scene, cfg.step(&scene), 8, &mut rng);
        let boundary = sample_boundary(&scene, 8, &mut rng);
        let (_, bnd, grad) = batch_loss(&m, &scene, &cfg, &interior, &boundary).unwrap();
        assert_eq!(bnd, 0.0);
        let (_, _, without) = batch_loss(&m, &scene, &cfg, &interior, &[]).unwrap();
        assert_eq!(grad, without);
    }

    #[test]
    fn boundary_samples_lie_on_the_boundary() {
        let scene = single_wire_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in sample_boundary(&scene, 200, &mut rng) {
            let b = &scene.bounds;
            let on = |v: f64, a: f64| (v - a).abs() < 1e-12;
            assert!(on(p.x, b.x_min) || on(p.x, b.x_max) || on(p.y, b.y_min) || on(p.y, b.y_max));
            assert!(b.contains(p));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let scene = SceneConfig::new(
            DomainBounds::unit(),
            vec![crate::scene::MaterialRegion::linear(crate::Rect::new(0.2, 0.2, 0.6, 0.6), 2.5)],
            1.0,
            vec![crate::scene::WireSource { position: Vec2::new(0.5, 0.5), current: 0.3 }],
            0.1,
        )
        .unwrap();
        let mut m = tiny_model(6);
        let cfg = DiffLossConfig { collocation_points: 5, boundary_points: 3, fd_step: Some(0.01), ..Default::default() };
        let interior = vec![
            Vec2::new(0.3, 0.4),
            Vec2::new(0.52, 0.47),
            Vec2::new(0.8, 0.1),
            Vec2::new(0.6, 0.55),
            Vec2::new(0.15, 0.9),
        ];
        let boundary = vec![Vec2::new(0.0, 0.3), Vec2::new(0.7, 1.0), Vec2::new(1.0, 0.05)];
        let (_, _, grad) = batch_loss(&m, &scene, &cfg, &interior, &boundary).unwrap();
        let loss = |m: &FieldModel| {
            let (a, b, _) = batch_loss(m, &scene, &cfg, &interior, &boundary).unwrap();
            a + b
        };
        let h = 1e-6;
        for idx in 0..m.hash().tables.len() {
            let orig = m.hash().tables[idx];
            m.hash_mut().tables[idx] = orig + h;
            let plus = loss(&m);
            m.hash_mut().tables[idx] = orig - h;
            let minus = loss(&m);
            m.hash_mut().tables[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grad.hash[idx];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "hash {idx}: {fd} vs {an}");
        }
        for l in 0..m.mlp().layers.len() {
            for k in 0..m.mlp().layers[l].weight.len() {
                let orig = m.mlp().layers[l].weight[k];
                m.mlp_mut().layers[l].weight[k] = orig + h;
                let plus = loss(&m);
                m.mlp_mut().layers[l].weight[k] = orig - h;
                let minus = loss(&m);
                m.mlp_mut().layers[l].weight[k] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = grad.mlp[l].weight[k];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "w{l}[{k}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn material_interfaces_stay_finite() {
        let scene = horseshoe_scene();
        let m = tiny_model(2);
        let h = DiffLossConfig::default().step(&scene);
        // points straddling every edge of the iron ring
        let mut pts = Vec::new();
        for k in 0..=200 {
            let t = k as f64 / 200.0;
            for edge in [0.2, 0.34, 0.66, 0.8] {
                pts.push(Vec2::new(edge, 0.1 + 0.8 * t));
                pts.push(Vec2::new(0.1 + 0.8 * t, edge));
            }
        }
        for p in pts {
            let (c, d) = diff_residuals(&m, &scene, p, h).unwrap();
            assert!(c.is_finite() && d.is_finite(), "{p:?}");
        }
    }

    #[test]
    fn training_is_seeded_and_finite() {
        let scene = single_wire_scene();
        let shared = LossConfig { holdout_paths: 4, holdout_every: 3, holdout_samples: 32, learning_rate: 1e-2, ..Default::default() };
        let cfg = DiffLossConfig { collocation_points: 300, boundary_points: 20, iterations: 6, ..Default::default() };
        let run = |exec: Exec| {
            let mut m = tiny_model(9);
            train_baseline(&mut m, &scene, &cfg, &shared, &exec).unwrap()
        };
        let a = run(Exec::default());
        let b = run(Exec::new(2, true));
        let totals = |r: &TrainReport| r.iterations.iter().map(|i| i.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(totals(&a), totals(&b));
        assert_eq!(a.method, Method::Differential);
        assert_eq!(a.holdout.len(), 3);
        assert!(a.iterations.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn invalid_step_is_rejected() {
        let scene = single_wire_scene();
        for h in [0.0, -1e-3, 0.1] {
            let cfg = DiffLossConfig { fd_step: Some(h), ..Default::default() };
            assert!(cfg.validate(&scene).is_err());
        }
    }
}
