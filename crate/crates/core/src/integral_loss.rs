// Loop-integral loss and the training loop built on it.
//
// For a discretized loop with samples p_k, tangents t_k, outward normals n_k
// and segment lengths ds_k:
//
//   r_flux = sum (B_k . n_k) ds_k
//   r_amp  = sum (B_k . t_k) / mu_k ds_k - J_enc
//   loss   = w_f rho(r_flux) + w_a rho(r_amp)
//
// mu_k is looked up with the network's own |B_k| and held constant in the
// reverse pass, so no gradient flows through the saturation step.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};
use crate::exec::Exec;
use crate::field::VectorField;
use crate::geom::Vec2;
use crate::net::{AdamConfig, AdamState, FieldModel, ModelGrad, PendingGrad};
use crate::paths::{loop_integrals, ClosedPath, Discretization, PathSampler};
use crate::report::{HoldoutRecord, IterationRecord, Method, TrainReport};
use crate::scene::SceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualNorm {
    Absolute,
    Squared,
}

impl ResidualNorm {
    pub fn value(self, r: f64) -> f64 {
        match self {
            ResidualNorm::Absolute => r.abs(),
            ResidualNorm::Squared => r * r,
        }
    }

    pub fn derivative(self, r: f64) -> f64 {
        match self {
            ResidualNorm::Absolute => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ResidualNorm::Squared => 2.0 * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub batch_paths: usize,
    pub flux_weight: f64,
    pub ampere_weight: f64,
    pub residual_norm: ResidualNorm,
    pub iterations: usize,
    pub holdout_paths: usize,
    /// Iterations between held-out evaluations.
    pub holdout_every: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Learning rate reached at the last iteration, as a fraction of the
    /// initial rate; the decay in between is linear.
    pub final_lr_fraction: f64,
    /// Smallest loop size (circle radius or square half-side) as a fraction
    /// of the domain width.
    pub min_path_size: f64,
    /// Optional cap on the size of training loops, same units; held-out
    /// loops always use the full size range.
    pub max_path_size: Option<f64>,
    /// Quadrature samples per domain width of loop length.
    pub samples_per_width: f64,
    pub min_samples: usize,
    /// Quadrature density of the held-out loops, in the same units.
    pub holdout_samples: usize,
    /// Weight of the magnetic-energy regularizer `mean |B|^2 / mu` over
    /// random domain points; 0 disables it. See `energy_term`.
    pub energy_weight: f64,
    pub energy_points: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            batch_paths: 256,
            flux_weight: 1.0,
            ampere_weight: 1.0,
            residual_norm: ResidualNorm::Squared,
            iterations: 10_000,
            holdout_paths: 64,
            holdout_every: 100,
            seed: 0,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            min_path_size: 0.02,
            max_path_size: None,
            samples_per_width: 64.0,
            min_samples: 64,
            holdout_samples: 256,
            energy_weight: 0.0,
            energy_points: 256,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FluxError::Config(msg));
        if self.batch_paths == 0 {
            return fail("batch_paths must be at least 1".into());
        }
        if !(self.flux_weight > 0.0 && self.ampere_weight > 0.0) {
            return fail(format!("loss weights must be positive (got {}, {})", self.flux_weight, self.ampere_weight));
        }
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed must be at most {} so it can be written to TOML", i64::MAX));
        }
        if self.holdout_paths == 0 || self.holdout_every == 0 {
            return fail("holdout_paths and holdout_every must be at least 1".into());
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return fail(format!("final_lr_fraction must lie in (0, 1] (got {})", self.final_lr_fraction));
        }
        if !(self.min_path_size > 0.0 && self.min_path_size <= 0.5) {
            return fail(format!("min_path_size must lie in (0, 0.5] (got {})", self.min_path_size));
        }
        if let Some(max) = self.max_path_size {
            if !(max >= self.min_path_size && max <= 0.5) {
                return fail(format!("max_path_size must lie in [min_path_size, 0.5] (got {max})"));
            }
        }
        if !(self.samples_per_width > 0.0) || self.min_samples < 4 || self.holdout_samples < 4 {
            return fail("loops need a positive sample density and at least 4 samples".into());
        }
        if !(self.energy_weight >= 0.0 && self.energy_weight.is_finite()) {
            return fail(format!("energy_weight must be finite and non-negative (got {})", self.energy_weight));
        }
        if self.energy_weight > 0.0 && self.energy_points == 0 {
            return fail("energy_points must be at least 1 when the energy term is on".into());
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }

    /// Learning rate used for the optimizer step of iteration `it` (0-based).
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let frac = it as f64 / (self.iterations - 1) as f64;
        self.learning_rate * (1.0 - frac * (1.0 - self.final_lr_fraction))
    }

    pub fn discretization(&self, scene: &SceneConfig) -> Discretization {
        Discretization {
            samples_per_unit_length: self.samples_per_width / scene.bounds.width(),
            min_samples: self.min_samples,
        }
    }

    pub fn holdout_discretization(&self, scene: &SceneConfig) -> Discretization {
        Discretization {
            samples_per_unit_length: self.holdout_samples as f64 / scene.bounds.width(),
            min_samples: self.holdout_samples,
        }
    }

    /// Sampler of the held-out loops: sizes span the whole feasible range.
    pub fn sampler(&self, scene: &SceneConfig) -> Result<PathSampler> {
        PathSampler::for_scene(scene, self.min_path_size * scene.bounds.width())
    }

    /// Sampler of the training loops, honouring `max_path_size`.
    pub fn training_sampler(&self, scene: &SceneConfig) -> Result<PathSampler> {
        let mut sampler = self.sampler(scene)?;
        if let Some(max) = self.max_path_size {
            sampler.max_size = sampler.max_size.min(max * scene.bounds.width());
        }
        Ok(sampler)
    }
}

/// Random stream for training loops.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent random stream for the held-out loops of the same seed.
pub fn holdout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Random stream for the energy-term sample points, so switching the term on
/// leaves the loop stream untouched.
pub fn energy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Uniform points in the domain outside every wire's singularity disk.
pub fn sample_free_points<R: Rng + ?Sized>(scene: &SceneConfig, n: usize, rng: &mut R) -> Vec<Vec2> {
    let b = &scene.bounds;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vec2::new(rng.gen_range(b.x_min..b.x_max), rng.gen_range(b.y_min..b.y_max));
        if !scene.in_wire_mask(p) {
            out.push(p);
        }
    }
    out
}

/// The fixed held-out loop set of a run; it never overlaps the training
/// stream because it is drawn from a separate random stream.
pub fn holdout_set(scene: &SceneConfig, cfg: &LossConfig) -> Result<Vec<ClosedPath>> {
    let sampler = cfg.sampler(scene)?;
    sampler.draw(scene, &cfg.holdout_discretization(scene), cfg.holdout_paths, &mut holdout_rng(cfg.seed))
}

/// Raw loop residuals, before the norm is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub flux: f64,
    /// Circulation of `B / mu` minus the enclosed current.
    pub ampere: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathEval {
    pub residuals: Residuals,
    /// Weighted flux term `w_f rho(r_flux)`.
    pub flux_term: f64,
    /// Weighted Ampère term `w_a rho(r_amp)`.
    pub ampere_term: f64,
    pub loss: f64,
}

/// Permeability at every loop sample, looked up with the given field.
pub fn sample_mu(scene: &SceneConfig, path: &ClosedPath, field: &[Vec2]) -> Result<Vec<f64>> {
    path.points.iter().zip(field).map(|(&p, b)| scene.mu_at(p, b.norm())).collect()
}

pub fn residuals(path: &ClosedPath, field: &[Vec2], mu: &[f64]) -> Result<Residuals> {
    let (flux, circulation) = loop_integrals(path, field, mu)?;
    Ok(Residuals { flux, ampere: circulation - path.enclosed_current })
}

/// Loss of one loop and `scale * dloss/dB_k` for every sample.
pub fn loss_and_upstream(
    path: &ClosedPath,
    field: &[Vec2],
    mu: &[f64],
    cfg: &LossConfig,
    scale: f64,
) -> Result<(PathEval, Vec<Vec2>)> {
    let r = residuals(path, field, mu)?;
    let flux_term = cfg.flux_weight * cfg.residual_norm.value(r.flux);
    let ampere_term = cfg.ampere_weight * cfg.residual_norm.value(r.ampere);
    let loss = flux_term + ampere_term;
    if !loss.is_finite() {
        return Err(FluxError::Numeric(format!("non-finite loss {loss} on {:?}", path.spec)));
    }
    let gf = scale * cfg.flux_weight * cfg.residual_norm.derivative(r.flux);
    let ga = scale * cfg.ampere_weight * cfg.residual_norm.derivative(r.ampere);
    let upstream = (0..path.len())
        .map(|k| (path.normals[k] * gf + path.tangents[k] * (ga / mu[k])) * path.seg_lengths[k])
        .collect();
    Ok((PathEval { residuals: r, flux_term, ampere_term, loss }, upstream))
}

fn pending_path_loss(
    model: &FieldModel,
    scene: &SceneConfig,
    path: &ClosedPath,
    cfg: &LossConfig,
    scale: f64,
) -> Result<(PathEval, PendingGrad, Vec<f64>)> {
    let cache = model.forward_batch(&path.points)?;
    let mu = sample_mu(scene, path, &cache.outputs)?;
    let (eval, upstream) = loss_and_upstream(path, &cache.outputs, &mu, cfg, scale)?;
    let pending = model.backward_pending(&cache, &upstream)?;
    Ok((eval, pending, mu))
}

/// Loss of a single loop and its exact parameter gradient.
pub fn path_loss(model: &FieldModel, scene: &SceneConfig, path: &ClosedPath, cfg: &LossConfig) -> Result<(PathEval, ModelGrad)> {
    let (eval, pending, _) = pending_path_loss(model, scene, path, cfg, 1.0)?;
    let mut grad = model.zero_grad();
    pending.apply(model, &mut grad);
    Ok((eval, grad))
}

/// `path_loss` with the permeabilities supplied as constants.
pub fn path_loss_with_mu(model: &FieldModel, path: &ClosedPath, mu: &[f64], cfg: &LossConfig) -> Result<(PathEval, ModelGrad)> {
    let cache = model.forward_batch(&path.points)?;
    let (eval, upstream) = loss_and_upstream(path, &cache.outputs, mu, cfg, 1.0)?;
    let mut grad = model.zero_grad();
    model.backward_batch(&cache, &upstream, &mut grad)?;
    Ok((eval, grad))
}

/// Residuals of one loop against any field, with the saturation lookup
/// driven by that field.
pub fn evaluate_path<F: VectorField + ?Sized>(field: &F, scene: &SceneConfig, path: &ClosedPath) -> Result<Residuals> {
    let b = field.sample(&path.points)?;
    let mu = sample_mu(scene, path, &b)?;
    residuals(path, &b, &mu)
}

/// Unweighted means of `|r_flux|` and `|r_amp|` over a loop set.
pub fn holdout_residuals<F: VectorField + ?Sized>(field: &F, scene: &SceneConfig, paths: &[ClosedPath]) -> Result<(f64, f64)> {
    let (flux, ampere, _) = holdout_pass(field, scene, paths)?;
    Ok((flux, ampere))
}

fn holdout_pass<F: VectorField + ?Sized>(field: &F, scene: &SceneConfig, paths: &[ClosedPath]) -> Result<(f64, f64, Vec<bool>)> {
    if paths.is_empty() {
        return Err(FluxError::Empty("no held-out loops".into()));
    }
    let mut flux = 0.0;
    let mut ampere = 0.0;
    let mut saturated = Vec::new();
    for path in paths {
        let b = field.sample(&path.points)?;
        let mu = sample_mu(scene, path, &b)?;
        let r = residuals(path, &b, &mu)?;
        flux += r.flux.abs();
        ampere += r.ampere.abs();
        saturated.extend(path.points.iter().zip(&b).map(|(&p, v)| scene.is_saturated(p, v.norm())));
    }
    let n = paths.len() as f64;
    Ok((flux / n, ampere / n, saturated))
}

/// Held-out evaluation shared by both trainers: records residuals and the
/// number of saturation-state flips since the previous evaluation.
pub(crate) struct HoldoutMonitor {
    pub paths: Vec<ClosedPath>,
    last_state: Option<Vec<bool>>,
}

impl HoldoutMonitor {
    pub fn new(paths: Vec<ClosedPath>) -> Self {
        Self { paths, last_state: None }
    }

    pub fn record(&mut self, model: &FieldModel, scene: &SceneConfig, iteration: usize, elapsed_ms: f64) -> Result<HoldoutRecord> {
        let (flux, ampere, state) = holdout_pass(model, scene, &self.paths)?;
        let flips = match &self.last_state {
            Some(prev) => prev.iter().zip(&state).filter(|(a, b)| a != b).count(),
            None => 0,
        };
        self.last_state = Some(state);
        Ok(HoldoutRecord { iteration, elapsed_ms, mean_abs_flux: flux, mean_abs_ampere: ampere, saturation_flips: flips })
    }
}

/// Magnetic-energy regularizer `weight * mean_k |B_k|^2 / mu_k` over the
/// given points, with mu looked up from the field and held constant.
///
/// The loop residuals only see the curl and divergence of the field, so
/// any field `grad(phi)` with harmonic `phi` can be added to a solution
/// without changing them. Among all fields that satisfy Ampère's law the
/// one of least energy is divergence-free with zero normal flux through
/// the domain boundary, so a small weight selects that solution.
pub fn energy_term(model: &FieldModel, scene: &SceneConfig, points: &[Vec2], weight: f64) -> Result<(f64, PendingGrad)> {
    let cache = model.forward_batch(points)?;
    let scale = weight / points.len() as f64;
    let mut energy = 0.0;
    let mut upstream = Vec::with_capacity(points.len());
    for (&p, &b) in points.iter().zip(&cache.outputs) {
        let mu = scene.mu_at(p, b.norm())?;
        energy += b.dot(b) / mu;
        upstream.push(b * (2.0 * scale / mu));
    }
    let energy = energy * scale;
    if !energy.is_finite() {
        return Err(FluxError::Numeric(format!("non-finite field energy {energy}")));
    }
    Ok((energy, model.backward_pending(&cache, &upstream)?))
}

/// Snapshot handed to training observers after every iteration.
pub struct Progress<'a> {
    /// Completed iterations.
    pub iteration: usize,
    pub model: &'a FieldModel,
    pub report: &'a TrainReport,
}

/// Trains `model` for `cfg.iterations` iterations.
pub fn train(model: &mut FieldModel, scene: &SceneConfig, cfg: &LossConfig, exec: &Exec) -> Result<TrainReport> {
    train_with(model, scene, cfg, exec, |_| ControlFlow::Continue(()))
}

/// `train` with an observer that may stop the run early (e.g. to write
/// checkpoints or stop at a residual target).
pub fn train_with<O>(
    model: &mut FieldModel,
    scene: &SceneConfig,
    cfg: &LossConfig,
    exec: &Exec,
    mut observer: O,
) -> Result<TrainReport>
where
    O: FnMut(&Progress) -> ControlFlow<()>,
{
    cfg.validate()?;
    scene.validate()?;
    if model.bounds() != &scene.bounds {
        return Err(FluxError::Contract("model and scene cover different domains".into()));
    }
    let sampler = cfg.training_sampler(scene)?;
    let disc = cfg.discretization(scene);
    let mut monitor = HoldoutMonitor::new(holdout_set(scene, cfg)?);
    let mut rng = training_rng(cfg.seed);
    let mut energy_stream = energy_rng(cfg.seed);
    let mut adam = AdamState::new(cfg.adam(), &model.tensor_lens());
    let pool = exec.pool()?;
    let mut report = TrainReport::new(Method::Integral);
    let mut elapsed_ms = 0.0;
    report.holdout.push(monitor.record(model, scene, 0, 0.0)?);

    let scale = 1.0 / cfg.batch_paths as f64;
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let at_iteration = |e: FluxError| match e {
            FluxError::Numeric(msg) => FluxError::Numeric(format!("iteration {it}: {msg}")),
            other => other,
        };
        let paths = sampler.draw(scene, &disc, cfg.batch_paths, &mut rng)?;
        let mut grad = model.zero_grad();
        let (mut flux_sum, mut ampere_sum) = (0.0, 0.0);
        {
            let model_ref = &*model;
            exec.map_fold(
                &pool,
                &paths,
                |path| pending_path_loss(model_ref, scene, path, cfg, scale),
                |(eval, pending, _)| {
                    flux_sum += eval.flux_term;
                    ampere_sum += eval.ampere_term;
                    pending.apply(model_ref, &mut grad);
                },
            )
            .map_err(at_iteration)?;
        }
        let mut energy_loss = 0.0;
        if cfg.energy_weight > 0.0 {
            let points = sample_free_points(scene, cfg.energy_points, &mut energy_stream);
            let (energy, pending) = energy_term(model, scene, &points, cfg.energy_weight).map_err(at_iteration)?;
            pending.apply(model, &mut grad);
            energy_loss = energy;
        }
        adam.cfg.learning_rate = cfg.lr_at(it);
        match model.adam_step(&mut adam, &grad) {
            Ok(()) => {}
            Err(FluxError::Numeric(_)) => report.skipped_steps += 1,
            Err(e) => return Err(e),
        }
        let ms = start.elapsed().as_secs_f64() * 1e3;
        elapsed_ms += ms;
        let (flux_loss, ampere_loss) = (flux_sum * scale, ampere_sum * scale);
        report.iterations.push(IterationRecord {
            iteration: it,
            flux_loss,
            ampere_loss,
            energy_loss,
            total: flux_loss + ampere_loss + energy_loss,
            ms,
        });
        let done = it + 1;
        if done % cfg.holdout_every == 0 || done == cfg.iterations {
            report.holdout.push(monitor.record(model, scene, done, elapsed_ms).map_err(at_iteration)?);
        }
        let progress = Progress { iteration: done, model, report: &report };
        if observer(&progress).is_break() {
            if report.holdout.last().map(|h| h.iteration) != Some(done) {
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
    use crate::paths::{discretize, PathShape, PathSpec};
    use crate::scene::{single_wire_scene, DomainBounds, MaterialRegion, WireSource};
    use crate::Rect;
    use rand::Rng;

    fn tiny_model(bounds: DomainBounds, seed: u64) -> FieldModel {
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
        let mut m = FieldModel::new(bounds, hash, mlp, &mut rng).unwrap();
        for v in &mut m.hash_mut().tables {
            *v = rng.gen_range(-1.0..1.0);
        }
        for l in &mut m.mlp_mut().layers {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        m
    }

    fn zero_model(bounds: DomainBounds) -> FieldModel {
        let mut m = tiny_model(bounds, 0);
        for l in &mut m.mlp_mut().layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        m
    }

    fn circle(scene: &SceneConfig, c: (f64, f64), r: f64, n: usize) -> ClosedPath {
        let disc = Discretization { samples_per_unit_length: 0.0, min_samples: n };
        discretize(scene, &PathSpec::new(PathShape::Circle, Vec2::new(c.0, c.1), r), &disc).unwrap()
    }

    fn square(scene: &SceneConfig, c: (f64, f64), h: f64, n: usize) -> ClosedPath {
        let disc = Discretization { samples_per_unit_length: 0.0, min_samples: n };
        discretize(scene, &PathSpec::new(PathShape::Square, Vec2::new(c.0, c.1), h), &disc).unwrap()
    }

    /// Iron block with constant permeability, so finite differences never
    /// cross a saturation threshold.
    fn linear_iron_scene() -> SceneConfig {
        let bounds = DomainBounds::unit();
        let regions = vec![MaterialRegion::linear(Rect::new(0.4, 0.3, 0.7, 0.6), 3.0)];
        let wires = vec![WireSource { position: Vec2::new(0.5, 0.5), current: 0.7 }];
        SceneConfig::new(bounds, regions, 1.0, wires, 0.03).unwrap()
    }

    #[test]
    fn zero_field_without_current_has_zero_loss_and_gradient() {
        let scene = single_wire_scene();
        let m = zero_model(scene.bounds);
        let path = circle(&scene, (0.2, 0.2), 0.1, 64);
        assert_eq!(path.enclosed_current, 0.0);
        let (eval, grad) = path_loss(&m, &scene, &path, &LossConfig::default()).unwrap();
        assert_eq!(eval.loss, 0.0);
        assert!(grad.is_zero());
    }

    #[test]
    fn zero_field_around_unit_current_has_unit_loss() {
        let scene = single_wire_scene();
        let m = zero_model(scene.bounds);
        let path = circle(&scene, (0.5, 0.5), 0.2, 64);
        let (eval, _) = path_loss(&m, &scene, &path, &LossConfig::default()).unwrap();
        assert_eq!(eval.residuals.flux, 0.0);
        assert_eq!(eval.residuals.ampere, -1.0);
        assert_eq!(eval.loss, 1.0);
    }

    #[test]
    fn analytic_field_has_tiny_loss() {
        let scene = single_wire_scene();
        let wire = scene.wires[0];
        let path = circle(&scene, (0.45, 0.52), 0.3, 256);
        let b: Vec<Vec2> = path.points.iter().map(|&p| wire_field(wire.position, wire.current, p)).collect();
        let mu = sample_mu(&scene, &path, &b).unwrap();
        let (eval, _) = loss_and_upstream(&path, &b, &mu, &LossConfig::default(), 1.0).unwrap();
        assert!(eval.loss <= 1e-8, "loss {}", eval.loss);
    }

    #[test]
    fn analytic_field_holdout_residuals_vanish() {
        let scene = single_wire_scene();
        let wire = scene.wires[0];
        let field = FnField(|p| wire_field(wire.position, wire.current, p));
        let cfg = LossConfig::default();
        let sampler = cfg.sampler(&scene).unwrap();
        let mut rng = holdout_rng(0);
        let fixed = Discretization { samples_per_unit_length: 0.0, min_samples: 256 };
        // circles at N = 256: the midpoint rule is spectrally accurate
        let mut circles = Vec::new();
        while circles.len() < 64 {
            let spec = sampler.sample(&mut rng).unwrap();
            if spec.shape == PathShape::Circle {
                circles.push(discretize(&scene, &spec, &fixed).unwrap());
            }
        }
        let (flux, ampere) = holdout_residuals(&field, &scene, &circles).unwrap();
        assert!(flux <= 1e-6 && ampere <= 1e-6, "{flux} {ampere}");
        // the default held-out set mixes in squares, whose corners limit the
        // midpoint rule to algebraic accuracy
        let mixed = holdout_set(&scene, &cfg).unwrap();
        let (flux, ampere) = holdout_residuals(&field, &scene, &mixed).unwrap();
        assert!(flux <= 1e-4 && ampere <= 1e-4, "{flux} {ampere}");
    }

    #[test]
    fn zero_field_holdout_around_unit_current() {
        let scene = single_wire_scene();
        let m = zero_model(scene.bounds);
        let paths = vec![circle(&scene, (0.5, 0.5), 0.2, 64), square(&scene, (0.45, 0.5), 0.3, 64)];
        assert_eq!(holdout_residuals(&m, &scene, &paths).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn residual_magnitudes_do_not_depend_on_direction() {
        let scene = linear_iron_scene();
        let m = tiny_model(scene.bounds, 3);
        for path in [circle(&scene, (0.5, 0.45), 0.2, 100), square(&scene, (0.3, 0.7), 0.15, 64)] {
            let a = evaluate_path(&m, &scene, &path).unwrap();
            let b = evaluate_path(&m, &scene, &path.reversed()).unwrap();
            assert!((a.flux.abs() - b.flux.abs()).abs() <= 1e-13);
            assert!((a.ampere.abs() - b.ampere.abs()).abs() <= 1e-13);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let scene = linear_iron_scene();
        let mut m = tiny_model(scene.bounds, 11);
        // a loop crossing the iron block and enclosing the wire
        let path = circle(&scene, (0.52, 0.47), 0.15, 48);
        assert_ne!(path.enclosed_current, 0.0);
        for norm in [ResidualNorm::Squared, ResidualNorm::Absolute] {
            let cfg = LossConfig { flux_weight: 0.7, ampere_weight: 1.3, residual_norm: norm, ..LossConfig::default() };
            let (_, grad) = path_loss(&m, &scene, &path, &cfg).unwrap();
            let h = 1e-5;
            let check = |an: f64, plus: f64, minus: f64, what: &str| {
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "{what}: fd {fd} vs {an}");
            };
            for idx in 0..m.hash().tables.len() {
                let orig = m.hash().tables[idx];
                m.hash_mut().tables[idx] = orig + h;
                let plus = path_loss(&m, &scene, &path, &cfg).unwrap().0.loss;
                m.hash_mut().tables[idx] = orig - h;
                let minus = path_loss(&m, &scene, &path, &cfg).unwrap().0.loss;
                m.hash_mut().tables[idx] = orig;
                check(grad.hash[idx], plus, minus, &format!("hash {idx}"));
            }
            for l in 0..m.mlp().layers.len() {
                for k in 0..m.mlp().layers[l].weight.len() {
                    let orig = m.mlp().layers[l].weight[k];
                    m.mlp_mut().layers[l].weight[k] = orig + h;
                    let plus = path_loss(&m, &scene, &path, &cfg).unwrap().0.loss;
                    m.mlp_mut().layers[l].weight[k] = orig - h;
                    let minus = path_loss(&m, &scene, &path, &cfg).unwrap().0.loss;
                    m.mlp_mut().layers[l].weight[k] = orig;
                    check(grad.mlp[l].weight[k], plus, minus, &format!("w{l}[{k}]"));
                }
                for k in 0..m.mlp().layers[l].bias.len() {
                    let orig = m.mlp().layers[l].bias[k];
                    m.mlp_mut().layers[l].bias[k] = orig + h;
                    let plus = path_loss(&m, &scene, &path, &cfg).unwrap().0.loss;
                    m.mlp_mut().layers[l].bias[k] = orig - h;
                    let minus = path_loss(&m, &scene, &path, &cfg).unwrap().0.loss;
                    m.mlp_mut().layers[l].bias[k] = orig;
                    check(grad.mlp[l].bias[k], plus, minus, &format!("b{l}[{k}]"));
                }
            }
        }
    }

    #[test]
    fn residuals_are_linear_in_the_output_layer() {
        let bounds = DomainBounds::unit();
        let scene = SceneConfig::new(bounds, vec![MaterialRegion::linear(Rect::new(0.3, 0.3, 0.6, 0.6), 4.0)], 1.0, vec![], 0.03)
            .unwrap();
        let mut m = tiny_model(bounds, 5);
        m.mlp_mut().layers.last_mut().unwrap().bias.fill(0.0);
        let path = square(&scene, (0.5, 0.45), 0.25, 64);
        let a = evaluate_path(&m, &scene, &path).unwrap();
        m.mlp_mut().layers.last_mut().unwrap().weight.iter_mut().for_each(|w| *w *= 2.0);
        let b = evaluate_path(&m, &scene, &path).unwrap();
        assert_eq!(b.flux, 2.0 * a.flux);
        assert_eq!(b.ampere, 2.0 * a.ampere);
        assert_ne!(a.flux, 0.0);
    }

    #[test]
    fn injected_mu_gives_identical_gradient() {
        let mut scene = crate::scene::horseshoe_scene();
        // saturate part of the core so the lookup actually depends on |B|
        scene.regions[0].b_sat = 0.3;
        let m = tiny_model(scene.bounds, 8);
        let path = circle(&scene, (0.5, 0.5), 0.27, 128);
        let cfg = LossConfig::default();
        let b = m.eval_many(&path.points).unwrap();
        let mu = sample_mu(&scene, &path, &b).unwrap();
        assert!(mu.iter().any(|&v| v == 100.0) && mu.iter().any(|&v| v == 5000.0));
        let (ea, ga) = path_loss(&m, &scene, &path, &cfg).unwrap();
        let (eb, gb) = path_loss_with_mu(&m, &path, &mu, &cfg).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn non_finite_loss_names_the_path() {
        let scene = single_wire_scene();
        let path = circle(&scene, (0.5, 0.5), 0.2, 16);
        let mut b = vec![Vec2::new(1.0, 0.0); path.len()];
        b[3] = Vec2::new(f64::NAN, 0.0);
        let err = loss_and_upstream(&path, &b, &vec![1.0; path.len()], &LossConfig::default(), 1.0).unwrap_err();
        assert!(matches!(&err, FluxError::Numeric(msg) if msg.contains("Circle")), "{err}");
    }

    fn small_run(seed: u64) -> LossConfig {
        LossConfig {
            batch_paths: 6,
            iterations: 12,
            holdout_paths: 4,
            holdout_every: 5,
            seed,
            min_samples: 16,
            samples_per_width: 16.0,
            holdout_samples: 32,
            ..LossConfig::default()
        }
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        let scene = linear_iron_scene();
        let cfg = small_run(42);
        let run = |exec: Exec| {
            let mut m = tiny_model(scene.bounds, 1);
            let report = train(&mut m, &scene, &cfg, &exec).unwrap();
            (m, report)
        };
        let (ma, ra) = run(Exec::default());
        let (mb, rb) = run(Exec::default());
        let (mc, rc) = run(Exec::new(3, true));
        let totals = |r: &TrainReport| r.iterations.iter().map(|i| i.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(totals(&ra), totals(&rb));
        assert_eq!(totals(&ra), totals(&rc));
        assert_eq!(ma.hash().tables, mb.hash().tables);
        assert_eq!(ma.hash().tables, mc.hash().tables);
        assert_eq!(ra.iterations.len(), 12);
        // initial, two periodic checks and the final one
        assert_eq!(ra.holdout.iter().map(|h| h.iteration).collect::<Vec<_>>(), vec![0, 5, 10, 12]);
    }

    #[test]
    fn observer_can_stop_training() {
        let scene = single_wire_scene();
        let mut m = tiny_model(scene.bounds, 2);
        let report = train_with(&mut m, &scene, &small_run(1), &Exec::default(), |p| {
            if p.iteration == 3 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(report.iterations.len(), 3);
        assert_eq!(report.final_holdout().unwrap().iteration, 3);
    }

    #[test]
    fn training_reduces_the_loss() {
        let scene = single_wire_scene();
        let mut m = tiny_model(scene.bounds, 4);
        let cfg = LossConfig { iterations: 150, learning_rate: 1e-2, ..small_run(9) };
        let report = train(&mut m, &scene, &cfg, &Exec::default()).unwrap();
        let early = report.moving_average(19, 20).unwrap();
        let late = report.moving_average(149, 20).unwrap();
        assert!(late < 0.5 * early, "{early} -> {late}");
        assert!(report.iterations.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn lr_decays_linearly() {
        let cfg = LossConfig { iterations: 11, learning_rate: 1.0, final_lr_fraction: 0.5, ..LossConfig::default() };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert!((cfg.lr_at(5) - 0.75).abs() < 1e-15);
        assert_eq!(cfg.lr_at(10), 0.5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            LossConfig { batch_paths: 0, ..LossConfig::default() },
            LossConfig { flux_weight: 0.0, ..LossConfig::default() },
            LossConfig { ampere_weight: -1.0, ..LossConfig::default() },
            LossConfig { learning_rate: 0.0, ..LossConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(FluxError::Config(_))));
        }
    }
}
