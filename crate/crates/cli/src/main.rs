// fluxloop: train, solve, compare and export 2D magnetostatic fields.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use fluxloop::baseline_diff::train_baseline_with;
use fluxloop::checkpoint::{read_checkpoint, write_checkpoint};
use fluxloop::config::RunConfig;
use fluxloop::evalcmp::{compare, qualitative_checks, rasterize, write_ppm, HorseshoeLayout, Metrics, QualitativeReport};
use fluxloop::exec::Exec;
use fluxloop::integral_loss::{train_with, Progress};
use fluxloop::net::FieldModel;
use fluxloop::refsolver::{solve_reference_stats, FieldGrid};
use fluxloop::report::TrainReport;
use fluxloop::scene::SceneConfig;
use fluxloop::{FluxError, Result};

const DEFAULT_CONFIG: &str = include_str!("../../../configs/horseshoe.toml");

#[derive(Parser)]
#[command(name = "fluxloop", version, about = "Integral-form neural magnetostatics solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults to the built-in horseshoe scene.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (falls back to FLUXLOOP_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Fixed-order reductions, so results do not depend on the thread count.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1,
          default_value_t = true, default_missing_value = "true")]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network with the loop (integral) loss.
    Train(Common),
    /// Train the network with the pointwise differential loss.
    TrainBaseline(Common),
    /// Solve the finite-difference reference.
    Reference(Common),
    /// Compare two field grids (.fgrd); a model checkpoint (.flux) is
    /// rasterized onto the other grid first.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rasterize a checkpoint to CSV, PPM and binary grids.
    Export {
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train, solve the reference, compare and write report.csv.
    Demo(Common),
}

struct Run {
    cfg: RunConfig,
    scene: SceneConfig,
    exec: Exec,
    out: PathBuf,
}

impl Run {
    fn setup(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::from_toml(DEFAULT_CONFIG)?,
        };
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed);
            cfg.validate()?;
        }
        let scene = cfg.scene()?;
        let exec = Exec::new(Exec::resolve_threads(common.threads)?, common.deterministic);
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)
            .map_err(|e| FluxError::Config(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self { cfg, scene, exec, out })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| FluxError::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(BufWriter::new(file))
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn manifest(&self, command: &str) -> Result<()> {
        let text = self.cfg.manifest(command, self.exec.threads, self.exec.deterministic)?;
        self.write("manifest.toml", |w| Ok(w.write_all(text.as_bytes())?))
    }

    fn write_grid(&self, stem: &str, grid: &FieldGrid) -> Result<()> {
        self.write(&format!("{stem}.csv"), |w| grid.write_csv(w))?;
        self.write(&format!("{stem}.ppm"), |w| write_ppm(grid, w))?;
        self.write(&format!("{stem}.fgrd"), |w| grid.write_binary(w))
    }

    fn write_training(&self, model: &FieldModel, report: &TrainReport) -> Result<()> {
        self.write("model.flux", |w| write_checkpoint(model, w))?;
        self.write("train.csv", |w| report.write_csv(w))?;
        self.write("holdout.csv", |w| report.write_holdout_csv(w))?;
        let e = &self.cfg.eval;
        self.write_grid("field", &rasterize(model, &self.scene, e.grid_nx, e.grid_ny)?)
    }

    fn train(&self, differential: bool) -> Result<(FieldModel, TrainReport)> {
        let mut model = self.cfg.build_model()?;
        let t = &self.cfg.training;
        let report = if differential {
            train_baseline_with(&mut model, &self.scene, &self.cfg.baseline, t, &self.exec, log_progress)?
        } else {
            train_with(&mut model, &self.scene, t, &self.exec, log_progress)?
        };
        if report.skipped_steps > 0 {
            eprintln!("warning: {} optimizer steps skipped for non-finite gradients", report.skipped_steps);
        }
        Ok((model, report))
    }

    fn reference(&self) -> Result<FieldGrid> {
        let (grid, stats) = solve_reference_stats(&self.scene, &self.cfg.fd)?;
        eprintln!(
            "reference: {} sweeps over {} rounds, residual {:.2e}",
            stats.sweeps.iter().sum::<usize>(),
            stats.sweeps.len(),
            stats.final_residual
        );
        if stats.last_mu_changes > 0 {
            eprintln!("warning: {} nodes still changed saturation state in the last round", stats.last_mu_changes);
        }
        Ok(grid)
    }
}

fn log_progress(p: &Progress) -> ControlFlow<()> {
    if let Some(h) = p.report.holdout.last().filter(|h| h.iteration == p.iteration) {
        eprintln!(
            "iter {:>6}  holdout |flux| {:.3e}  |ampere| {:.3e}  ({:.1} s)",
            h.iteration,
            h.mean_abs_flux,
            h.mean_abs_ampere,
            h.elapsed_ms / 1e3
        );
    }
    ControlFlow::Continue(())
}

/// Qualitative checks are only meaningful on horseshoe-like scenes that
/// cover the grid.
fn qualitative(grid: &FieldGrid, run: &Run) -> Option<Result<QualitativeReport>> {
    if grid.bounds != run.scene.bounds || HorseshoeLayout::from_scene(&run.scene).is_err() {
        return None;
    }
    Some(qualitative_checks(grid, &run.scene, &run.cfg.eval))
}

fn load_grid(path: &Path, other: Option<&FieldGrid>, run: &Run) -> Result<FieldGrid> {
    let file = File::open(path).map_err(|e| FluxError::Config(format!("cannot read {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "flux") {
        let model = read_checkpoint(reader)?;
        let (nx, ny) = other.map_or((run.cfg.eval.grid_nx, run.cfg.eval.grid_ny), |g| (g.nx, g.ny));
        let scene = if model.bounds() == &run.scene.bounds {
            run.scene.clone()
        } else {
            SceneConfig::new(*model.bounds(), Vec::new(), 1.0, Vec::new(), run.scene.singularity_radius)?
        };
        rasterize(&model, &scene, nx, ny)
    } else {
        FieldGrid::read_binary(reader)
    }
}

fn print_metrics(m: &Metrics) {
    println!("relative_l2 = {:.6}", m.relative_l2);
    println!("corr = {:.6}", m.pearson);
    println!("cells = {}", m.cells);
}

fn print_qualitative(label: &str, q: Option<&QualitativeReport>, run: &Run) {
    match q {
        Some(q) => println!(
            "{label}: corner_cutting = {} ({:.2}), airgap_vshape = {} ({:.2}), containment_ratio = {:.2}, pass = {}",
            q.corner_cutting,
            q.corner_ratio,
            q.airgap_vshape,
            q.vshape_ratio,
            q.containment_ratio,
            q.passes(&run.cfg.eval)
        ),
        None => println!("{label}: qualitative checks n/a (scene has no horseshoe layout)"),
    }
}

fn qualitative_rows(prefix: &str, q: Option<&QualitativeReport>, run: &Run, rows: &mut Vec<(String, String)>) {
    let Some(q) = q else {
        rows.push((format!("{prefix}_qualitative"), "n/a".into()));
        return;
    };
    rows.push((format!("{prefix}_corner_cutting"), q.corner_cutting.to_string()));
    rows.push((format!("{prefix}_corner_ratio"), format!("{:.6e}", q.corner_ratio)));
    rows.push((format!("{prefix}_airgap_vshape"), q.airgap_vshape.to_string()));
    rows.push((format!("{prefix}_vshape_ratio"), format!("{:.6e}", q.vshape_ratio)));
    rows.push((format!("{prefix}_containment_ratio"), format!("{:.6e}", q.containment_ratio)));
    rows.push((format!("{prefix}_pass"), q.passes(&run.cfg.eval).to_string()));
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(common) => {
            let run = Run::setup(&common)?;
            let (model, report) = run.train(false)?;
            run.write_training(&model, &report)?;
            run.manifest("train")
        }
        Command::TrainBaseline(common) => {
            let run = Run::setup(&common)?;
            let (model, report) = run.train(true)?;
            run.write_training(&model, &report)?;
            run.manifest("train-baseline")
        }
        Command::Reference(common) => {
            let run = Run::setup(&common)?;
            let grid = run.reference()?;
            run.write_grid("reference", &grid)?;
            run.manifest("reference")
        }
        Command::Compare { a, b, common } => {
            let run = Run::setup(&common)?;
            // Grids first, so a checkpoint can take the shape of the grid.
            let (ga, gb) = match (a.extension().is_some_and(|e| e == "flux"), b.extension().is_some_and(|e| e == "flux")) {
                (true, false) => {
                    let gb = load_grid(&b, None, &run)?;
                    (load_grid(&a, Some(&gb), &run)?, gb)
                }
                _ => {
                    let ga = load_grid(&a, None, &run)?;
                    let gb = load_grid(&b, Some(&ga), &run)?;
                    (ga, gb)
                }
            };
            let metrics = compare(&ga, &gb)?;
            print_metrics(&metrics);
            let qa = qualitative(&ga, &run).transpose()?;
            let qb = qualitative(&gb, &run).transpose()?;
            print_qualitative("a", qa.as_ref(), &run);
            print_qualitative("b", qb.as_ref(), &run);
            Ok(())
        }
        Command::Export { model, common } => {
            let run = Run::setup(&common)?;
            let grid = load_grid(&model, None, &run)?;
            run.write_grid("field", &grid)?;
            run.manifest("export")
        }
        Command::Demo(common) => {
            let run = Run::setup(&common)?;
            let (model, report) = run.train(false)?;
            run.write("model.flux", |w| write_checkpoint(&model, w))?;
            run.write("train.csv", |w| report.write_csv(w))?;
            run.write("holdout.csv", |w| report.write_holdout_csv(w))?;
            let reference = run.reference()?;
            run.write_grid("reference", &reference)?;
            let field = rasterize(&model, &run.scene, reference.nx, reference.ny)?;
            run.write_grid("field", &field)?;
            let metrics = compare(&field, &reference)?;
            print_metrics(&metrics);
            let q_model = qualitative(&field, &run).transpose()?;
            let q_ref = qualitative(&reference, &run).transpose()?;
            print_qualitative("model", q_model.as_ref(), &run);
            print_qualitative("reference", q_ref.as_ref(), &run);

            // Timings are left out so the report is reproducible byte for byte.
            let mut rows: Vec<(String, String)> = vec![
                ("seed".into(), run.cfg.seed().to_string()),
                ("iterations".into(), report.iterations.len().to_string()),
                ("final_loss".into(), format!("{:.6e}", report.iterations.last().map_or(f64::NAN, |r| r.total))),
            ];
            if let Some(h) = report.final_holdout() {
                rows.push(("holdout_mean_abs_flux".into(), format!("{:.6e}", h.mean_abs_flux)));
                rows.push(("holdout_mean_abs_ampere".into(), format!("{:.6e}", h.mean_abs_ampere)));
            }
            rows.push(("relative_l2".into(), format!("{:.6e}", metrics.relative_l2)));
            rows.push(("pearson".into(), format!("{:.6e}", metrics.pearson)));
            rows.push(("cells".into(), metrics.cells.to_string()));
            qualitative_rows("model", q_model.as_ref(), &run, &mut rows);
            qualitative_rows("reference", q_ref.as_ref(), &run, &mut rows);
            run.write("report.csv", |w| {
                writeln!(w, "metric,value")?;
                for (k, v) in &rows {
                    writeln!(w, "{k},{v}")?;
                }
                Ok(())
            })?;
            run.manifest("demo")
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
