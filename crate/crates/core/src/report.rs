// Training logs shared by the integral and differential trainers.

use std::io::Write;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Integral,
    Differential,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Integral => "integral",
            Method::Differential => "differential",
        }
    }
}

/// One optimizer iteration. For the differential method `flux_loss` holds
/// the interior residual term and `ampere_loss` the boundary term.
/// `total` is the optimized objective, including any regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub flux_loss: f64,
    pub ampere_loss: f64,
    pub energy_loss: f64,
    pub total: f64,
    pub ms: f64,
}

/// Held-out loop residuals at some point of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutRecord {
    /// Number of completed iterations.
    pub iteration: usize,
    /// Training wall-clock up to this point, excluding evaluation time.
    pub elapsed_ms: f64,
    pub mean_abs_flux: f64,
    pub mean_abs_ampere: f64,
    /// Held-out samples whose saturation state changed since the last check.
    pub saturation_flips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub method: Method,
    pub iterations: Vec<IterationRecord>,
    pub holdout: Vec<HoldoutRecord>,
    /// Iterations whose optimizer step was skipped for a non-finite gradient.
    pub skipped_steps: usize,
}

impl TrainReport {
    pub fn new(method: Method) -> Self {
        Self { method, iterations: Vec::new(), holdout: Vec::new(), skipped_steps: 0 }
    }

    pub fn final_holdout(&self) -> Option<&HoldoutRecord> {
        self.holdout.last()
    }

    pub fn total_ms(&self) -> f64 {
        self.iterations.iter().map(|r| r.ms).sum()
    }

    /// Training time until the held-out Ampère residual first dropped to
    /// `threshold`, if it ever did.
    pub fn time_to_ampere(&self, threshold: f64) -> Option<f64> {
        self.holdout.iter().find(|h| h.mean_abs_ampere <= threshold).map(|h| h.elapsed_ms)
    }

    /// Trailing mean of the total loss over `window` iterations ending at
    /// `iteration` (truncated at the start of training).
    pub fn moving_average(&self, iteration: usize, window: usize) -> Option<f64> {
        if iteration >= self.iterations.len() || window == 0 {
            return None;
        }
        let start = (iteration + 1).saturating_sub(window);
        let slice = &self.iterations[start..=iteration];
        Some(slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64)
    }

    /// `method,iteration,flux_loss,ampere_loss,energy_loss,total,ms`
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,iteration,flux_loss,ampere_loss,energy_loss,total,ms")?;
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{:.3}",
                self.method.as_str(),
                r.iteration,
                r.flux_loss,
                r.ampere_loss,
                r.energy_loss,
                r.total,
                r.ms
            )?;
        }
        Ok(())
    }

    /// `method,iteration,elapsed_ms,mean_abs_flux,mean_abs_ampere,saturation_flips`
    pub fn write_holdout_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,iteration,elapsed_ms,mean_abs_flux,mean_abs_ampere,saturation_flips")?;
        for h in &self.holdout {
            writeln!(
                out,
                "{},{},{:.3},{:e},{:e},{}",
                self.method.as_str(),
                h.iteration,
                h.elapsed_ms,
                h.mean_abs_flux,
                h.mean_abs_ampere,
                h.saturation_flips
            )?;
        }
        Ok(())
    }
}
