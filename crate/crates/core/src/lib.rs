//! Integral-form neural solver for 2D magnetostatics.
//!
//! A hash-grid encoded MLP `B_net(x, y)` is trained so that, on randomly
//! drawn closed loops, the net normal flux vanishes and the circulation of
//! `B / mu` equals the enclosed wire current. A differential-form baseline
//! and a finite-difference vector-potential solver provide comparisons.

pub mod analytic;
pub mod baseline_diff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalcmp;
pub mod exec;
pub mod field;
pub mod geom;
pub mod hashgrid;
pub mod integral_loss;
pub mod net;
pub mod paths;
pub mod refsolver;
pub mod report;
pub mod scene;

pub use error::{FluxError, Result};
pub use geom::{Rect, Vec2};
