//! Toy datasets, run configuration and the training pipelines driven by
//! the command-line tool.

pub mod accomp;
pub mod config;
pub mod flow2d;
pub mod melody_task;
pub mod style;
pub mod synth;

use std::io::Write;

use crate::error::{Error, Result};

/// Fails with the step index when a loss stops being finite.
pub fn check_loss(step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("training loss is {loss}"),
        })
    }
}

pub fn write_loss_csv<W: Write>(losses: &[f64], mut w: W) -> Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

/// Mean of the first and last `k` entries.
pub fn loss_ends(losses: &[f64], k: usize) -> (f64, f64) {
    let k = k.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..k.min(losses.len())]), mean(&losses[losses.len().saturating_sub(k)..]))
}
