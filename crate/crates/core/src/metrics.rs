//! Scalar diagnostics shared by training, evaluation and the CLI.

use crate::bdf::{bdf_coefficients, explicit_extrapolate};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::kernel::KernelEstimate;
use crate::model::AsnoModel;

/// Entries of the truth with `|t| < MAPE_FLOOR` are skipped by [`mape`].
pub const MAPE_FLOOR: f64 = 1e-8;

fn check_len(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("{} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `‖p − t‖₂ / ‖t‖₂`.
pub fn relative_l2(p: &[f64], t: &[f64]) -> Result<f64> {
    check_len(p, t, "relative_l2")?;
    let den = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("relative L2 against a zero reference".into()));
    }
    let num = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

/// `‖p − t‖₂²`.
pub fn squared_l2(p: &[f64], t: &[f64]) -> Result<f64> {
    check_len(p, t, "squared_l2")?;
    Ok(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean of [`relative_l2`] over paired rows.
pub fn mean_relative_l2(p: &[Vec<f64>], t: &[Vec<f64>]) -> Result<f64> {
    if p.is_empty() || p.len() != t.len() {
        return Err(Error::UndefinedMetric(format!("{} predictions for {} targets", p.len(), t.len())));
    }
    let mut total = 0.0;
    for (a, b) in p.iter().zip(t) {
        total += relative_l2(a, b)?;
    }
    Ok(total / p.len() as f64)
}

/// `min_c ‖c K̂ − K‖_F / ‖K‖_F`, attained at `c = ⟨K̂, K⟩ / ‖K̂‖²`.
pub fn kernel_recovery_error(learned: &KernelEstimate, analytic: &KernelEstimate) -> Result<f64> {
    if learned.size() != analytic.size() {
        return Err(Error::dim(
            "kernel_recovery_error",
            format!("{} vs {}", learned.size(), analytic.size()),
        ));
    }
    let (a, k) = (learned.k.data(), analytic.k.data());
    let kk: f64 = k.iter().map(|v| v * v).sum();
    if kk == 0.0 {
        return Err(Error::UndefinedMetric("zero analytic kernel".into()));
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let ak: f64 = a.iter().zip(k).map(|(x, y)| x * y).sum();
    let c = if aa > 0.0 { ak / aa } else { 0.0 };
    let err: f64 = a.iter().zip(k).map(|(x, y)| (c * x - y).powi(2)).sum();
    Ok((err / kk).sqrt())
}

/// Mean relative L2 between paired latents and extrapolations.
pub fn alignment_score(latents: &[Vec<f64>], extrapolations: &[Vec<f64>]) -> Result<f64> {
    mean_relative_l2(latents, extrapolations)
}

/// Mean relative L2 between the model's latent `H_{m+1}` and the BDF
/// extrapolation of the same history.
pub fn latent_bdf_alignment(model: &AsnoModel, windows: &[WindowSample]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::UndefinedMetric("no windows for latent alignment".into()));
    }
    let scheme = bdf_coefficients(model.cfg.n)?;
    let mut latents = Vec::with_capacity(windows.len());
    let mut extrap = Vec::with_capacity(windows.len());
    for w in windows {
        latents.push(model.latent(w)?);
        extrap.push(explicit_extrapolate(&scheme, &w.history)?);
    }
    alignment_score(&latents, &extrap)
}

/// Result of [`mape`]: the percentage and how many entries fell under the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mape {
    pub percent: f64,
    pub excluded: usize,
}

/// `100 · mean |p − t| / |t|` over entries with `|t| ≥ floor`.
pub fn mape(p: &[f64], t: &[f64], floor: f64) -> Result<Mape> {
    check_len(p, t, "mape")?;
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for (a, b) in p.iter().zip(t) {
        if b.abs() < floor {
            excluded += 1;
        } else {
            sum += ((a - b) / b).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(format!("all {excluded} MAPE entries below floor {floor}")));
    }
    Ok(Mape {
        percent: 100.0 * sum / used as f64,
        excluded,
    })
}
