//! Diffusion variance schedule and the closed-form forward noising process.

use crate::error::{Error, Result};

/// Variance schedule tables for a fixed number of diffusion steps.
///
/// `alpha_bars[t]` is the cumulative product of `alphas[0..=t]`, so step `t`
/// of the closed-form forward process scales the clean latent by
/// `sqrt(alpha_bars[t])` and the injected noise by `sqrt(1 - alpha_bars[t])`.
/// Immutable after construction and safe to share across client workers.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.t_steps {
            return Err(Error::StepOutOfRange { t, t_steps: self.t_steps });
        }
        Ok(())
    }
}

/// Builds a linear beta schedule inclusive of both endpoints; a single-step
/// schedule uses `beta_start` alone.
pub fn build_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidParam("t_steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::InvalidParam(format!(
            "beta endpoints must lie in (0,1), got ({beta_start}, {beta_end})"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::InvalidParam(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let betas: Vec<f64> = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { t_steps, betas, alphas, alpha_bars })
}

/// Closed-form forward noising of a clip at step `t`:
/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise`, elementwise per
/// frame. `noise` must match the shape of `z0`.
pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    z0: &[Vec<f64>],
    t: usize,
    noise: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    schedule.check_step(t)?;
    if noise.len() != z0.len() {
        return Err(Error::ShapeMismatch(format!(
            "noise has {} frames, clip has {}",
            noise.len(),
            z0.len()
        )));
    }
    let scale_signal = schedule.alpha_bars[t].sqrt();
    let scale_noise = (1.0 - schedule.alpha_bars[t]).sqrt();
    let mut out = Vec::with_capacity(z0.len());
    for (frame, noise_frame) in z0.iter().zip(noise) {
        if frame.len() != noise_frame.len() {
            return Err(Error::ShapeMismatch(format!(
                "noise frame width {} differs from latent width {}",
                noise_frame.len(),
                frame.len()
            )));
        }
        out.push(
            frame
                .iter()
                .zip(noise_frame)
                .map(|(z, n)| scale_signal * z + scale_noise * n)
                .collect(),
        );
    }
    Ok(out)
}
