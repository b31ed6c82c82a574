//! Reverse-diffusion sampling and per-round validation metrics.

use crate::denoiser::{predict_noise, AdapterSet, BackboneParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::{
    clip_loss_terms, combined_loss, ClipLossInputs, FrozenProbes, LossBreakdown, LossWeights,
};
use crate::rng::{derive_seed, CounterRng};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::synthdata::LatentClip;

/// Reverse-sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Number of reverse steps, at most the schedule length.
    pub num_steps: usize,
    /// Adds the ancestral noise term when set.
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 10, stochastic: false, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.t_steps() {
            return Err(Error::InvalidParam(format!(
                "sampler num_steps must lie in 1..={}, got {}",
                schedule.t_steps(),
                self.num_steps
            )));
        }
        Ok(())
    }
}

/// One row of the per-round metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub val_loss: f64,
    pub val_identity: f64,
    pub val_temporal: f64,
}

/// Evenly spaced schedule indices for a reduced-step reverse pass,
/// ascending, always containing the top index.
fn sampler_indices(t_steps: usize, num_steps: usize) -> Vec<usize> {
    if num_steps == 1 {
        return vec![t_steps - 1];
    }
    let mut idx: Vec<usize> = (0..num_steps)
        .map(|s| ((t_steps - 1) as f64 * s as f64 / (num_steps - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

/// Runs ancestral reverse denoising from an explicit starting latent using
/// an arbitrary noise predictor. Each update over the (possibly subsampled)
/// index sequence uses the effective per-step coefficients
/// `alpha = alpha_bar[cur] / alpha_bar[prev]` and `beta = 1 - alpha`, which
/// reduce to the stored tables when all steps are used.
pub fn reverse_denoise_from<F>(
    mut latent: Vec<Vec<f64>>,
    mut predictor: F,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Vec<f64>], usize) -> Result<Vec<Vec<f64>>>,
{
    config.validate(schedule)?;
    let indices = sampler_indices(schedule.t_steps(), config.num_steps);
    let mut noise_rng = CounterRng::derived(config.seed, "sampler-noise", &[]);
    for pos in (0..indices.len()).rev() {
        let t = indices[pos];
        let alpha_bar = schedule.alpha_bar(t);
        let alpha_bar_prev = if pos > 0 { schedule.alpha_bar(indices[pos - 1]) } else { 1.0 };
        let alpha = alpha_bar / alpha_bar_prev;
        let beta = 1.0 - alpha;
        let predicted = predictor(&latent, t)?;
        let noise_scale = beta / (1.0 - alpha_bar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let add_noise = config.stochastic && pos > 0;
        let ancestral_std = beta.sqrt();
        for (frame, pred) in latent.iter_mut().zip(&predicted) {
            if pred.len() != frame.len() {
                return Err(Error::ShapeMismatch("predictor output width".into()));
            }
            for (z, p) in frame.iter_mut().zip(pred) {
                *z = (*z - noise_scale * p) * inv_sqrt_alpha;
                if add_noise {
                    *z += ancestral_std * noise_rng.normal();
                }
            }
        }
    }
    Ok(latent)
}

/// Generates a clip from seeded Gaussian noise by iterative reverse
/// denoising conditioned on the conditioning sequence and identity
/// embedding. The latent decoder is the identity map, so the returned
/// frames are the generated clip.
pub fn reverse_sample(
    backbone: &BackboneParams,
    adapters: &AdapterSet,
    cond: &[Vec<f64>],
    ident: &[f64],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Vec<Vec<f64>>> {
    if cond.is_empty() {
        return Err(Error::ShapeMismatch("conditioning sequence is empty".into()));
    }
    config.validate(schedule)?;
    let width = backbone.dims().latent;
    let mut init_rng = CounterRng::derived(config.seed, "sampler-init", &[]);
    let latent: Vec<Vec<f64>> = (0..cond.len()).map(|_| init_rng.normal_vec(width)).collect();
    reverse_denoise_from(
        latent,
        |z, t| predict_noise(backbone, adapters, z, t, cond, ident),
        schedule,
        config,
    )
}

/// Identity score of a generated clip against a reference embedding:
/// `(1 + cos(g(mean frame), ref)) / 2`, in [0, 1].
pub fn eval_identity(
    generated: &[Vec<f64>],
    ref_embedding: &[f64],
    probes: &FrozenProbes,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let width = generated[0].len();
    let mut mean = vec![0.0; width];
    for frame in generated {
        linalg::axpy(&mut mean, 1.0 / generated.len() as f64, frame);
    }
    let embedded = probes.embed_identity(&mean)?;
    let cos = linalg::cosine(&embedded, ref_embedding)?;
    Ok((1.0 + cos) / 2.0)
}

/// Temporal statistics of a clip: `(stability, jitter)` where jitter is the
/// mean L2 difference of consecutive frames and stability is `1/(1+jitter)`.
pub fn eval_temporal(generated: &[Vec<f64>]) -> Result<(f64, f64)> {
    if generated.len() < 2 {
        return Err(Error::TooFewFrames(generated.len()));
    }
    let mut jitter = 0.0;
    for f in 1..generated.len() {
        jitter += linalg::l2_norm(&linalg::sub(&generated[f], &generated[f - 1]));
    }
    jitter /= (generated.len() - 1) as f64;
    Ok((1.0 / (1.0 + jitter), jitter))
}

/// One validation clip with its reference embedding.
pub struct EvalItem<'a> {
    pub clip: &'a LatentClip,
    pub ref_embedding: &'a [f64],
}

/// Everything fixed across the evaluation of one model state.
pub struct EvalContext<'a> {
    pub backbone: &'a BackboneParams,
    pub schedule: &'a NoiseSchedule,
    pub probes: &'a FrozenProbes,
    pub weights: &'a LossWeights,
    pub sampler: &'a SamplerConfig,
    /// Root seed for the evaluation noise and generation streams. The
    /// streams do not depend on the round, so successive rounds score the
    /// model on identical draws.
    pub run_seed: u64,
    /// Number of (step, noise) draws per clip in the loss estimate.
    pub noise_draws: usize,
}

/// Evaluates the global model on a validation pool: mean combined objective
/// plus identity and temporal metrics of sampled generations. Also returns
/// the mean unweighted loss breakdown.
pub fn eval_round(
    ctx: &EvalContext<'_>,
    adapters: &AdapterSet,
    pool: &[EvalItem<'_>],
    round: usize,
) -> Result<(RoundRecord, LossBreakdown)> {
    if pool.is_empty() {
        return Err(Error::EmptySplit("evaluation pool"));
    }
    if ctx.noise_draws == 0 {
        return Err(Error::InvalidParam("noise_draws must be >= 1".into()));
    }
    let mut loss_sum = 0.0;
    let mut parts_sum = LossBreakdown::default();
    let mut identity_sum = 0.0;
    let mut temporal_sum = 0.0;
    let inv_draws = 1.0 / (pool.len() * ctx.noise_draws) as f64;

    for (idx, item) in pool.iter().enumerate() {
        for draw in 0..ctx.noise_draws {
            let mut rng =
                CounterRng::derived(ctx.run_seed, "eval-loss", &[idx as u64, draw as u64]);
            let t = rng.below(ctx.schedule.t_steps() as u64) as usize;
            let noise: Vec<Vec<f64>> =
                item.clip.frames.iter().map(|f| rng.normal_vec(f.len())).collect();
            let z_t = forward_diffuse(ctx.schedule, &item.clip.frames, t, &noise)?;
            let predicted =
                predict_noise(ctx.backbone, adapters, &z_t, t, &item.clip.cond, item.ref_embedding)?;
            let inputs = ClipLossInputs {
                true_noise: &noise,
                predicted: &predicted,
                z_t: &z_t,
                alpha_bar: ctx.schedule.alpha_bar(t),
                target_frames: &item.clip.frames,
                cond: &item.clip.cond,
                ref_embedding: item.ref_embedding,
            };
            let parts = clip_loss_terms(&inputs, ctx.probes)?;
            loss_sum += combined_loss(&parts, ctx.weights)? * inv_draws;
            parts_sum.diffusion += parts.diffusion * inv_draws;
            parts_sum.tdc += parts.tdc * inv_draws;
            parts_sum.identity += parts.identity * inv_draws;
            parts_sum.perceptual += parts.perceptual * inv_draws;
            parts_sum.sync += parts.sync * inv_draws;
        }

        let sampler = SamplerConfig {
            seed: derive_seed(ctx.run_seed, "eval-gen", &[idx as u64]),
            ..ctx.sampler.clone()
        };
        let generated = reverse_sample(
            ctx.backbone,
            adapters,
            &item.clip.cond,
            item.ref_embedding,
            ctx.schedule,
            &sampler,
        )?;
        identity_sum += eval_identity(&generated, item.ref_embedding, ctx.probes)?;
        temporal_sum += eval_temporal(&generated)?.0;
    }

    let record = RoundRecord {
        round,
        val_loss: loss_sum,
        val_identity: identity_sum / pool.len() as f64,
        val_temporal: temporal_sum / pool.len() as f64,
    };
    if !(record.val_loss.is_finite()
        && record.val_identity.is_finite()
        && record.val_temporal.is_finite())
    {
        return Err(Error::NonFinite("round record"));
    }
    Ok((record, parts_sum))
}
