//! Client-side round work: local adapter optimization, update deltas, and
//! the privacy-safe reliability scalar.

use crate::denoiser::{
    adapter_gradients, flatten_adapters, unflatten_adapters, AdapterSet, BackboneParams, TrainItem,
};
use crate::error::{Error, Result};
use crate::evaluation::{eval_identity, eval_temporal, reverse_sample, SamplerConfig};
use crate::linalg;
use crate::objectives::{combined_loss, FrozenProbes, LossBreakdown, LossWeights};
use crate::rng::{derive_seed, CounterRng};
use crate::schedule::NoiseSchedule;
use crate::synthdata::{sample_batch, ClientDataset, Identity};

/// Reverse steps used when generating reliability clips; kept small so the
/// per-round cost stays low.
const RELIABILITY_SAMPLER_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// FedProx proximal coefficient; zero disables the proximal step
    /// entirely so the path is bit-identical to plain local training.
    pub prox_mu: f64,
    pub weights: LossWeights,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 4,
            batch_size: 2,
            learning_rate: 0.3,
            prox_mu: 0.0,
            weights: LossWeights::default(),
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::InvalidParam("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParam("learning_rate must be finite and >= 0".into()));
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::InvalidParam("prox_mu must be finite and >= 0".into()));
        }
        self.weights.validate()
    }
}

/// Loss of one optimization step: the unweighted terms plus the weighted
/// total (including the proximal penalty when active).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepLoss {
    pub breakdown: LossBreakdown,
    pub total: f64,
}

/// Privacy-safe scalar reliability signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityScore {
    pub id_sim: f64,
    pub temp_stab: f64,
    pub alpha_mix: f64,
    pub s: f64,
}

impl ReliabilityScore {
    pub fn new(id_sim: f64, temp_stab: f64, alpha_mix: f64) -> Result<Self> {
        for (name, v) in [("id_sim", id_sim), ("temp_stab", temp_stab), ("alpha_mix", alpha_mix)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        let s = alpha_mix * id_sim + (1.0 - alpha_mix) * temp_stab;
        Ok(Self { id_sim, temp_stab, alpha_mix, s })
    }
}

/// Runs local adapter optimization from the broadcast global state and
/// returns the trained adapters, the raw flat delta, and the per-batch loss
/// trace.
///
/// Each batch takes one gradient step on the combined objective; when
/// `prox_mu > 0` the proximal penalty `(mu/2)||phi - phi_global||^2` is then
/// applied through its exact proximal map, shrinking the step toward the
/// global state by `1/(1 + lr*mu)`. Any non-finite loss aborts the client's
/// round so the server can treat it as a dropout.
pub fn local_train(
    backbone: &BackboneParams,
    global_adapters: &AdapterSet,
    dataset: &ClientDataset,
    identities: &[Identity],
    config: &LocalTrainConfig,
    schedule: &NoiseSchedule,
    probes: &FrozenProbes,
    seed: u64,
) -> Result<(AdapterSet, Vec<f64>, Vec<TrainStepLoss>)> {
    config.validate()?;
    if dataset.val_start == 0 {
        return Err(Error::EmptySplit("training"));
    }
    let global_flat = flatten_adapters(global_adapters);
    let mut adapters = global_adapters.clone();
    let mut trace = Vec::new();
    let mut rng = CounterRng::new(seed);
    let batches_per_epoch = dataset.val_start.div_ceil(config.batch_size);

    for _epoch in 0..config.local_epochs {
        for _batch in 0..batches_per_epoch {
            let draws = sample_batch(dataset, config.batch_size, schedule.t_steps(), &mut rng)?;
            let items: Vec<TrainItem<'_>> = draws
                .iter()
                .map(|d| {
                    let clip = &dataset.clips[d.clip_index];
                    TrainItem {
                        frames: &clip.frames,
                        cond: &clip.cond,
                        ref_embedding: &identities[clip.identity_id].embedding,
                        t: d.t,
                        noise: &d.noise,
                    }
                })
                .collect();
            let (grads, parts) =
                adapter_gradients(backbone, &adapters, &items, schedule, probes, &config.weights)?;
            let mut total = combined_loss(&parts, &config.weights)
                .map_err(|_| Error::Divergence(dataset.client_id))?;
            if config.prox_mu > 0.0 {
                let drift = linalg::sub(&flatten_adapters(&adapters), &global_flat);
                total += 0.5 * config.prox_mu * linalg::dot(&drift, &drift);
            }
            if !total.is_finite() {
                return Err(Error::Divergence(dataset.client_id));
            }
            trace.push(TrainStepLoss { breakdown: parts, total });

            adapters.axpy(-config.learning_rate, &grads);
            if config.prox_mu > 0.0 {
                let shrink = 1.0 / (1.0 + config.learning_rate * config.prox_mu);
                let mut flat = flatten_adapters(&adapters);
                for (x, g) in flat.iter_mut().zip(&global_flat) {
                    *x = g + (*x - g) * shrink;
                }
                adapters = unflatten_adapters(&flat, &adapters)?;
            }
        }
    }
    let delta = linalg::sub(&flatten_adapters(&adapters), &global_flat);
    Ok((adapters, delta, trace))
}

/// Scores the trained model on the local validation split: identity
/// similarity of short generated clips against the labeled reference
/// embeddings, and temporal stability of those generations.
pub fn compute_reliability(
    backbone: &BackboneParams,
    adapters: &AdapterSet,
    dataset: &ClientDataset,
    identities: &[Identity],
    probes: &FrozenProbes,
    schedule: &NoiseSchedule,
    alpha_mix: f64,
    seed: u64,
) -> Result<ReliabilityScore> {
    let validation = dataset.validation();
    if validation.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let steps = RELIABILITY_SAMPLER_STEPS.min(schedule.t_steps());
    let mut id_sum = 0.0;
    let mut jitter_sum = 0.0;
    for (item_idx, clip) in validation.iter().enumerate() {
        let sampler = SamplerConfig {
            num_steps: steps,
            stochastic: false,
            seed: derive_seed(seed, "reliability-item", &[item_idx as u64]),
        };
        let reference = &identities[clip.identity_id].embedding;
        let generated =
            reverse_sample(backbone, adapters, &clip.cond, reference, schedule, &sampler)?;
        id_sum += eval_identity(&generated, reference, probes)?;
        jitter_sum += eval_temporal(&generated)?.1;
    }
    let count = validation.len() as f64;
    let id_sim = (id_sum / count).clamp(0.0, 1.0);
    let temp_stab = 1.0 / (1.0 + jitter_sum / count);
    ReliabilityScore::new(id_sim, temp_stab, alpha_mix)
}
