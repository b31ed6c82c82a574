//! Round orchestration: client sampling, strategy-specific aggregation, and
//! the federated training loop.

use crate::client::{compute_reliability, local_train, LocalTrainConfig};
use crate::denoiser::{flatten_adapters, unflatten_adapters, AdapterSet, BackboneParams, TrainItem};
use crate::error::{Error, Result};
use crate::evaluation::{eval_round, EvalContext, EvalItem, RoundRecord, SamplerConfig};
use crate::objectives::{FrozenProbes, LossBreakdown};
use crate::privacy::{clip_and_noise, mask_update, unmask_dropouts, DpConfig, MaskingSession};
use crate::rng::{derive_seed, CounterRng};
use crate::schedule::NoiseSchedule;
use crate::synthdata::World;
use crate::denoiser::{apply_backbone_step, backbone_diffusion_gradients};

/// Aggregation strategy for the server update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    FedAvg,
    FedProx,
    Isfa,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Self::FedAvg),
            "fedprox" => Ok(Self::FedProx),
            "isfa" => Ok(Self::Isfa),
            other => Err(Error::InvalidParam(format!(
                "unknown strategy '{other}' (expected fedavg, fedprox, or isfa)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedProx => "fedprox",
            Self::Isfa => "isfa",
        }
    }
}

/// Server-side protocol settings. The proximal coefficient in the client
/// config is honored only under the `fedprox` strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub client_fraction: f64,
    pub strategy: Strategy,
    /// ISFA sharpness.
    pub gamma: f64,
    /// Server update scale.
    pub eta: f64,
    pub dp: DpConfig,
    pub secure_agg: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            client_fraction: 0.5,
            strategy: Strategy::FedAvg,
            gamma: 5.0,
            eta: 1.0,
            dp: DpConfig::default(),
            secure_agg: true,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidParam("rounds must be >= 1".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "client_fraction must lie in (0,1], got {}",
                self.client_fraction
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParam("gamma must be finite and >= 0".into()));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidParam("eta must be finite and > 0".into()));
        }
        self.dp.validate()
    }
}

/// Validation budget and reliability mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Clips sampled (deterministically) from the union validation pool.
    pub pool_clips: usize,
    /// (step, noise) draws per clip in the loss estimate.
    pub noise_draws: usize,
    /// Mixing coefficient between identity and temporal reliability.
    pub alpha_mix: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pool_clips: 8, noise_draws: 4, alpha_mix: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_clips == 0 || self.noise_draws == 0 {
            return Err(Error::InvalidParam("eval budget must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return Err(Error::InvalidParam("alpha_mix must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Protected flat delta (clipped and noised when DP is on).
    pub delta: Vec<f64>,
    /// Reliability scalar in `[0,1]`.
    pub score: f64,
    /// Local training-sample count.
    pub n_k: usize,
}

/// Uniform sample without replacement of `max(1, round(p*K))` client ids,
/// deterministic in `(seed, round)`. Returned ascending.
pub fn sample_clients(all_ids: &[usize], p: f64, round: u64, seed: u64) -> Result<Vec<usize>> {
    if all_ids.is_empty() {
        return Err(Error::InvalidParam("client universe is empty".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParam(format!("client fraction must lie in (0,1], got {p}")));
    }
    let count = ((p * all_ids.len() as f64).round() as usize).clamp(1, all_ids.len());
    let mut ids = all_ids.to_vec();
    ids.sort_unstable();
    let mut rng = CounterRng::derived(seed, "participants", &[round]);
    for i in 0..count {
        let j = i + rng.below((ids.len() - i) as u64) as usize;
        ids.swap(i, j);
    }
    let mut chosen = ids[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

fn check_updates(updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdateSet);
    }
    for u in updates {
        if u.n_k == 0 {
            return Err(Error::InvalidParam(format!("client {} reports n_k = 0", u.client_id)));
        }
        if !(0.0..=1.0).contains(&u.score) {
            return Err(Error::InvalidParam(format!(
                "client {} score {} outside [0,1]",
                u.client_id, u.score
            )));
        }
    }
    Ok(())
}

/// Plain data-size weights `n_k / sum(n_j)`, the FedAvg/FedProx rule.
pub fn data_size_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    check_updates(updates)?;
    let total: f64 = updates.iter().map(|u| u.n_k as f64).sum();
    Ok(updates.iter().map(|u| u.n_k as f64 / total).collect())
}

/// Quality-aware weights `n_k exp(gamma s_k) / sum(n_j exp(gamma s_j))`,
/// computed with a max-shifted exponent. At `gamma = 0` this reduces
/// bit-for-bit to the data-size rule.
pub fn isfa_weights(updates: &[ClientUpdate], gamma: f64) -> Result<Vec<f64>> {
    check_updates(updates)?;
    let shift = updates.iter().map(|u| gamma * u.score).fold(f64::NEG_INFINITY, f64::max);
    let numerators: Vec<f64> =
        updates.iter().map(|u| u.n_k as f64 * (gamma * u.score - shift).exp()).collect();
    let total: f64 = numerators.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::NonFinite("isfa weight normalization"));
    }
    Ok(numerators.iter().map(|n| n / total).collect())
}

/// Applies the server update `phi + eta * sum_k w_k delta_k` over updates
/// sorted by ascending client id.
pub fn aggregate(
    global_flat: &[f64],
    updates: &[ClientUpdate],
    weights: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    check_updates(updates)?;
    if weights.len() != updates.len() {
        return Err(Error::CountMismatch {
            context: "aggregate weights",
            expected: updates.len(),
            got: weights.len(),
        });
    }
    let weight_sum: f64 = weights.iter().sum();
    if (weight_sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!("weights sum to {weight_sum}, expected 1")));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let mut out = global_flat.to_vec();
    for &i in &order {
        if updates[i].delta.len() != global_flat.len() {
            return Err(Error::LengthMismatch {
                got: updates[i].delta.len(),
                expected: global_flat.len(),
            });
        }
        let scale = eta * weights[i];
        for (o, d) in out.iter_mut().zip(&updates[i].delta) {
            *o += scale * d;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("aggregated adapter state"));
    }
    Ok(out)
}

/// Everything a federation run needs, borrowed.
pub struct FederationSetup<'a> {
    pub world: &'a World,
    pub backbone: &'a BackboneParams,
    pub schedule: &'a NoiseSchedule,
    pub probes: &'a FrozenProbes,
    pub federation: &'a FederationConfig,
    pub train: &'a LocalTrainConfig,
    pub sampler: &'a SamplerConfig,
    pub eval: &'a EvalConfig,
}

/// Outcome of one round, delivered to the round observer.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub record: RoundRecord,
    pub breakdown: LossBreakdown,
    pub participants: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Reliability scalar per surviving client, ascending by id.
    pub scores: Vec<(usize, f64)>,
    /// Set when no update was applied this round (every participant failed
    /// or the aggregate was rejected).
    pub skipped: bool,
}

/// Final state of a federation run.
pub struct FederationOutcome {
    pub final_adapters: AdapterSet,
    pub best_adapters: AdapterSet,
    pub best_round: usize,
    pub records: Vec<RoundRecord>,
    pub breakdowns: Vec<LossBreakdown>,
}

fn build_eval_pool(world: &World, budget: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = Vec::new();
    for client in &world.clients {
        for idx in client.val_start..client.clips.len() {
            all.push((client.client_id, idx));
        }
    }
    if all.len() <= budget {
        return all;
    }
    let mut rng = CounterRng::derived(seed, "eval-pool", &[]);
    for i in 0..budget {
        let j = i + rng.below((all.len() - i) as u64) as usize;
        all.swap(i, j);
    }
    let mut chosen = all[..budget].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Centrally pretrains the backbone on pooled training clips with the plain
/// diffusion objective. A zero step count leaves the backbone untouched.
pub fn pretrain_backbone(
    backbone: &mut BackboneParams,
    world: &World,
    schedule: &NoiseSchedule,
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if batch_size == 0 || !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::InvalidParam("pretrain batch size and learning rate must be positive".into()));
    }
    let pool: Vec<(usize, usize)> = world
        .clients
        .iter()
        .flat_map(|c| (0..c.val_start).map(move |i| (c.client_id, i)))
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptySplit("pretraining"));
    }
    let mut rng = CounterRng::derived(seed, "pretrain", &[]);
    for _ in 0..steps {
        let mut noises = Vec::with_capacity(batch_size);
        let mut picks = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (client_id, clip_idx) = pool[rng.below(pool.len() as u64) as usize];
            let clip = &world.clients[client_id].clips[clip_idx];
            let t = rng.below(schedule.t_steps() as u64) as usize;
            let noise: Vec<Vec<f64>> =
                clip.frames.iter().map(|f| rng.normal_vec(f.len())).collect();
            picks.push((client_id, clip_idx, t));
            noises.push(noise);
        }
        let items: Vec<TrainItem<'_>> = picks
            .iter()
            .zip(&noises)
            .map(|(&(client_id, clip_idx, t), noise)| {
                let clip = &world.clients[client_id].clips[clip_idx];
                TrainItem {
                    frames: &clip.frames,
                    cond: &clip.cond,
                    ref_embedding: &world.identities[clip.identity_id].embedding,
                    t,
                    noise,
                }
            })
            .collect();
        let (grads, loss) = backbone_diffusion_gradients(backbone, &items, schedule)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss"));
        }
        apply_backbone_step(backbone, &grads, learning_rate);
    }
    Ok(())
}

/// Executes the federated protocol for the configured number of rounds.
///
/// Per round: sample participants, run local training and reliability
/// scoring per client (failures become dropouts), clip-and-noise deltas when
/// DP is on, compute strategy weights over the survivors, apply the weights
/// client-side, optionally mask, and add `eta` times the (unmasked) sum to
/// the global adapters. Client results are collected in ascending id order,
/// so the run is reproducible regardless of how the per-client work would
/// be scheduled. The global model is then evaluated on a fixed
/// validation pool and the state with minimum validation loss is retained
/// as the best checkpoint. The observer runs after every round; rounds with
/// no usable update keep the global state and are flagged as skipped.
pub fn run_federation(
    setup: &FederationSetup<'_>,
    initial_adapters: &AdapterSet,
    mut on_round: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<FederationOutcome> {
    let fed = setup.federation;
    fed.validate()?;
    setup.train.validate()?;
    setup.eval.validate()?;
    setup.sampler.validate(setup.schedule)?;

    let all_ids: Vec<usize> = setup.world.clients.iter().map(|c| c.client_id).collect();
    let pool_picks = build_eval_pool(setup.world, setup.eval.pool_clips, fed.seed);
    let pool: Vec<EvalItem<'_>> = pool_picks
        .iter()
        .map(|&(client_id, clip_idx)| {
            let clip = &setup.world.clients[client_id].clips[clip_idx];
            EvalItem {
                clip,
                ref_embedding: &setup.world.identities[clip.identity_id].embedding,
            }
        })
        .collect();
    let eval_ctx = EvalContext {
        backbone: setup.backbone,
        schedule: setup.schedule,
        probes: setup.probes,
        weights: &setup.train.weights,
        sampler: setup.sampler,
        run_seed: fed.seed,
        noise_draws: setup.eval.noise_draws,
    };

    let effective_train = LocalTrainConfig {
        prox_mu: if fed.strategy == Strategy::FedProx { setup.train.prox_mu } else { 0.0 },
        ..setup.train.clone()
    };

    let mut adapters = initial_adapters.clone();
    let mut best_adapters = initial_adapters.clone();
    let mut best_round = 0usize;
    let mut best_loss = f64::INFINITY;
    let mut records = Vec::with_capacity(fed.rounds);
    let mut breakdowns = Vec::with_capacity(fed.rounds);

    for round in 1..=fed.rounds {
        let participants = sample_clients(&all_ids, fed.client_fraction, round as u64, fed.seed)?;
        let mut updates: Vec<ClientUpdate> = Vec::with_capacity(participants.len());
        let mut dropped: Vec<usize> = Vec::new();

        for &client_id in &participants {
            let dataset = &setup.world.clients[client_id];
            let train_seed = derive_seed(fed.seed, "local-train", &[round as u64, client_id as u64]);
            let outcome = local_train(
                setup.backbone,
                &adapters,
                dataset,
                &setup.world.identities,
                &effective_train,
                setup.schedule,
                setup.probes,
                train_seed,
            )
            .and_then(|(trained, delta, _trace)| {
                let score = compute_reliability(
                    setup.backbone,
                    &trained,
                    dataset,
                    &setup.world.identities,
                    setup.probes,
                    setup.schedule,
                    setup.eval.alpha_mix,
                    derive_seed(fed.seed, "reliability", &[client_id as u64]),
                )?;
                let delta = if fed.dp.enabled {
                    let mut dp_rng =
                        CounterRng::derived(fed.seed, "dp", &[round as u64, client_id as u64]);
                    clip_and_noise(&delta, &fed.dp, &mut dp_rng)?
                } else {
                    delta
                };
                Ok(ClientUpdate { client_id, delta, score: score.s, n_k: dataset.n_k() })
            });
            match outcome {
                Ok(update) => updates.push(update),
                Err(_) => dropped.push(client_id),
            }
        }

        let global_flat = flatten_adapters(&adapters);
        let mut skipped = false;
        if updates.is_empty() {
            skipped = true;
        } else {
            let weights = match fed.strategy {
                Strategy::Isfa => isfa_weights(&updates, fed.gamma)?,
                Strategy::FedAvg | Strategy::FedProx => data_size_weights(&updates)?,
            };
            let new_flat = if fed.secure_agg {
                let session = MaskingSession::new(
                    fed.seed,
                    round as u64,
                    &participants,
                    global_flat.len(),
                );
                let survivors: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
                let mut summed = vec![0.0; global_flat.len()];
                for (update, w) in updates.iter().zip(&weights) {
                    let weighted: Vec<f64> = update.delta.iter().map(|d| w * d).collect();
                    let masked = mask_update(&weighted, update.client_id, &session)?;
                    for (s, m) in summed.iter_mut().zip(&masked) {
                        *s += m;
                    }
                }
                let corrected = unmask_dropouts(&summed, &session, &survivors, &dropped)?;
                let mut out = global_flat.clone();
                for (o, c) in out.iter_mut().zip(&corrected) {
                    *o += fed.eta * c;
                }
                Ok(out)
            } else {
                aggregate(&global_flat, &updates, &weights, fed.eta)
            };
            // A non-finite aggregate aborts this round only; the global
            // state stays in place.
            match new_flat {
                Ok(flat) if flat.iter().all(|v| v.is_finite()) => {
                    adapters = unflatten_adapters(&flat, &adapters)?;
                }
                Ok(_) | Err(Error::NonFinite(_)) => skipped = true,
                Err(e) => return Err(e),
            }
        }

        let (record, breakdown) = eval_round(&eval_ctx, &adapters, &pool, round)?;
        if record.val_loss < best_loss {
            best_loss = record.val_loss;
            best_round = round;
            best_adapters = adapters.clone();
        }
        let report = RoundReport {
            record: record.clone(),
            breakdown,
            participants,
            dropped,
            scores: updates.iter().map(|u| (u.client_id, u.score)).collect(),
            skipped,
        };
        on_round(&report)?;
        records.push(record);
        breakdowns.push(breakdown);
    }

    Ok(FederationOutcome {
        final_adapters: adapters,
        best_adapters,
        best_round,
        records,
        breakdowns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(client_id: usize, n_k: usize, score: f64) -> ClientUpdate {
        ClientUpdate { client_id, delta: vec![0.0], score, n_k }
    }

    #[test]
    fn sample_clients_sizes_and_determinism() {
        let ids: Vec<usize> = (0..10).collect();
        let all = sample_clients(&ids, 1.0, 3, 42).unwrap();
        assert_eq!(all, ids);
        let three = sample_clients(&ids, 0.3, 3, 42).unwrap();
        assert_eq!(three.len(), 3);
        assert_eq!(three, sample_clients(&ids, 0.3, 3, 42).unwrap());
        assert_ne!(three, sample_clients(&ids, 0.3, 4, 42).unwrap());
        assert!(sample_clients(&[], 0.5, 0, 1).is_err());
        assert!(sample_clients(&ids, 0.0, 0, 1).is_err());
        // Tiny fractions still sample one client.
        assert_eq!(sample_clients(&ids, 0.01, 0, 1).unwrap().len(), 1);
    }

    #[test]
    fn isfa_weights_match_hand_computations() {
        let w = isfa_weights(&[update(0, 10, 0.5), update(1, 20, 0.9)], 0.0).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);

        let w = isfa_weights(&[update(0, 1, 0.0), update(1, 1, 1.0)], 1.0).unwrap();
        assert!((w[0] - 0.26894).abs() < 1e-5, "{}", w[0]);
        assert!((w[1] - 0.73106).abs() < 1e-5, "{}", w[1]);

        // Equal counts and scores give uniform weights regardless of gamma.
        let w = isfa_weights(&[update(0, 7, 0.4), update(1, 7, 0.4), update(2, 7, 0.4)], 9.0).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn isfa_weights_sum_to_one_and_reward_score() {
        let mut rng = CounterRng::new(5);
        for _ in 0..200 {
            let n = 2 + rng.below(6) as usize;
            let updates: Vec<ClientUpdate> = (0..n)
                .map(|i| update(i, 1 + rng.below(50) as usize, rng.uniform()))
                .collect();
            let gamma = 4.0 * rng.uniform();
            let w = isfa_weights(&updates, gamma).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "weights sum {sum}");
            assert!(w.iter().all(|v| *v > 0.0));
        }
        // Monotone influence: raising one client's score raises its weight.
        let lo = isfa_weights(&[update(0, 5, 0.2), update(1, 5, 0.5)], 3.0).unwrap();
        let hi = isfa_weights(&[update(0, 5, 0.4), update(1, 5, 0.5)], 3.0).unwrap();
        assert!(hi[0] > lo[0]);
    }

    #[test]
    fn isfa_gamma_zero_is_bitwise_data_size_weighting() {
        let updates: Vec<ClientUpdate> =
            (0..7).map(|i| update(i, 3 + i, 0.1 * i as f64)).collect();
        let a = isfa_weights(&updates, 0.0).unwrap();
        let b = data_size_weights(&updates).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn aggregate_examples() {
        let phi = vec![1.0, -1.0];
        let single = [ClientUpdate { client_id: 0, delta: vec![0.5, 0.25], score: 0.5, n_k: 3 }];
        let out = aggregate(&phi, &single, &[1.0], 1.0).unwrap();
        assert_eq!(out, vec![1.5, -0.75]);

        let zeros = [
            ClientUpdate { client_id: 0, delta: vec![0.0, 0.0], score: 0.5, n_k: 1 },
            ClientUpdate { client_id: 1, delta: vec![0.0, 0.0], score: 0.5, n_k: 1 },
        ];
        assert_eq!(aggregate(&phi, &zeros, &[0.5, 0.5], 2.0).unwrap(), phi);

        let two = [
            ClientUpdate { client_id: 0, delta: vec![4.0, 0.0], score: 0.5, n_k: 1 },
            ClientUpdate { client_id: 1, delta: vec![0.0, 0.0], score: 0.5, n_k: 1 },
        ];
        let out = aggregate(&[0.0, 0.0], &two, &[0.25, 0.75], 1.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);

        assert!(aggregate(&phi, &two, &[1.0], 1.0).is_err());
        assert!(aggregate(&phi, &two, &[0.9, 0.3], 1.0).is_err());
    }
}
