//! Pipeline-level checks of the federation loop: strategy reductions,
//! masking transparency, dropout handling, and determinism.

use fedlora_core::denoiser::{flatten_adapters, AdapterSet, BackboneParams, ModelDims};
use fedlora_core::objectives::FrozenProbes;
use fedlora_core::schedule::build_linear_schedule;
use fedlora_core::server::{run_federation, FederationSetup};
use fedlora_core::synthdata::generate_world;
use fedlora_core::{
    EvalConfig, FederationConfig, LocalTrainConfig, NoiseSchedule, SamplerConfig, Strategy, World,
    WorldConfig,
};

struct Fixture {
    world: World,
    backbone: BackboneParams,
    adapters: AdapterSet,
    schedule: NoiseSchedule,
    probes: FrozenProbes,
    train: LocalTrainConfig,
    sampler: SamplerConfig,
    eval: EvalConfig,
}

fn fixture(seed: u64) -> Fixture {
    let world_cfg = WorldConfig {
        num_clients: 6,
        identities_per_client: 2,
        clips_per_client: 6,
        frames: 4,
        latent_dim: 6,
        cond_dim: 2,
        ident_dim: 4,
        seed,
        ..WorldConfig::default()
    };
    let world = generate_world(&world_cfg).unwrap();
    let dims = ModelDims { latent: 6, time: 4, cond: 2, ident: 4, hidden: 10 };
    let backbone = BackboneParams::init(dims, seed ^ 0xB0B0).unwrap();
    let adapters = AdapterSet::init(&backbone, 2, seed ^ 0xADA0).unwrap();
    let schedule = build_linear_schedule(12, 1e-3, 0.15).unwrap();
    let probes = FrozenProbes::from_seed(seed ^ 0x9808, 6, 4, 4);
    Fixture {
        world,
        backbone,
        adapters,
        schedule,
        probes,
        train: LocalTrainConfig::default(),
        sampler: SamplerConfig { num_steps: 5, stochastic: false, seed: 0 },
        eval: EvalConfig { pool_clips: 4, noise_draws: 2, alpha_mix: 0.5 },
    }
}

fn run(fx: &Fixture, federation: &FederationConfig) -> (Vec<f64>, Vec<fedlora_core::RoundRecord>) {
    let setup = FederationSetup {
        world: &fx.world,
        backbone: &fx.backbone,
        schedule: &fx.schedule,
        probes: &fx.probes,
        federation,
        train: &fx.train,
        sampler: &fx.sampler,
        eval: &fx.eval,
    };
    let outcome = run_federation(&setup, &fx.adapters, |_| Ok(())).unwrap();
    (flatten_adapters(&outcome.final_adapters), outcome.records)
}

fn base_config(seed: u64) -> FederationConfig {
    FederationConfig {
        rounds: 5,
        client_fraction: 0.5,
        strategy: Strategy::FedAvg,
        gamma: 0.0,
        eta: 1.0,
        secure_agg: false,
        seed,
        ..FederationConfig::default()
    }
}

#[test]
fn noop_round_leaves_adapters_bit_identical() {
    let mut fx = fixture(1);
    fx.train.learning_rate = 0.0;
    let cfg = FederationConfig { rounds: 1, client_fraction: 1.0, ..base_config(11) };
    let (final_flat, records) = run(&fx, &cfg);
    let initial = flatten_adapters(&fx.adapters);
    for (a, b) in final_flat.iter().zip(&initial) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(records.len(), 1);
}

#[test]
fn isfa_at_gamma_zero_matches_fedavg_bitwise() {
    let fx = fixture(2);
    let fedavg = base_config(22);
    let isfa = FederationConfig { strategy: Strategy::Isfa, gamma: 0.0, ..fedavg.clone() };
    let (flat_a, rec_a) = run(&fx, &fedavg);
    let (flat_b, rec_b) = run(&fx, &isfa);
    assert_eq!(rec_a, rec_b);
    for (a, b) in flat_a.iter().zip(&flat_b) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn fedprox_at_mu_zero_matches_fedavg_bitwise() {
    let fx = fixture(3);
    let fedavg = base_config(33);
    let fedprox = FederationConfig { strategy: Strategy::FedProx, ..fedavg.clone() };
    let (flat_a, rec_a) = run(&fx, &fedavg);
    let (flat_b, rec_b) = run(&fx, &fedprox);
    assert_eq!(rec_a, rec_b);
    for (a, b) in flat_a.iter().zip(&flat_b) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn fedprox_with_positive_mu_changes_the_trajectory() {
    let mut fx = fixture(4);
    fx.train.prox_mu = 5.0;
    let fedavg = base_config(44);
    let fedprox = FederationConfig { strategy: Strategy::FedProx, ..fedavg.clone() };
    let (flat_a, _) = run(&fx, &fedavg);
    let (flat_b, _) = run(&fx, &fedprox);
    assert_ne!(flat_a, flat_b);
}

#[test]
fn masking_is_transparent_to_the_aggregate() {
    let fx = fixture(5);
    let plain = base_config(55);
    let masked = FederationConfig { secure_agg: true, ..plain.clone() };
    let (flat_a, _) = run(&fx, &plain);
    let (flat_b, _) = run(&fx, &masked);
    let worst = flat_a
        .iter()
        .zip(&flat_b)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "masked and plain aggregates differ by {worst}");
}

/// DP noise is added at the client before masking, so the masked and plain
/// runs see identical protected deltas and still agree.
#[test]
fn masking_is_transparent_with_dp_enabled() {
    let fx = fixture(12);
    let mut plain = base_config(1212);
    plain.dp.enabled = true;
    plain.dp.noise_multiplier = 0.3;
    let masked = FederationConfig { secure_agg: true, ..plain.clone() };
    let (flat_a, _) = run(&fx, &plain);
    let (flat_b, _) = run(&fx, &masked);
    let worst = flat_a
        .iter()
        .zip(&flat_b)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "masking changed a DP-protected aggregate by {worst}");
}

/// Client deltas can be finite while the scaled sum overflows; such a
/// round must be skipped with the global state left in place rather than
/// failing the run.
#[test]
fn non_finite_aggregate_aborts_only_the_round() {
    let mut fx = fixture(13);
    fx.train.learning_rate = 1e8;
    fx.train.local_epochs = 1;
    fx.train.batch_size = 64;
    let cfg = FederationConfig {
        rounds: 2,
        client_fraction: 1.0,
        eta: 1e303,
        ..base_config(1313)
    };
    let setup = FederationSetup {
        world: &fx.world,
        backbone: &fx.backbone,
        schedule: &fx.schedule,
        probes: &fx.probes,
        federation: &cfg,
        train: &fx.train,
        sampler: &fx.sampler,
        eval: &fx.eval,
    };
    let mut skipped = 0;
    let outcome = run_federation(&setup, &fx.adapters, |report| {
        if report.skipped {
            skipped += 1;
            assert!(report.dropped.is_empty(), "clients themselves stayed healthy");
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(skipped, 2);
    let initial = flatten_adapters(&fx.adapters);
    for (a, b) in flatten_adapters(&outcome.final_adapters).iter().zip(&initial) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

/// Learnability of the default generator: the diffusion term of the
/// validation loss falls by at least 30% from its round-0 value within 50
/// rounds of default federated training.
#[test]
fn default_world_diffusion_loss_learnable_within_fifty_rounds() {
    let seed = 99;
    let world = generate_world(&WorldConfig { seed, ..WorldConfig::default() }).unwrap();
    let dims = ModelDims { latent: 16, time: 8, cond: 4, ident: 8, hidden: 64 };
    let backbone = BackboneParams::init(dims, seed).unwrap();
    let adapters = AdapterSet::init(&backbone, 4, seed).unwrap();
    let schedule = build_linear_schedule(50, 1e-4, 0.02).unwrap();
    let probes = FrozenProbes::from_seed(seed, 16, 8, 8);
    let sampler = SamplerConfig::default();
    let eval = EvalConfig::default();

    let diffusion_of = |train: &LocalTrainConfig, rounds: usize| {
        let federation = FederationConfig { rounds, seed, ..FederationConfig::default() };
        let setup = FederationSetup {
            world: &world,
            backbone: &backbone,
            schedule: &schedule,
            probes: &probes,
            federation: &federation,
            train,
            sampler: &sampler,
            eval: &eval,
        };
        run_federation(&setup, &adapters, |_| Ok(())).unwrap()
    };

    // A zero-learning-rate round evaluates the untouched initial state on
    // the same pool and draws, giving the round-0 baseline.
    let frozen = LocalTrainConfig { learning_rate: 0.0, ..LocalTrainConfig::default() };
    let baseline = diffusion_of(&frozen, 1).breakdowns[0].diffusion;

    let outcome = diffusion_of(&LocalTrainConfig::default(), 50);
    let best = outcome.breakdowns.iter().map(|b| b.diffusion).fold(f64::INFINITY, f64::min);
    let reduction = 1.0 - best / baseline;
    assert!(
        reduction >= 0.30,
        "diffusion term fell only {:.1}% ({baseline:.4} -> {best:.4})",
        100.0 * reduction
    );
}

#[test]
fn reruns_are_bit_identical() {
    let fx = fixture(6);
    let cfg = FederationConfig { secure_agg: true, strategy: Strategy::Isfa, gamma: 3.0, ..base_config(66) };
    let (flat_a, rec_a) = run(&fx, &cfg);
    let (flat_b, rec_b) = run(&fx, &cfg);
    assert_eq!(rec_a, rec_b);
    for (a, b) in flat_a.iter().zip(&flat_b) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn dp_noise_changes_updates_but_run_stays_deterministic() {
    let fx = fixture(7);
    let mut cfg = base_config(77);
    cfg.dp.enabled = true;
    cfg.dp.clip_norm = 0.5;
    cfg.dp.noise_multiplier = 0.2;
    let (flat_a, rec_a) = run(&fx, &cfg);
    let (flat_b, rec_b) = run(&fx, &cfg);
    assert_eq!(rec_a, rec_b);
    assert_eq!(flat_a, flat_b);
    let (flat_plain, _) = run(&fx, &base_config(77));
    assert_ne!(flat_a, flat_plain);
}

/// A client with an empty validation split can never report a reliability
/// score; the pipeline must treat it as a dropout and still finish the
/// round via mask correction.
#[test]
fn failing_client_becomes_a_dropout_and_masking_recovers() {
    let mut fx = fixture(8);
    fx.world.clients[2].val_start = fx.world.clients[2].clips.len();
    let cfg = FederationConfig { client_fraction: 1.0, secure_agg: true, rounds: 3, ..base_config(88) };
    let setup = FederationSetup {
        world: &fx.world,
        backbone: &fx.backbone,
        schedule: &fx.schedule,
        probes: &fx.probes,
        federation: &cfg,
        train: &fx.train,
        sampler: &fx.sampler,
        eval: &fx.eval,
    };
    let mut saw_dropout = false;
    let outcome = run_federation(&setup, &fx.adapters, |report| {
        if report.dropped.contains(&2) {
            saw_dropout = true;
        }
        assert!(!report.skipped);
        Ok(())
    })
    .unwrap();
    assert!(saw_dropout);
    assert_eq!(outcome.records.len(), 3);
    // Training still progressed for the healthy clients.
    let moved = flatten_adapters(&outcome.final_adapters)
        .iter()
        .zip(&flatten_adapters(&fx.adapters))
        .any(|(a, b)| a != b);
    assert!(moved);
}

/// A learning rate large enough to overflow the forward pass makes every
/// client trip the divergence guard on its second local batch.
#[test]
fn all_clients_failing_skips_rounds_and_keeps_the_state() {
    let mut fx = fixture(9);
    fx.train.learning_rate = 1e155;
    fx.train.local_epochs = 2;
    let cfg = FederationConfig { rounds: 2, client_fraction: 1.0, ..base_config(99) };
    let setup = FederationSetup {
        world: &fx.world,
        backbone: &fx.backbone,
        schedule: &fx.schedule,
        probes: &fx.probes,
        federation: &cfg,
        train: &fx.train,
        sampler: &fx.sampler,
        eval: &fx.eval,
    };
    let mut skipped_rounds = 0;
    let outcome = run_federation(&setup, &fx.adapters, |report| {
        if report.skipped {
            skipped_rounds += 1;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(skipped_rounds, 2);
    assert_eq!(outcome.records.len(), 2);
    let initial = flatten_adapters(&fx.adapters);
    for (a, b) in flatten_adapters(&outcome.final_adapters).iter().zip(&initial) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn best_checkpoint_tracks_minimum_validation_loss() {
    let fx = fixture(10);
    let cfg = FederationConfig { rounds: 6, ..base_config(1010) };
    let setup = FederationSetup {
        world: &fx.world,
        backbone: &fx.backbone,
        schedule: &fx.schedule,
        probes: &fx.probes,
        federation: &cfg,
        train: &fx.train,
        sampler: &fx.sampler,
        eval: &fx.eval,
    };
    let outcome = run_federation(&setup, &fx.adapters, |_| Ok(())).unwrap();
    let min_loss = outcome.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let best = &outcome.records[outcome.best_round - 1];
    assert_eq!(best.val_loss, min_loss);
    assert!(outcome.best_round >= 1 && outcome.best_round <= 6);
    for (i, r) in outcome.records.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        assert!(r.val_temporal > 0.0 && r.val_temporal <= 1.0);
        assert!(r.val_identity >= 0.0 && r.val_identity <= 1.0);
    }
}
