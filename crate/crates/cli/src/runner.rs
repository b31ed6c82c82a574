//! Experiment drivers: single runs, strategy comparisons, and the ablation
//! matrix. Each run writes its metrics CSV incrementally (a mid-run failure
//! keeps the rows already evaluated), adapter checkpoints for the best and
//! final states, and a resolved-config snapshot that reproduces the run.

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use fedlora_core::binio::{save_adapters, world_hash};
use fedlora_core::denoiser::{AdapterSet, BackboneParams};
use fedlora_core::error::Error as CoreError;
use fedlora_core::objectives::FrozenProbes;
use fedlora_core::schedule::build_linear_schedule;
use fedlora_core::server::{pretrain_backbone, run_federation, FederationSetup, Strategy};
use fedlora_core::synthdata::generate_world;
use fedlora_core::{LossBreakdown, RoundRecord};

use crate::config::{ConfigError, ExperimentConfig};

pub const CSV_NAME: &str = "val_metrics_all_rounds.csv";
pub const CSV_HEADER: &str = "round,val_loss,val_identity,val_temporal";
pub const SUMMARY_NAME: &str = "summary.csv";
pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.txt";

/// The five ablation variants, in report order.
pub const ABLATION_VARIANTS: [&str; 5] = ["adapters_only", "dp", "isfa", "tdc", "full"];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(ConfigError),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    /// Process exit status: 2 for configuration/usage problems, 1 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// In-memory results of a finished run.
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub world_hash: u64,
    pub best_round: usize,
    pub best: RoundRecord,
    pub records: Vec<RoundRecord>,
    pub breakdowns: Vec<LossBreakdown>,
}

pub fn format_csv_row(record: &RoundRecord) -> String {
    format!(
        "{},{:.6},{:.6},{:.6}\n",
        record.round, record.val_loss, record.val_identity, record.val_temporal
    )
}

/// Semantic validation of the resolved config, before any artifact is
/// touched.
fn validate(config: &ExperimentConfig) -> Result<(), CliError> {
    config.world_config().validate()?;
    config.model_dims().validate()?;
    if config.model.rank == 0 {
        return Err(CliError::Config(ConfigError {
            location: "[model] rank".into(),
            message: "rank must be >= 1".into(),
        }));
    }
    if config.world.perc_dim == 0 {
        return Err(CliError::Config(ConfigError {
            location: "[world] perc_dim".into(),
            message: "perc_dim must be >= 1".into(),
        }));
    }
    let schedule = build_linear_schedule(
        config.schedule.t_steps,
        config.schedule.beta_start,
        config.schedule.beta_end,
    )?;
    config.train_config().validate()?;
    config.federation_config().validate()?;
    config.eval_config().validate()?;
    config.sampler_config().validate(&schedule)?;
    Ok(())
}

/// Runs one experiment into `config.out_dir`.
pub fn execute_run(config: &ExperimentConfig) -> Result<RunArtifacts, CliError> {
    validate(config)?;
    let out_dir = PathBuf::from(&config.out_dir);
    let checkpoint_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir)?;

    let schedule = build_linear_schedule(
        config.schedule.t_steps,
        config.schedule.beta_start,
        config.schedule.beta_end,
    )?;
    let world = generate_world(&config.world_config())?;
    let hash = world_hash(&world);
    let probes = FrozenProbes::from_seed(
        config.seed,
        config.world.latent_dim,
        config.world.ident_dim,
        config.world.perc_dim,
    );
    let mut backbone = BackboneParams::init(config.model_dims(), config.seed)?;
    pretrain_backbone(
        &mut backbone,
        &world,
        &schedule,
        config.model.pretrain_steps,
        config.model.pretrain_lr,
        config.model.pretrain_batch_size,
        config.seed,
    )?;
    let adapters = AdapterSet::init(&backbone, config.model.rank, config.seed)?;

    fs::write(out_dir.join(RESOLVED_CONFIG_NAME), config.render())?;

    let train = config.train_config();
    let federation = config.federation_config();
    let eval = config.eval_config();
    let sampler = config.sampler_config();
    let setup = FederationSetup {
        world: &world,
        backbone: &backbone,
        schedule: &schedule,
        probes: &probes,
        federation: &federation,
        train: &train,
        sampler: &sampler,
        eval: &eval,
    };

    let mut csv = File::create(out_dir.join(CSV_NAME))?;
    csv.write_all(CSV_HEADER.as_bytes())?;
    csv.write_all(b"\n")?;
    let rounds = federation.rounds;
    let outcome = run_federation(&setup, &adapters, |report| {
        csv.write_all(format_csv_row(&report.record).as_bytes())
            .and_then(|_| csv.flush())
            .map_err(CoreError::Io)?;
        if report.skipped {
            eprintln!("warning: round {} skipped (no update applied)", report.record.round);
        } else if !report.dropped.is_empty() {
            eprintln!(
                "warning: round {} dropped clients {:?}",
                report.record.round, report.dropped
            );
        }
        if report.record.round % 10 == 0 || report.record.round == rounds {
            println!(
                "round {:>4}/{rounds}  val_loss={:.6}  val_identity={:.4}  val_temporal={:.4}",
                report.record.round,
                report.record.val_loss,
                report.record.val_identity,
                report.record.val_temporal
            );
        }
        Ok(())
    });
    // Rows already evaluated were flushed, so a mid-run failure leaves the
    // partial CSV behind.
    let outcome = outcome
        .map_err(|e| CliError::Runtime(format!("run failed after writing partial CSV: {e}")))?;

    save_adapters(&checkpoint_dir.join("best.bin"), &outcome.best_adapters)?;
    save_adapters(&checkpoint_dir.join("final.bin"), &outcome.final_adapters)?;

    let best = outcome.records[outcome.best_round - 1].clone();
    println!(
        "best checkpoint: round {} val_loss={:.6} val_identity={:.4} val_temporal={:.4}",
        outcome.best_round, best.val_loss, best.val_identity, best.val_temporal
    );
    println!(
        "privacy: dp={} clip_norm={} noise_multiplier={} client_fraction={} rounds={} \
         (inputs for an external accountant; no (epsilon,delta) is computed)",
        if config.dp.enabled { "on" } else { "off" },
        config.dp.clip_norm,
        config.dp.noise_multiplier,
        config.federation.client_fraction,
        config.federation.rounds
    );

    Ok(RunArtifacts {
        out_dir,
        world_hash: hash,
        best_round: outcome.best_round,
        best,
        records: outcome.records,
        breakdowns: outcome.breakdowns,
    })
}

/// One row of a compare/ablate summary.
pub struct SummaryRow {
    pub label: String,
    pub world_hash: Option<u64>,
    pub best_round: Option<usize>,
    pub best: Option<RoundRecord>,
    pub failed: bool,
}

fn summary_csv_row(row: &SummaryRow) -> String {
    match (&row.best, row.world_hash, row.best_round) {
        (Some(best), Some(hash), Some(round)) => format!(
            "{},{hash:016x},{round},{:.6},{:.6},{:.6},ok\n",
            row.label, best.val_loss, best.val_identity, best.val_temporal
        ),
        _ => format!("{},,,,,,failed\n", row.label),
    }
}

fn write_summary(path: &Path, label_header: &str, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut text = format!(
        "{label_header},world_hash,best_round,best_val_loss,best_val_identity,best_val_temporal,status\n"
    );
    for row in rows {
        text.push_str(&summary_csv_row(row));
    }
    fs::write(path, text)?;
    Ok(())
}

fn print_summary(label_header: &str, rows: &[SummaryRow]) {
    println!(
        "{label_header:<14} {:>18} {:>10} {:>14} {:>14} {:>14}  status",
        "world_hash", "best_round", "val_loss", "val_identity", "val_temporal"
    );
    for row in rows {
        match (&row.best, row.world_hash, row.best_round) {
            (Some(best), Some(hash), Some(round)) => println!(
                "{:<14} {hash:>18x} {round:>10} {:>14.6} {:>14.6} {:>14.6}  ok",
                row.label, best.val_loss, best.val_identity, best.val_temporal
            ),
            _ => println!("{:<14} {:>18} {:>10} {:>14} {:>14} {:>14}  failed", row.label, "-", "-", "-", "-", "-"),
        }
    }
}

fn run_labeled(base: &ExperimentConfig, label: &str, adjust: impl FnOnce(&mut ExperimentConfig)) -> SummaryRow {
    let mut config = base.clone();
    config.out_dir = Path::new(&base.out_dir).join(label).display().to_string();
    adjust(&mut config);
    println!("--- {label} ---");
    match execute_run(&config) {
        Ok(artifacts) => SummaryRow {
            label: label.to_string(),
            world_hash: Some(artifacts.world_hash),
            best_round: Some(artifacts.best_round),
            best: Some(artifacts.best),
            failed: false,
        },
        Err(e) => {
            eprintln!("{label}: {e}");
            SummaryRow { label: label.to_string(), world_hash: None, best_round: None, best: None, failed: true }
        }
    }
}

/// Runs each strategy under a matched protocol (identical seed, hence
/// identical world) and writes one CSV per strategy plus a summary table.
pub fn execute_compare(
    base: &ExperimentConfig,
    strategies: &[Strategy],
) -> Result<Vec<SummaryRow>, CliError> {
    if strategies.is_empty() {
        return Err(CliError::Usage("compare needs at least one strategy".into()));
    }
    validate(base)?;
    fs::create_dir_all(&base.out_dir)?;
    let rows: Vec<SummaryRow> = strategies
        .iter()
        .map(|s| {
            run_labeled(base, s.name(), |config| {
                config.federation.strategy = *s;
            })
        })
        .collect();
    write_summary(&Path::new(&base.out_dir).join(SUMMARY_NAME), "strategy", &rows)?;
    print_summary("strategy", &rows);
    Ok(rows)
}

/// Applies one named ablation variant to a base config.
pub fn apply_variant(config: &mut ExperimentConfig, variant: &str) {
    let base_tdc = config.train.lambda_tdc;
    match variant {
        "adapters_only" => {
            config.federation.strategy = Strategy::FedAvg;
            config.train.lambda_tdc = 0.0;
            config.dp.enabled = false;
            config.federation.secure_agg = false;
        }
        "dp" => {
            config.federation.strategy = Strategy::FedAvg;
            config.train.lambda_tdc = 0.0;
            config.dp.enabled = true;
            config.federation.secure_agg = true;
        }
        "isfa" => {
            config.federation.strategy = Strategy::Isfa;
            config.train.lambda_tdc = 0.0;
            config.dp.enabled = false;
            config.federation.secure_agg = false;
        }
        "tdc" => {
            config.federation.strategy = Strategy::FedAvg;
            config.train.lambda_tdc = base_tdc;
            config.dp.enabled = false;
            config.federation.secure_agg = false;
        }
        "full" => {
            config.federation.strategy = Strategy::Isfa;
            config.train.lambda_tdc = base_tdc;
            config.dp.enabled = true;
            config.federation.secure_agg = true;
        }
        other => unreachable!("unknown ablation variant {other}"),
    }
}

/// Runs the five-variant ablation matrix under matched seeds.
pub fn execute_ablate(base: &ExperimentConfig) -> Result<Vec<SummaryRow>, CliError> {
    validate(base)?;
    fs::create_dir_all(&base.out_dir)?;
    let rows: Vec<SummaryRow> = ABLATION_VARIANTS
        .iter()
        .map(|variant| run_labeled(base, variant, |config| apply_variant(config, variant)))
        .collect();
    write_summary(&Path::new(&base.out_dir).join(SUMMARY_NAME), "variant", &rows)?;
    print_summary("variant", &rows);
    Ok(rows)
}
