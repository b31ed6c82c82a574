//! Experiment configuration: a flat-plus-sections key=value text format,
//! environment overrides under the `FEDLORA_` prefix, and CLI-flag
//! overrides on top. Unknown sections or keys fail fast with their source
//! location, and a resolved config renders back to the same format so a
//! snapshot re-run reproduces the experiment byte for byte.

use std::fmt;
use std::fs;
use std::path::Path;

use fedlora_core::server::Strategy;
use fedlora_core::{
    DpConfig, EvalConfig, FederationConfig, LocalTrainConfig, LossWeights, ModelDims,
    SamplerConfig, WorldConfig,
};

/// Environment-variable prefix for overrides: `FEDLORA_SEED`,
/// `FEDLORA_OUT_DIR`, and `FEDLORA_<SECTION>__<KEY>` for section keys.
pub const ENV_PREFIX: &str = "FEDLORA_";

#[derive(Debug)]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(location: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { location: location.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSection {
    pub num_clients: usize,
    pub identities_per_client: usize,
    pub clips_per_client: usize,
    pub frames: usize,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub ident_dim: usize,
    pub perc_dim: usize,
    pub sigma_data: f64,
    pub identity_scale: f64,
    pub motion_scale: f64,
    pub cond_walk_step: f64,
    pub unreliable_fraction: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            num_clients: w.num_clients,
            identities_per_client: w.identities_per_client,
            clips_per_client: w.clips_per_client,
            frames: w.frames,
            latent_dim: w.latent_dim,
            cond_dim: w.cond_dim,
            ident_dim: w.ident_dim,
            perc_dim: 8,
            sigma_data: w.sigma_data,
            identity_scale: w.identity_scale,
            motion_scale: w.motion_scale,
            cond_walk_step: w.cond_walk_step,
            unreliable_fraction: w.unreliable_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub time_dim: usize,
    pub rank: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            time_dim: 8,
            rank: 4,
            pretrain_steps: 0,
            pretrain_lr: 0.05,
            pretrain_batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { t_steps: 50, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prox_mu: f64,
    pub lambda_tdc: f64,
    pub lambda_id: f64,
    pub lambda_perc: f64,
    pub lambda_sync: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = LocalTrainConfig::default();
        Self {
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            prox_mu: t.prox_mu,
            lambda_tdc: t.weights.lambda_tdc,
            lambda_id: t.weights.lambda_id,
            lambda_perc: t.weights.lambda_perc,
            lambda_sync: t.weights.lambda_sync,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationSection {
    pub rounds: usize,
    pub client_fraction: f64,
    pub strategy: Strategy,
    pub gamma: f64,
    pub eta: f64,
    pub secure_agg: bool,
    pub alpha_mix: f64,
    pub eval_clips: usize,
    pub eval_noise_draws: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        let e = EvalConfig::default();
        Self {
            rounds: f.rounds,
            client_fraction: f.client_fraction,
            strategy: f.strategy,
            gamma: f.gamma,
            eta: f.eta,
            secure_agg: f.secure_agg,
            alpha_mix: e.alpha_mix,
            eval_clips: e.pool_clips,
            eval_noise_draws: e.noise_draws,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSection {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

impl Default for DpSection {
    fn default() -> Self {
        let d = DpConfig::default();
        Self { enabled: d.enabled, clip_norm: d.clip_norm, noise_multiplier: d.noise_multiplier }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub num_steps: usize,
    pub stochastic: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self { num_steps: s.num_steps, stochastic: s.stochastic }
    }
}

/// The complete resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub world: WorldSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub federation: FederationSection,
    pub dp: DpSection,
    pub sampler: SamplerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/out".into(),
            world: WorldSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection::default(),
            federation: FederationSection::default(),
            dp: DpSection::default(),
            sampler: SamplerSection::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, location: &str, key: &str) -> Result<T, ConfigError> {
    value.parse::<T>().map_err(|_| {
        err(location, format!("value '{value}' for key '{key}' is not a valid {}", std::any::type_name::<T>()))
    })
}

fn parse_bool(value: &str, location: &str, key: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(err(location, format!("value '{value}' for key '{key}' is not a boolean"))),
    }
}

impl ExperimentConfig {
    /// Applies one `section.key = value` assignment; `section` is empty for
    /// top-level keys. `location` names the source for error messages.
    pub fn set_key(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        location: &str,
    ) -> Result<(), ConfigError> {
        match (section, key) {
            ("", "seed") => self.seed = parse_num(value, location, key)?,
            ("", "out_dir") => self.out_dir = value.to_string(),
            ("world", "num_clients") => self.world.num_clients = parse_num(value, location, key)?,
            ("world", "identities_per_client") => {
                self.world.identities_per_client = parse_num(value, location, key)?
            }
            ("world", "clips_per_client") => {
                self.world.clips_per_client = parse_num(value, location, key)?
            }
            ("world", "frames") => self.world.frames = parse_num(value, location, key)?,
            ("world", "latent_dim") => self.world.latent_dim = parse_num(value, location, key)?,
            ("world", "cond_dim") => self.world.cond_dim = parse_num(value, location, key)?,
            ("world", "ident_dim") => self.world.ident_dim = parse_num(value, location, key)?,
            ("world", "perc_dim") => self.world.perc_dim = parse_num(value, location, key)?,
            ("world", "sigma_data") => self.world.sigma_data = parse_num(value, location, key)?,
            ("world", "identity_scale") => {
                self.world.identity_scale = parse_num(value, location, key)?
            }
            ("world", "motion_scale") => self.world.motion_scale = parse_num(value, location, key)?,
            ("world", "cond_walk_step") => {
                self.world.cond_walk_step = parse_num(value, location, key)?
            }
            ("world", "unreliable_fraction") => {
                self.world.unreliable_fraction = parse_num(value, location, key)?
            }
            ("model", "hidden_dim") => self.model.hidden_dim = parse_num(value, location, key)?,
            ("model", "time_dim") => self.model.time_dim = parse_num(value, location, key)?,
            ("model", "rank") => self.model.rank = parse_num(value, location, key)?,
            ("model", "pretrain_steps") => {
                self.model.pretrain_steps = parse_num(value, location, key)?
            }
            ("model", "pretrain_lr") => self.model.pretrain_lr = parse_num(value, location, key)?,
            ("model", "pretrain_batch_size") => {
                self.model.pretrain_batch_size = parse_num(value, location, key)?
            }
            ("schedule", "t_steps") => self.schedule.t_steps = parse_num(value, location, key)?,
            ("schedule", "beta_start") => {
                self.schedule.beta_start = parse_num(value, location, key)?
            }
            ("schedule", "beta_end") => self.schedule.beta_end = parse_num(value, location, key)?,
            ("train", "local_epochs") => self.train.local_epochs = parse_num(value, location, key)?,
            ("train", "batch_size") => self.train.batch_size = parse_num(value, location, key)?,
            ("train", "learning_rate") => {
                self.train.learning_rate = parse_num(value, location, key)?
            }
            ("train", "prox_mu") => self.train.prox_mu = parse_num(value, location, key)?,
            ("train", "lambda_tdc") => self.train.lambda_tdc = parse_num(value, location, key)?,
            ("train", "lambda_id") => self.train.lambda_id = parse_num(value, location, key)?,
            ("train", "lambda_perc") => self.train.lambda_perc = parse_num(value, location, key)?,
            ("train", "lambda_sync") => self.train.lambda_sync = parse_num(value, location, key)?,
            ("federation", "rounds") => self.federation.rounds = parse_num(value, location, key)?,
            ("federation", "client_fraction") => {
                self.federation.client_fraction = parse_num(value, location, key)?
            }
            ("federation", "strategy") => {
                self.federation.strategy = Strategy::parse(value)
                    .map_err(|e| err(location, e.to_string()))?
            }
            ("federation", "gamma") => self.federation.gamma = parse_num(value, location, key)?,
            ("federation", "eta") => self.federation.eta = parse_num(value, location, key)?,
            ("federation", "secure_agg") => {
                self.federation.secure_agg = parse_bool(value, location, key)?
            }
            ("federation", "alpha_mix") => {
                self.federation.alpha_mix = parse_num(value, location, key)?
            }
            ("federation", "eval_clips") => {
                self.federation.eval_clips = parse_num(value, location, key)?
            }
            ("federation", "eval_noise_draws") => {
                self.federation.eval_noise_draws = parse_num(value, location, key)?
            }
            ("dp", "enabled") => self.dp.enabled = parse_bool(value, location, key)?,
            ("dp", "clip_norm") => self.dp.clip_norm = parse_num(value, location, key)?,
            ("dp", "noise_multiplier") => {
                self.dp.noise_multiplier = parse_num(value, location, key)?
            }
            ("sampler", "num_steps") => self.sampler.num_steps = parse_num(value, location, key)?,
            ("sampler", "stochastic") => {
                self.sampler.stochastic = parse_bool(value, location, key)?
            }
            ("", other) => return Err(err(location, format!("unknown top-level key '{other}'"))),
            (section, other) => {
                return Err(err(location, format!("unknown key '{other}' in section [{section}]")))
            }
        }
        Ok(())
    }

    /// Parses a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| err(path.display().to_string(), format!("cannot read config: {e}")))?;
        let mut config = Self::default();
        config.apply_text(&text, &path.display().to_string())?;
        Ok(config)
    }

    /// Parses config text; `source` names the origin in error locations.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let location = format!("{source}:{}", lineno + 1);
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let Some(name) = inner.strip_suffix(']') else {
                    return Err(err(location, "unterminated section header"));
                };
                let name = name.trim();
                if !KNOWN_SECTIONS.contains(&name) {
                    return Err(err(location, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(location, format!("expected 'key = value', got '{line}'")));
            };
            self.set_key(&section, key.trim(), value.trim(), &location)?;
        }
        Ok(())
    }

    /// Applies `FEDLORA_*` environment overrides. Unknown variables under
    /// the prefix are rejected.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        let mut vars: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (name, value) in vars {
            let location = format!("environment variable {name}");
            let rest = &name[ENV_PREFIX.len()..];
            let (section, key) = match rest.split_once("__") {
                Some((s, k)) => (s.to_lowercase(), k.to_lowercase()),
                None => (String::new(), rest.to_lowercase()),
            };
            self.set_key(&section, &key, &value, &location)?;
        }
        Ok(())
    }

    /// Renders the resolved configuration in the canonical file format.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out_dir = {}\n", self.out_dir));
        s.push_str("\n[world]\n");
        let w = &self.world;
        s.push_str(&format!("num_clients = {}\n", w.num_clients));
        s.push_str(&format!("identities_per_client = {}\n", w.identities_per_client));
        s.push_str(&format!("clips_per_client = {}\n", w.clips_per_client));
        s.push_str(&format!("frames = {}\n", w.frames));
        s.push_str(&format!("latent_dim = {}\n", w.latent_dim));
        s.push_str(&format!("cond_dim = {}\n", w.cond_dim));
        s.push_str(&format!("ident_dim = {}\n", w.ident_dim));
        s.push_str(&format!("perc_dim = {}\n", w.perc_dim));
        s.push_str(&format!("sigma_data = {}\n", w.sigma_data));
        s.push_str(&format!("identity_scale = {}\n", w.identity_scale));
        s.push_str(&format!("motion_scale = {}\n", w.motion_scale));
        s.push_str(&format!("cond_walk_step = {}\n", w.cond_walk_step));
        s.push_str(&format!("unreliable_fraction = {}\n", w.unreliable_fraction));
        s.push_str("\n[model]\n");
        let m = &self.model;
        s.push_str(&format!("hidden_dim = {}\n", m.hidden_dim));
        s.push_str(&format!("time_dim = {}\n", m.time_dim));
        s.push_str(&format!("rank = {}\n", m.rank));
        s.push_str(&format!("pretrain_steps = {}\n", m.pretrain_steps));
        s.push_str(&format!("pretrain_lr = {}\n", m.pretrain_lr));
        s.push_str(&format!("pretrain_batch_size = {}\n", m.pretrain_batch_size));
        s.push_str("\n[schedule]\n");
        s.push_str(&format!("t_steps = {}\n", self.schedule.t_steps));
        s.push_str(&format!("beta_start = {}\n", self.schedule.beta_start));
        s.push_str(&format!("beta_end = {}\n", self.schedule.beta_end));
        s.push_str("\n[train]\n");
        let t = &self.train;
        s.push_str(&format!("local_epochs = {}\n", t.local_epochs));
        s.push_str(&format!("batch_size = {}\n", t.batch_size));
        s.push_str(&format!("learning_rate = {}\n", t.learning_rate));
        s.push_str(&format!("prox_mu = {}\n", t.prox_mu));
        s.push_str(&format!("lambda_tdc = {}\n", t.lambda_tdc));
        s.push_str(&format!("lambda_id = {}\n", t.lambda_id));
        s.push_str(&format!("lambda_perc = {}\n", t.lambda_perc));
        s.push_str(&format!("lambda_sync = {}\n", t.lambda_sync));
        s.push_str("\n[federation]\n");
        let f = &self.federation;
        s.push_str(&format!("rounds = {}\n", f.rounds));
        s.push_str(&format!("client_fraction = {}\n", f.client_fraction));
        s.push_str(&format!("strategy = {}\n", f.strategy.name()));
        s.push_str(&format!("gamma = {}\n", f.gamma));
        s.push_str(&format!("eta = {}\n", f.eta));
        s.push_str(&format!("secure_agg = {}\n", f.secure_agg));
        s.push_str(&format!("alpha_mix = {}\n", f.alpha_mix));
        s.push_str(&format!("eval_clips = {}\n", f.eval_clips));
        s.push_str(&format!("eval_noise_draws = {}\n", f.eval_noise_draws));
        s.push_str("\n[dp]\n");
        s.push_str(&format!("enabled = {}\n", self.dp.enabled));
        s.push_str(&format!("clip_norm = {}\n", self.dp.clip_norm));
        s.push_str(&format!("noise_multiplier = {}\n", self.dp.noise_multiplier));
        s.push_str("\n[sampler]\n");
        s.push_str(&format!("num_steps = {}\n", self.sampler.num_steps));
        s.push_str(&format!("stochastic = {}\n", self.sampler.stochastic));
        s
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            num_clients: self.world.num_clients,
            identities_per_client: self.world.identities_per_client,
            clips_per_client: self.world.clips_per_client,
            frames: self.world.frames,
            latent_dim: self.world.latent_dim,
            cond_dim: self.world.cond_dim,
            ident_dim: self.world.ident_dim,
            sigma_data: self.world.sigma_data,
            identity_scale: self.world.identity_scale,
            motion_scale: self.world.motion_scale,
            cond_walk_step: self.world.cond_walk_step,
            unreliable_fraction: self.world.unreliable_fraction,
            seed: self.seed,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            latent: self.world.latent_dim,
            time: self.model.time_dim,
            cond: self.world.cond_dim,
            ident: self.world.ident_dim,
            hidden: self.model.hidden_dim,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_tdc: self.train.lambda_tdc,
            lambda_id: self.train.lambda_id,
            lambda_perc: self.train.lambda_perc,
            lambda_sync: self.train.lambda_sync,
        }
    }

    pub fn train_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            local_epochs: self.train.local_epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            prox_mu: self.train.prox_mu,
            weights: self.loss_weights(),
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            rounds: self.federation.rounds,
            client_fraction: self.federation.client_fraction,
            strategy: self.federation.strategy,
            gamma: self.federation.gamma,
            eta: self.federation.eta,
            dp: DpConfig {
                enabled: self.dp.enabled,
                clip_norm: self.dp.clip_norm,
                noise_multiplier: self.dp.noise_multiplier,
            },
            secure_agg: self.federation.secure_agg,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            pool_clips: self.federation.eval_clips,
            noise_draws: self.federation.eval_noise_draws,
            alpha_mix: self.federation.alpha_mix,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { num_steps: self.sampler.num_steps, stochastic: self.sampler.stochastic, seed: 0 }
    }
}

const KNOWN_SECTIONS: [&str; 7] =
    ["world", "model", "schedule", "train", "federation", "dp", "sampler"];
