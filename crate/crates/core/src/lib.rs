//! Desk-scale simulator for federated training of low-rank identity
//! adapters on a conditional diffusion denoiser, with quality-weighted
//! aggregation, client-level differential privacy, and simulated
//! pairwise-masking secure aggregation.

pub mod binio;
pub mod client;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod objectives;
pub mod privacy;
pub mod rng;
pub mod schedule;
pub mod server;
pub mod synthdata;

pub use client::{LocalTrainConfig, ReliabilityScore};
pub use denoiser::{AdapterSet, BackboneParams, ModelDims};
pub use error::{Error, Result};
pub use evaluation::{RoundRecord, SamplerConfig};
pub use objectives::{FrozenProbes, LossBreakdown, LossWeights};
pub use privacy::{DpConfig, MaskingSession};
pub use schedule::NoiseSchedule;
pub use server::{
    ClientUpdate, EvalConfig, FederationConfig, FederationOutcome, FederationSetup, Strategy,
};
pub use synthdata::{ClientDataset, Identity, LatentClip, World, WorldConfig};
