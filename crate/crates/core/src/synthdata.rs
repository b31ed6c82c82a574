//! Synthetic non-IID client worlds: paired latent clips and conditioning
//! signals with strictly disjoint identity assignment per client.
//!
//! Frame latents follow a seeded global linear structure,
//! `z0_f = M_id * e + motion_scale * <u, c_f> * v + N(0, sigma_data^2)`,
//! so a linear map from the network inputs (conditioning and identity
//! embedding are both visible to the denoiser) can explain most of the
//! signal. `M_id` is the scaled right pseudo-inverse of the shared frozen
//! identity probe: real identity embeddings are defined through the
//! embedding network that reads them back, so generated latents must carry
//! their identity in a probe-readable direction. Conditioning sequences are
//! Gaussian random walks, which gives every clip nontrivial per-step change
//! magnitudes for the temporal terms.

use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::FrozenProbes;
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_clients: usize,
    pub identities_per_client: usize,
    pub clips_per_client: usize,
    pub frames: usize,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub ident_dim: usize,
    pub sigma_data: f64,
    /// Norm of the identity component `M_id * e` of each frame.
    pub identity_scale: f64,
    /// Scale of the conditioning-driven motion component.
    pub motion_scale: f64,
    /// Step size of the conditioning random walk; zero freezes the
    /// conditioning within each clip.
    pub cond_walk_step: f64,
    /// Fraction of clients whose identity labels are corrupted.
    pub unreliable_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            identities_per_client: 2,
            clips_per_client: 16,
            frames: 8,
            latent_dim: 16,
            cond_dim: 4,
            ident_dim: 8,
            sigma_data: 0.05,
            identity_scale: 2.0,
            motion_scale: 0.5,
            cond_walk_step: 0.3,
            unreliable_fraction: 0.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_clients", self.num_clients),
            ("identities_per_client", self.identities_per_client),
            ("clips_per_client", self.clips_per_client),
            ("latent_dim", self.latent_dim),
            ("cond_dim", self.cond_dim),
            ("ident_dim", self.ident_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidParam(format!("{name} must be >= 1")));
            }
        }
        if self.frames < 2 {
            return Err(Error::InvalidParam("frames must be >= 2".into()));
        }
        if self.num_clients.checked_mul(self.identities_per_client).is_none() {
            return Err(Error::InvalidParam("identity count overflows".into()));
        }
        if self.ident_dim > self.latent_dim {
            return Err(Error::InvalidParam(
                "ident_dim must not exceed latent_dim (the identity probe must have full row rank)".into(),
            ));
        }
        for (name, v) in [
            ("sigma_data", self.sigma_data),
            ("identity_scale", self.identity_scale),
            ("motion_scale", self.motion_scale),
            ("cond_walk_step", self.cond_walk_step),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParam(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.unreliable_fraction) {
            return Err(Error::InvalidParam("unreliable_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// An identity and its unit-norm reference embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub id: usize,
    pub embedding: Vec<f64>,
}

/// One clip: clean frame latents with the paired conditioning sequence and
/// the identity label used for lookups into the shared table.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub frames: Vec<Vec<f64>>,
    pub cond: Vec<Vec<f64>>,
    pub identity_id: usize,
}

/// A client's local data with its deterministic train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub clips: Vec<LatentClip>,
    /// Training clips are `clips[..val_start]`, validation the rest.
    pub val_start: usize,
}

impl ClientDataset {
    pub fn training(&self) -> &[LatentClip] {
        &self.clips[..self.val_start]
    }

    pub fn validation(&self) -> &[LatentClip] {
        &self.clips[self.val_start..]
    }

    /// Local sample count reported for aggregation weighting.
    pub fn n_k(&self) -> usize {
        self.val_start
    }
}

/// All client datasets plus the shared identity table.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub identities: Vec<Identity>,
    pub clients: Vec<ClientDataset>,
    /// Clients whose identity labels were corrupted, ascending.
    pub unreliable_clients: Vec<usize>,
}

impl World {
    pub fn identity(&self, id: usize) -> &Identity {
        &self.identities[id]
    }
}

fn unit_vector(dim: usize, rng: &mut CounterRng) -> Vec<f64> {
    loop {
        if let Ok(v) = linalg::normalized(&rng.normal_vec(dim)) {
            return v;
        }
    }
}

/// Validation size: last 25% of the clips (at least one once a client has
/// two or more clips).
fn val_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        ((0.25 * n as f64).round() as usize).clamp(1, n - 1)
    }
}

/// Generates the full federated world from a seed. Identity assignment is
/// strictly disjoint across clients.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seed = config.seed;
    let mut global_rng = CounterRng::derived(seed, "world-global", &[]);
    // The identity component must be readable by the shared frozen probe,
    // mirroring how identity embeddings come from the embedding network in
    // the first place. The probe's identity matrix does not depend on the
    // perceptual width, so any value works in its place here.
    let probe = FrozenProbes::from_seed(seed, config.latent_dim, config.ident_dim, 1);
    let mut id_map = probe.identity_matrix().right_pseudo_inverse()?;
    id_map.scale_in_place(config.identity_scale);
    let cond_probe = unit_vector(config.cond_dim, &mut global_rng);
    let motion_dir = unit_vector(config.latent_dim, &mut global_rng);

    let num_identities = config.num_clients * config.identities_per_client;
    let mut ident_rng = CounterRng::derived(seed, "world-ident", &[]);
    let identities: Vec<Identity> = (0..num_identities)
        .map(|id| Identity { id, embedding: unit_vector(config.ident_dim, &mut ident_rng) })
        .collect();

    let mut clients = Vec::with_capacity(config.num_clients);
    for client_id in 0..config.num_clients {
        let mut rng = CounterRng::derived(seed, "world-client", &[client_id as u64]);
        let first_identity = client_id * config.identities_per_client;
        let mut clips = Vec::with_capacity(config.clips_per_client);
        for _ in 0..config.clips_per_client {
            let identity_id = first_identity + rng.below(config.identities_per_client as u64) as usize;
            let embedding = &identities[identity_id].embedding;
            let base = id_map.matvec(embedding);
            let mut cond = Vec::with_capacity(config.frames);
            let mut walk = rng.normal_vec(config.cond_dim);
            cond.push(walk.clone());
            for _ in 1..config.frames {
                for w in &mut walk {
                    *w += config.cond_walk_step * rng.normal();
                }
                cond.push(walk.clone());
            }
            let mut frames = Vec::with_capacity(config.frames);
            for c in &cond {
                let drive = config.motion_scale * linalg::dot(&cond_probe, c);
                let frame: Vec<f64> = base
                    .iter()
                    .zip(&motion_dir)
                    .map(|(b, m)| b + drive * m + config.sigma_data * rng.normal())
                    .collect();
                frames.push(frame);
            }
            clips.push(LatentClip { frames, cond, identity_id });
        }
        let val_start = clips.len() - val_count(clips.len());
        clients.push(ClientDataset { client_id, clips, val_start });
    }

    // Label-noise injection: after clips were generated from the true
    // embeddings, each clip of an unreliable client is relabeled to a
    // uniformly random identity of that client, so roughly half its labels
    // contradict the content. A single-identity client has no within-client
    // shuffle, so its one table row is replaced by a fresh embedding
    // instead.
    let num_unreliable = (config.unreliable_fraction * config.num_clients as f64).floor() as usize;
    let mut unreliable_clients = Vec::new();
    if num_unreliable > 0 {
        let mut pick = CounterRng::derived(seed, "world-unreliable", &[]);
        let mut ids: Vec<usize> = (0..config.num_clients).collect();
        for i in 0..num_unreliable {
            let j = i + pick.below((ids.len() - i) as u64) as usize;
            ids.swap(i, j);
        }
        unreliable_clients = ids[..num_unreliable].to_vec();
        unreliable_clients.sort_unstable();
    }
    let mut identities = identities;
    for &client_id in &unreliable_clients {
        let first = client_id * config.identities_per_client;
        let count = config.identities_per_client;
        let mut rng = CounterRng::derived(seed, "world-relabel", &[client_id as u64]);
        if count >= 2 {
            for clip in &mut clients[client_id].clips {
                clip.identity_id = first + rng.below(count as u64) as usize;
            }
        } else {
            identities[first].embedding = unit_vector(config.ident_dim, &mut rng);
        }
    }

    Ok(World { config: config.clone(), identities, clients, unreliable_clients })
}

/// One sampled training element: a clip index plus the step and noise draw
/// shared by every frame of that clip.
#[derive(Debug, Clone)]
pub struct BatchDraw {
    pub clip_index: usize,
    pub t: usize,
    pub noise: Vec<Vec<f64>>,
}

/// Uniform-with-replacement mini-batch from the training split: one step
/// draw and one noise tensor per clip.
pub fn sample_batch(
    dataset: &ClientDataset,
    batch_size: usize,
    t_steps: usize,
    rng: &mut CounterRng,
) -> Result<Vec<BatchDraw>> {
    if dataset.val_start == 0 {
        return Err(Error::EmptySplit("training"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParam("batch_size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let clip_index = rng.below(dataset.val_start as u64) as usize;
        let t = rng.below(t_steps as u64) as usize;
        let clip = &dataset.clips[clip_index];
        let noise = clip.frames.iter().map(|f| rng.normal_vec(f.len())).collect();
        out.push(BatchDraw { clip_index, t, noise });
    }
    Ok(out)
}
