//! Flat binary formats: adapter checkpoints and world exports.
//!
//! Both formats are little-endian throughout. An adapter checkpoint is a
//! magic tag, the rank, the per-layer `(d_out, d_in)` shape header, and then
//! the flat coefficient vector in the documented flatten order (per layer,
//! `B` row-major then `A` row-major). A world export carries the generating
//! config, the identity table, the unreliable-client list, and every clip
//! verbatim, so imports are bit-exact.

use std::fs;
use std::path::Path;

use crate::denoiser::{flatten_adapters, unflatten_adapters, AdapterSet};
use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::synthdata::{ClientDataset, Identity, LatentClip, World, WorldConfig};

const ADAPTER_MAGIC: &[u8; 8] = b"FLADPT01";
const WORLD_MAGIC: &[u8; 8] = b"FLWRLD01";

#[derive(Default)]
struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} count {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Serializes adapters as shape header plus flat vector.
pub fn adapters_to_bytes(adapters: &AdapterSet) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes.extend_from_slice(ADAPTER_MAGIC);
    w.u64(adapters.rank() as u64);
    w.u64(adapters.layers().len() as u64);
    for layer in adapters.layers() {
        w.u64(layer.b.rows() as u64);
        w.u64(layer.a.cols() as u64);
    }
    w.f64_slice(&flatten_adapters(adapters));
    w.bytes
}

pub fn adapters_from_bytes(bytes: &[u8]) -> Result<AdapterSet> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != ADAPTER_MAGIC {
        return Err(Error::Format("not an adapter checkpoint".into()));
    }
    let rank = r.count("rank")?;
    let layers = r.count("layer")?;
    let mut shapes = Vec::with_capacity(layers);
    for _ in 0..layers {
        let d_out = r.count("rows")?;
        let d_in = r.count("cols")?;
        shapes.push((d_out, d_in));
    }
    let template = AdapterSet::zeros(&shapes, rank)?;
    let flat = r.f64_vec(template.flat_len())?;
    r.finish()?;
    unflatten_adapters(&flat, &template)
}

pub fn save_adapters(path: &Path, adapters: &AdapterSet) -> Result<()> {
    fs::write(path, adapters_to_bytes(adapters))?;
    Ok(())
}

pub fn load_adapters(path: &Path) -> Result<AdapterSet> {
    adapters_from_bytes(&fs::read(path)?)
}

fn clip_to_writer(w: &mut Writer, clip: &LatentClip) {
    w.u64(clip.identity_id as u64);
    w.u64(clip.frames.len() as u64);
    w.u64(clip.frames[0].len() as u64);
    w.u64(clip.cond[0].len() as u64);
    for frame in &clip.frames {
        w.f64_slice(frame);
    }
    for c in &clip.cond {
        w.f64_slice(c);
    }
}

fn clip_from_reader(r: &mut Reader<'_>) -> Result<LatentClip> {
    let identity_id = r.count("identity id")?;
    let frames = r.count("frame")?;
    let latent = r.count("latent dim")?;
    let cond = r.count("cond dim")?;
    let mut frame_rows = Vec::with_capacity(frames);
    for _ in 0..frames {
        frame_rows.push(r.f64_vec(latent)?);
    }
    let mut cond_rows = Vec::with_capacity(frames);
    for _ in 0..frames {
        cond_rows.push(r.f64_vec(cond)?);
    }
    Ok(LatentClip { frames: frame_rows, cond: cond_rows, identity_id })
}

/// Serializes a world (config, identity table, unreliable list, all client
/// clips and splits) for reproducible experiment replay.
pub fn world_to_bytes(world: &World) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes.extend_from_slice(WORLD_MAGIC);
    let c = &world.config;
    for v in [
        c.num_clients,
        c.identities_per_client,
        c.clips_per_client,
        c.frames,
        c.latent_dim,
        c.cond_dim,
        c.ident_dim,
    ] {
        w.u64(v as u64);
    }
    for v in [c.sigma_data, c.identity_scale, c.motion_scale, c.cond_walk_step, c.unreliable_fraction] {
        w.f64(v);
    }
    w.u64(c.seed);

    w.u64(world.identities.len() as u64);
    for ident in &world.identities {
        w.u64(ident.id as u64);
        w.u64(ident.embedding.len() as u64);
        w.f64_slice(&ident.embedding);
    }
    w.u64(world.unreliable_clients.len() as u64);
    for &id in &world.unreliable_clients {
        w.u64(id as u64);
    }
    w.u64(world.clients.len() as u64);
    for client in &world.clients {
        w.u64(client.client_id as u64);
        w.u64(client.val_start as u64);
        w.u64(client.clips.len() as u64);
        for clip in &client.clips {
            clip_to_writer(&mut w, clip);
        }
    }
    w.bytes
}

pub fn world_from_bytes(bytes: &[u8]) -> Result<World> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != WORLD_MAGIC {
        return Err(Error::Format("not a world export".into()));
    }
    let config = WorldConfig {
        num_clients: r.count("clients")?,
        identities_per_client: r.count("identities per client")?,
        clips_per_client: r.count("clips per client")?,
        frames: r.count("frames")?,
        latent_dim: r.count("latent dim")?,
        cond_dim: r.count("cond dim")?,
        ident_dim: r.count("ident dim")?,
        sigma_data: r.f64()?,
        identity_scale: r.f64()?,
        motion_scale: r.f64()?,
        cond_walk_step: r.f64()?,
        unreliable_fraction: r.f64()?,
        seed: r.u64()?,
    };
    let n_ident = r.count("identity")?;
    let mut identities = Vec::with_capacity(n_ident);
    for _ in 0..n_ident {
        let id = r.count("identity id")?;
        let dim = r.count("embedding dim")?;
        identities.push(Identity { id, embedding: r.f64_vec(dim)? });
    }
    let n_unreliable = r.count("unreliable")?;
    let unreliable_clients: Vec<usize> =
        (0..n_unreliable).map(|_| r.count("unreliable id")).collect::<Result<_>>()?;
    let n_clients = r.count("client")?;
    let mut clients = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let client_id = r.count("client id")?;
        let val_start = r.count("val start")?;
        let n_clips = r.count("clip")?;
        let mut clips = Vec::with_capacity(n_clips);
        for _ in 0..n_clips {
            clips.push(clip_from_reader(&mut r)?);
        }
        if val_start > clips.len() {
            return Err(Error::Format("validation split exceeds clip count".into()));
        }
        clients.push(ClientDataset { client_id, clips, val_start });
    }
    r.finish()?;
    Ok(World { config, identities, clients, unreliable_clients })
}

pub fn save_world(path: &Path, world: &World) -> Result<()> {
    fs::write(path, world_to_bytes(world))?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    world_from_bytes(&fs::read(path)?)
}

/// FNV-1a hash of the world's serialized bytes; equal worlds hash equal.
pub fn world_hash(world: &World) -> u64 {
    fnv1a(&world_to_bytes(world))
}
