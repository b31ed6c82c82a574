//! Client-level differential privacy (clip + Gaussian noise) and an
//! arithmetic-level simulation of pairwise-masking secure aggregation.
//!
//! The masking protocol here preserves the visibility contract of secure
//! aggregation (the server only learns sums) but is NOT a cryptographic
//! implementation: masks are real-valued streams from the crate's
//! documented counter-based generator, pair seeds are derived directly from
//! the run seed, and dropout recovery regenerates those seeds instead of
//! running a secret-sharing protocol.

use crate::error::{Error, Result};
use crate::linalg::l2_norm;
use crate::rng::{derive_seed, CounterRng};

/// Clip-and-noise settings for client updates.
#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    pub enabled: bool,
    /// Clipping norm C.
    pub clip_norm: f64,
    /// Noise multiplier sigma; the per-coordinate noise std is sigma * C.
    pub noise_multiplier: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { enabled: false, clip_norm: 1.0, noise_multiplier: 0.1 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::InvalidParam(format!(
                "dp clip_norm must be finite and > 0, got {}",
                self.clip_norm
            )));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "dp noise_multiplier must be finite and >= 0, got {}",
                self.noise_multiplier
            )));
        }
        Ok(())
    }
}

/// Scales the update so its L2 norm is at most `clip_norm` (untouched when
/// already inside the ball), then adds independent Gaussian noise of
/// standard deviation `noise_multiplier * clip_norm` per coordinate.
pub fn clip_and_noise(delta: &[f64], config: &DpConfig, rng: &mut CounterRng) -> Result<Vec<f64>> {
    config.validate()?;
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("update before clipping"));
    }
    let norm = l2_norm(delta);
    let mut out: Vec<f64> = if norm > config.clip_norm {
        let scale = config.clip_norm / norm;
        delta.iter().map(|v| v * scale).collect()
    } else {
        delta.to_vec()
    };
    if config.noise_multiplier > 0.0 {
        let std = config.noise_multiplier * config.clip_norm;
        for v in &mut out {
            *v += std * rng.normal();
        }
    }
    Ok(out)
}

/// Per-round masking state: the participant set and the material needed to
/// regenerate any pairwise mask. Immutable once created; masking is a pure
/// function of it, so client workers may mask concurrently.
#[derive(Debug, Clone)]
pub struct MaskingSession {
    run_seed: u64,
    round: u64,
    participants: Vec<usize>,
    vec_len: usize,
}

impl MaskingSession {
    /// `participants` is stored sorted; pair seeds are symmetric in the two
    /// endpoints by construction.
    pub fn new(run_seed: u64, round: u64, participants: &[usize], vec_len: usize) -> Self {
        let mut participants = participants.to_vec();
        participants.sort_unstable();
        participants.dedup();
        Self { run_seed, round, participants, vec_len }
    }

    pub fn participants(&self) -> &[usize] {
        &self.participants
    }

    pub fn vec_len(&self) -> usize {
        self.vec_len
    }

    fn contains(&self, id: usize) -> bool {
        self.participants.binary_search(&id).is_ok()
    }

    /// The shared mask stream for an unordered client pair.
    fn pair_mask(&self, i: usize, j: usize) -> Vec<f64> {
        let (lo, hi) = (i.min(j) as u64, i.max(j) as u64);
        let seed = derive_seed(self.run_seed, "mask", &[self.round, lo, hi]);
        CounterRng::new(seed).normal_vec(self.vec_len)
    }

    fn check_len(&self, v: &[f64], what: &'static str) -> Result<()> {
        if v.len() != self.vec_len {
            return Err(Error::LengthMismatch { got: v.len(), expected: self.vec_len });
        }
        let _ = what;
        Ok(())
    }
}

/// Adds the antisymmetric pairwise masks for `self_id`: plus the shared
/// stream toward every higher-indexed participant, minus toward every lower
/// one. Masks cancel in the sum over all participants.
pub fn mask_update(protected: &[f64], self_id: usize, session: &MaskingSession) -> Result<Vec<f64>> {
    if !session.contains(self_id) {
        return Err(Error::NotParticipant(self_id));
    }
    session.check_len(protected, "protected update")?;
    let mut out = protected.to_vec();
    for &other in session.participants() {
        if other == self_id {
            continue;
        }
        let mask = session.pair_mask(self_id, other);
        let sign = if other > self_id { 1.0 } else { -1.0 };
        for (o, m) in out.iter_mut().zip(&mask) {
            *o += sign * m;
        }
    }
    Ok(out)
}

/// Removes the mask terms left dangling by dropped participants from a sum
/// of received masked vectors, yielding exactly the sum of the received
/// clients' protected vectors (up to float rounding).
pub fn unmask_dropouts(
    sum_of_received: &[f64],
    session: &MaskingSession,
    received_ids: &[usize],
    dropped_ids: &[usize],
) -> Result<Vec<f64>> {
    session.check_len(sum_of_received, "received sum")?;
    let mut received = received_ids.to_vec();
    received.sort_unstable();
    received.dedup();
    let mut dropped = dropped_ids.to_vec();
    dropped.sort_unstable();
    dropped.dedup();
    if received.iter().any(|id| dropped.binary_search(id).is_ok()) {
        return Err(Error::BadDropoutSets);
    }
    let mut union: Vec<usize> = received.iter().chain(&dropped).copied().collect();
    union.sort_unstable();
    if union != session.participants {
        return Err(Error::BadDropoutSets);
    }
    if dropped.is_empty() {
        return Ok(sum_of_received.to_vec());
    }
    let mut out = sum_of_received.to_vec();
    for &alive in &received {
        for &gone in &dropped {
            // `alive` added +mask toward higher ids and -mask toward lower
            // ones; undo that contribution.
            let mask = session.pair_mask(alive, gone);
            let sign = if gone > alive { -1.0 } else { 1.0 };
            for (o, m) in out.iter_mut().zip(&mask) {
                *o += sign * m;
            }
        }
    }
    Ok(out)
}
