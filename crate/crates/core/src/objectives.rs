//! Client-side loss terms and their weighted combination.
//!
//! The diffusion term compares predicted and injected noise directly. The
//! temporal-consistency term penalizes mismatch between consecutive-frame
//! differences of the two noise tensors. Identity, perceptual, and sync
//! terms operate on the one-step denoised estimate
//! `zhat0 = (z_t - sqrt(1-alpha_bar)*pred) / sqrt(alpha_bar)` and on frozen
//! random linear probes that stand in for pretrained feature networks: they
//! are fixed, shared by every participant, and differentiable, which is all
//! the protocol requires of them.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::CounterRng;

/// Weights of the non-diffusion loss terms; the diffusion term always has
/// weight 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_tdc: f64,
    pub lambda_id: f64,
    pub lambda_perc: f64,
    pub lambda_sync: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_tdc: 0.1, lambda_id: 0.1, lambda_perc: 0.05, lambda_sync: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_tdc", self.lambda_tdc),
            ("lambda_id", self.lambda_id),
            ("lambda_perc", self.lambda_perc),
            ("lambda_sync", self.lambda_sync),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParam(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted values of the five loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub tdc: f64,
    pub identity: f64,
    pub perceptual: f64,
    pub sync: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.diffusion.is_finite()
            && self.tdc.is_finite()
            && self.identity.is_finite()
            && self.perceptual.is_finite()
            && self.sync.is_finite()
    }
}

/// Frozen random linear probes shared by all clients and the server.
///
/// `identity` maps a frame latent to the identity-embedding space (output is
/// normalized per frame before use); `perceptual` maps a frame latent to a
/// feature space compared under L1.
#[derive(Debug, Clone)]
pub struct FrozenProbes {
    identity: Matrix,
    perceptual: Matrix,
}

impl FrozenProbes {
    /// Derives both probes from the run seed; every participant must build
    /// them from the same seed.
    pub fn from_seed(seed: u64, latent_dim: usize, ident_dim: usize, perc_dim: usize) -> Self {
        let mut rng = CounterRng::derived(seed, "probes", &[]);
        let std = 1.0 / (latent_dim as f64).sqrt();
        let identity = Matrix::gaussian(ident_dim, latent_dim, std, &mut rng);
        let perceptual = Matrix::gaussian(perc_dim, latent_dim, std, &mut rng);
        Self { identity, perceptual }
    }

    /// Probes from explicit matrices, for tests and stubs.
    pub fn from_matrices(identity: Matrix, perceptual: Matrix) -> Self {
        Self { identity, perceptual }
    }

    /// Unit-normalized identity-probe embedding of one frame.
    pub fn embed_identity(&self, frame: &[f64]) -> Result<Vec<f64>> {
        linalg::normalized(&self.identity.matvec(frame))
    }

    pub fn identity_matrix(&self) -> &Matrix {
        &self.identity
    }

    pub fn perceptual_features(&self, frame: &[f64]) -> Vec<f64> {
        self.perceptual.matvec(frame)
    }

    pub fn perc_dim(&self) -> usize {
        self.perceptual.rows()
    }
}

fn check_same_shape(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::ShapeMismatch(format!("{what}: tensors differ in shape")));
    }
    Ok(())
}

/// Mean squared error over all frames and coordinates.
pub fn diffusion_loss(true_noise: &[Vec<f64>], predicted: &[Vec<f64>]) -> Result<f64> {
    check_same_shape(true_noise, predicted, "diffusion_loss")?;
    let n: usize = true_noise.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for (tf, pf) in true_noise.iter().zip(predicted) {
        for (t, p) in tf.iter().zip(pf) {
            let d = p - t;
            acc += d * d;
        }
    }
    Ok(acc / n as f64)
}

/// Mean absolute error between consecutive-frame differences of true and
/// predicted noise. Requires at least two frames.
pub fn tdc_loss(true_noise: &[Vec<f64>], predicted: &[Vec<f64>]) -> Result<f64> {
    check_same_shape(true_noise, predicted, "tdc_loss")?;
    let frames = true_noise.len();
    if frames < 2 {
        return Err(Error::TooFewFrames(frames));
    }
    let width = true_noise[0].len();
    let n = (frames - 1) * width;
    let mut acc = 0.0;
    for f in 1..frames {
        for c in 0..width {
            let dt = true_noise[f][c] - true_noise[f - 1][c];
            let dp = predicted[f][c] - predicted[f - 1][c];
            acc += (dt - dp).abs();
        }
    }
    Ok(acc / n as f64)
}

/// One minus the cosine similarity between the mean per-frame identity-probe
/// embedding of the generated frames and the reference embedding.
pub fn identity_loss(
    generated: &[Vec<f64>],
    ref_embedding: &[f64],
    probes: &FrozenProbes,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = ref_embedding.len();
    let mut mean = vec![0.0; dim];
    for frame in generated {
        let emb = probes.embed_identity(frame)?;
        linalg::axpy(&mut mean, 1.0 / generated.len() as f64, &emb);
    }
    Ok(1.0 - linalg::cosine(&mean, ref_embedding)?)
}

/// Mean absolute difference of perceptual-probe features.
pub fn perceptual_loss(
    generated: &[Vec<f64>],
    target: &[Vec<f64>],
    probes: &FrozenProbes,
) -> Result<f64> {
    check_same_shape(generated, target, "perceptual_loss")?;
    if generated.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let q = probes.perc_dim();
    let n = generated.len() * q;
    let mut acc = 0.0;
    for (g, t) in generated.iter().zip(target) {
        let fg = probes.perceptual_features(g);
        let ft = probes.perceptual_features(t);
        for (a, b) in fg.iter().zip(&ft) {
            acc += (a - b).abs();
        }
    }
    Ok(acc / n as f64)
}

/// Per-step change magnitudes of a frame sequence: `||x_{f+1} - x_f||_2`.
fn change_magnitudes(seq: &[Vec<f64>]) -> Vec<f64> {
    (1..seq.len()).map(|f| linalg::l2_norm(&linalg::sub(&seq[f], &seq[f - 1]))).collect()
}

const SYNC_VARIANCE_FLOOR: f64 = 1e-12;

/// Centered values and their L2 norm; `None` when the sequence carries no
/// variance to correlate against.
fn centered(values: &[f64]) -> Option<(Vec<f64>, f64)> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let cent: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let norm = linalg::l2_norm(&cent);
    if norm <= SYNC_VARIANCE_FLOOR {
        None
    } else {
        Some((cent, norm))
    }
}

/// One minus the Pearson correlation between per-step conditioning change
/// magnitudes and per-step generated-frame change magnitudes, clamped to
/// `[0, 2]`. Returns the neutral value 1 when either sequence has zero
/// variance.
pub fn sync_proxy_loss(generated: &[Vec<f64>], cond: &[Vec<f64>]) -> Result<f64> {
    if generated.len() < 2 {
        return Err(Error::TooFewFrames(generated.len()));
    }
    if cond.len() != generated.len() {
        return Err(Error::ShapeMismatch(format!(
            "conditioning length {} differs from frame count {}",
            cond.len(),
            generated.len()
        )));
    }
    let a = change_magnitudes(cond);
    let b = change_magnitudes(generated);
    let (Some((ca, na)), Some((cb, nb))) = (centered(&a), centered(&b)) else {
        return Ok(1.0);
    };
    let corr = linalg::dot(&ca, &cb) / (na * nb);
    Ok((1.0 - corr).clamp(0.0, 2.0))
}

/// Weighted sum of the five terms; the parts themselves stay unweighted in
/// the breakdown. Non-finite parts are rejected rather than propagated.
pub fn combined_loss(parts: &LossBreakdown, weights: &LossWeights) -> Result<f64> {
    if !parts.is_finite() {
        return Err(Error::NonFinite("loss breakdown"));
    }
    let total = parts.diffusion
        + weights.lambda_tdc * parts.tdc
        + weights.lambda_id * parts.identity
        + weights.lambda_perc * parts.perceptual
        + weights.lambda_sync * parts.sync;
    if !total.is_finite() {
        return Err(Error::NonFinite("combined loss"));
    }
    Ok(total)
}

/// Everything needed to score one clip against one (t, noise) draw.
pub struct ClipLossInputs<'a> {
    pub true_noise: &'a [Vec<f64>],
    pub predicted: &'a [Vec<f64>],
    /// Noisy latent the prediction was made from.
    pub z_t: &'a [Vec<f64>],
    /// Cumulative schedule coefficient at the drawn step.
    pub alpha_bar: f64,
    /// Clean latent frames (perceptual target).
    pub target_frames: &'a [Vec<f64>],
    pub cond: &'a [Vec<f64>],
    pub ref_embedding: &'a [f64],
}

/// One-step denoised estimate used as the generated clip inside training
/// losses.
pub fn denoised_estimate(z_t: &[Vec<f64>], predicted: &[Vec<f64>], alpha_bar: f64) -> Vec<Vec<f64>> {
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    z_t.iter()
        .zip(predicted)
        .map(|(zf, pf)| zf.iter().zip(pf).map(|(z, p)| (z - noise * p) / signal).collect())
        .collect()
}

/// All five unweighted terms for one clip.
pub fn clip_loss_terms(inp: &ClipLossInputs<'_>, probes: &FrozenProbes) -> Result<LossBreakdown> {
    let zhat = denoised_estimate(inp.z_t, inp.predicted, inp.alpha_bar);
    Ok(LossBreakdown {
        diffusion: diffusion_loss(inp.true_noise, inp.predicted)?,
        tdc: tdc_loss(inp.true_noise, inp.predicted)?,
        identity: identity_loss(&zhat, inp.ref_embedding, probes)?,
        perceptual: perceptual_loss(&zhat, inp.target_frames, probes)?,
        sync: sync_proxy_loss(&zhat, inp.cond)?,
    })
}

fn zeros_like(frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    frames.iter().map(|f| vec![0.0; f.len()]).collect()
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `identity_loss` with respect to the generated frames.
fn identity_grad(
    generated: &[Vec<f64>],
    ref_embedding: &[f64],
    probes: &FrozenProbes,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let frames = generated.len() as f64;
    let dim = ref_embedding.len();
    let mut unit_ref = linalg::normalized(ref_embedding)?;
    // Per-frame raw probe outputs, their norms, and normalized embeddings.
    let mut raw = Vec::with_capacity(generated.len());
    let mut units = Vec::with_capacity(generated.len());
    let mut mean = vec![0.0; dim];
    for frame in generated {
        let u = probes.identity_matrix().matvec(frame);
        let n = linalg::l2_norm(&u);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        let unit: Vec<f64> = u.iter().map(|x| x / n).collect();
        linalg::axpy(&mut mean, 1.0 / frames, &unit);
        raw.push((u, n));
        units.push(unit);
    }
    let mean_norm = linalg::l2_norm(&mean);
    if mean_norm == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    let cos = linalg::dot(&mean, &unit_ref) / mean_norm;
    // d(loss)/d(mean) = -(ref/|m| - cos * m/|m|^2)
    for (g, m) in unit_ref.iter_mut().zip(&mean) {
        *g = -(*g / mean_norm - cos * m / (mean_norm * mean_norm));
    }
    let grad_mean = unit_ref;
    let mut grads = Vec::with_capacity(generated.len());
    for ((_, norm), unit) in raw.iter().zip(&units) {
        // Through the per-frame normalization: (g - unit (unit . g)) / (F * |u|).
        let proj = linalg::dot(unit, &grad_mean);
        let du: Vec<f64> = grad_mean
            .iter()
            .zip(unit)
            .map(|(g, n)| (g - proj * n) / (frames * norm))
            .collect();
        grads.push(probes.identity_matrix().matvec_t(&du));
    }
    Ok((1.0 - cos, grads))
}

/// Gradient of `perceptual_loss` with respect to the generated frames.
fn perceptual_grad(
    generated: &[Vec<f64>],
    target: &[Vec<f64>],
    probes: &FrozenProbes,
) -> (f64, Vec<Vec<f64>>) {
    let q = probes.perc_dim();
    let n = (generated.len() * q) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(generated.len());
    for (g, t) in generated.iter().zip(target) {
        let fg = probes.perceptual_features(g);
        let ft = probes.perceptual_features(t);
        let mut signs = Vec::with_capacity(q);
        for (a, b) in fg.iter().zip(&ft) {
            value += (a - b).abs();
            signs.push(sign(a - b) / n);
        }
        grads.push(probes.perceptual.matvec_t(&signs));
    }
    (value / n, grads)
}

/// Gradient of `sync_proxy_loss` with respect to the generated frames.
fn sync_grad(generated: &[Vec<f64>], cond: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let mut grads = zeros_like(generated);
    let a = change_magnitudes(cond);
    let b = change_magnitudes(generated);
    let (Some((ca, na)), Some((cb, nb))) = (centered(&a), centered(&b)) else {
        return (1.0, grads);
    };
    let corr = linalg::dot(&ca, &cb) / (na * nb);
    // d(1 - corr)/d(b_i) = -(ca_i/(na*nb) - corr * cb_i/nb^2)
    for i in 0..b.len() {
        let dcorr_db = ca[i] / (na * nb) - corr * cb[i] / (nb * nb);
        let diff = linalg::sub(&generated[i + 1], &generated[i]);
        if b[i] == 0.0 {
            continue;
        }
        let scale = -dcorr_db / b[i];
        linalg::axpy(&mut grads[i + 1], scale, &diff);
        linalg::axpy(&mut grads[i], -scale, &diff);
    }
    ((1.0 - corr).clamp(0.0, 2.0), grads)
}

/// Computes every loss term for one clip together with the gradient of the
/// weighted objective with respect to the predicted noise tensor. Terms with
/// zero weight still report their value but contribute no gradient.
pub fn clip_loss_with_grad(
    inp: &ClipLossInputs<'_>,
    probes: &FrozenProbes,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let frames = inp.predicted.len();
    if frames < 2 {
        return Err(Error::TooFewFrames(frames));
    }
    check_same_shape(inp.true_noise, inp.predicted, "clip loss")?;
    check_same_shape(inp.z_t, inp.predicted, "clip loss z_t")?;
    let width = inp.predicted[0].len();
    let mut grad = zeros_like(inp.predicted);

    // Diffusion: d/d(pred) of mean squared error.
    let diffusion = diffusion_loss(inp.true_noise, inp.predicted)?;
    let n_diff = (frames * width) as f64;
    for f in 0..frames {
        for c in 0..width {
            grad[f][c] += 2.0 * (inp.predicted[f][c] - inp.true_noise[f][c]) / n_diff;
        }
    }

    // Temporal consistency on the noise deltas.
    let tdc = tdc_loss(inp.true_noise, inp.predicted)?;
    if weights.lambda_tdc > 0.0 {
        let n_tdc = ((frames - 1) * width) as f64;
        for f in 1..frames {
            for c in 0..width {
                let dt = inp.true_noise[f][c] - inp.true_noise[f - 1][c];
                let dp = inp.predicted[f][c] - inp.predicted[f - 1][c];
                let s = weights.lambda_tdc * sign(dp - dt) / n_tdc;
                grad[f][c] += s;
                grad[f - 1][c] -= s;
            }
        }
    }

    // Remaining terms act on the one-step denoised estimate.
    let zhat = denoised_estimate(inp.z_t, inp.predicted, inp.alpha_bar);
    // d(zhat)/d(pred) = -sqrt(1-alpha_bar)/sqrt(alpha_bar).
    let chain = -(1.0 - inp.alpha_bar).sqrt() / inp.alpha_bar.sqrt();

    let (identity, id_grads) = identity_grad(&zhat, inp.ref_embedding, probes)?;
    let (perceptual, perc_grads) = perceptual_grad(&zhat, inp.target_frames, probes);
    let (sync, sync_grads) = sync_grad(&zhat, inp.cond);
    for f in 0..frames {
        if weights.lambda_id > 0.0 {
            linalg::axpy(&mut grad[f], chain * weights.lambda_id, &id_grads[f]);
        }
        if weights.lambda_perc > 0.0 {
            linalg::axpy(&mut grad[f], chain * weights.lambda_perc, &perc_grads[f]);
        }
        if weights.lambda_sync > 0.0 {
            linalg::axpy(&mut grad[f], chain * weights.lambda_sync, &sync_grads[f]);
        }
    }

    Ok((LossBreakdown { diffusion, tdc, identity, perceptual, sync }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn ident_probe(dim: usize) -> Matrix {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    fn probes_identity(dim: usize) -> FrozenProbes {
        FrozenProbes::from_matrices(ident_probe(dim), ident_probe(dim))
    }

    #[test]
    fn diffusion_loss_cases() {
        let a = vec![vec![0.3, -0.2], vec![1.0, 0.0]];
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let t = vec![vec![0.0, 0.0]];
        let p = vec![vec![1.0, 1.0]];
        assert_eq!(diffusion_loss(&t, &p).unwrap(), 1.0);
        // Scaling the error by c scales the loss by c^2.
        let p2 = vec![vec![3.0, 3.0]];
        assert_eq!(diffusion_loss(&t, &p2).unwrap(), 9.0);
        assert!(diffusion_loss(&t, &a).is_err());
    }

    #[test]
    fn tdc_loss_cases() {
        let t = vec![vec![0.0], vec![1.0]];
        assert_eq!(tdc_loss(&t, &t).unwrap(), 0.0);
        let p = vec![vec![5.0], vec![5.0]];
        assert_eq!(tdc_loss(&t, &p).unwrap(), 1.0);
        // Constant per-clip offsets of the prediction cancel in differences.
        let mut rng = CounterRng::new(5);
        let truth: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3)).collect();
        let pred: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3)).collect();
        let shifted: Vec<Vec<f64>> =
            pred.iter().map(|f| f.iter().map(|v| v + 2.75).collect()).collect();
        let base = tdc_loss(&truth, &pred).unwrap();
        let off = tdc_loss(&truth, &shifted).unwrap();
        assert!((base - off).abs() < 1e-12);
        assert!(tdc_loss(&[vec![1.0]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn identity_loss_parallel_orthogonal_antiparallel() {
        let probes = probes_identity(2);
        let reference = [1.0, 0.0];
        let parallel = vec![vec![2.0, 0.0]];
        let orthogonal = vec![vec![0.0, 5.0]];
        let anti = vec![vec![-0.3, 0.0]];
        assert!(identity_loss(&parallel, &reference, &probes).unwrap().abs() < 1e-12);
        assert!((identity_loss(&orthogonal, &reference, &probes).unwrap() - 1.0).abs() < 1e-12);
        assert!((identity_loss(&anti, &reference, &probes).unwrap() - 2.0).abs() < 1e-12);
        // Zero-norm probe output is a defined error.
        assert!(identity_loss(&[vec![0.0, 0.0]], &reference, &probes).is_err());
    }

    #[test]
    fn identity_loss_invariant_to_positive_rescaling() {
        let probes = FrozenProbes::from_seed(11, 4, 3, 3);
        let mut rng = CounterRng::new(3);
        let frames: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(4)).collect();
        let scaled: Vec<Vec<f64>> =
            frames.iter().map(|f| f.iter().map(|v| 7.5 * v).collect()).collect();
        let e = linalg::normalized(&rng.normal_vec(3)).unwrap();
        let a = identity_loss(&frames, &e, &probes).unwrap();
        let b = identity_loss(&scaled, &e, &probes).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn perceptual_loss_cases() {
        let probes = probes_identity(1);
        let g = vec![vec![2.0]];
        let t = vec![vec![0.0]];
        assert_eq!(perceptual_loss(&g, &g, &probes).unwrap(), 0.0);
        assert_eq!(perceptual_loss(&g, &t, &probes).unwrap(), 2.0);
    }

    #[test]
    fn perceptual_loss_triangle_inequality() {
        let probes = FrozenProbes::from_seed(9, 3, 2, 5);
        let mut rng = CounterRng::new(31);
        for _ in 0..50 {
            let a: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(3)).collect();
            let b: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(3)).collect();
            let c: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(3)).collect();
            let ac = perceptual_loss(&a, &c, &probes).unwrap();
            let ab = perceptual_loss(&a, &b, &probes).unwrap();
            let bc = perceptual_loss(&b, &c, &probes).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn sync_proxy_loss_cases() {
        // Conditioning whose change magnitudes are 1, 2, 3.
        let cond = vec![vec![0.0], vec![1.0], vec![3.0], vec![6.0]];
        // Frame changes exactly proportional -> correlation 1 -> loss 0.
        let frames = vec![vec![0.0], vec![0.5], vec![1.5], vec![3.0]];
        assert!(sync_proxy_loss(&frames, &cond).unwrap().abs() < 1e-12);
        // Anti-proportional change magnitudes 3, 2, 1 -> loss 2.
        let anti = vec![vec![0.0], vec![3.0], vec![5.0], vec![6.0]];
        assert!((sync_proxy_loss(&anti, &cond).unwrap() - 2.0).abs() < 1e-12);
        // Constant conditioning has zero variance -> neutral 1.
        let flat = vec![vec![2.0]; 4];
        assert_eq!(sync_proxy_loss(&frames, &flat).unwrap(), 1.0);
        assert!(sync_proxy_loss(&frames[..1], &cond[..1]).is_err());
        assert!(sync_proxy_loss(&frames, &cond[..3]).is_err());
    }

    #[test]
    fn combined_loss_cases() {
        let weights0 =
            LossWeights { lambda_tdc: 0.0, lambda_id: 0.0, lambda_perc: 0.0, lambda_sync: 0.0 };
        let parts = LossBreakdown { diffusion: 0.7, tdc: 9.0, identity: 9.0, perceptual: 9.0, sync: 9.0 };
        assert_eq!(combined_loss(&parts, &weights0).unwrap(), 0.7);

        let ones = LossBreakdown { diffusion: 1.0, tdc: 1.0, identity: 1.0, perceptual: 1.0, sync: 1.0 };
        let w1 = LossWeights { lambda_tdc: 1.0, lambda_id: 1.0, lambda_perc: 1.0, lambda_sync: 1.0 };
        assert_eq!(combined_loss(&ones, &w1).unwrap(), 5.0);

        let parts = LossBreakdown { diffusion: 0.5, tdc: 0.2, identity: 0.1, perceptual: 0.1, sync: 0.1 };
        let w = LossWeights { lambda_tdc: 1.0, lambda_id: 2.0, lambda_perc: 1.0, lambda_sync: 0.5 };
        assert!((combined_loss(&parts, &w).unwrap() - 1.05).abs() < 1e-15);

        let bad = LossBreakdown { diffusion: f64::NAN, ..ones };
        assert!(combined_loss(&bad, &w1).is_err());
    }

    #[test]
    fn losses_are_nonnegative_and_finite_on_random_inputs() {
        let probes = FrozenProbes::from_seed(100, 4, 3, 5);
        let mut rng = CounterRng::new(64);
        for _ in 0..100 {
            let truth: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(4)).collect();
            let pred: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(4)).collect();
            let cond: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(2)).collect();
            let e = linalg::normalized(&rng.normal_vec(3)).unwrap();
            for v in [
                diffusion_loss(&truth, &pred).unwrap(),
                tdc_loss(&truth, &pred).unwrap(),
                identity_loss(&pred, &e, &probes).unwrap(),
                perceptual_loss(&pred, &truth, &probes).unwrap(),
                sync_proxy_loss(&pred, &cond).unwrap(),
            ] {
                assert!(v.is_finite() && v >= 0.0, "loss {v} out of range");
            }
        }
    }

    /// Finite-difference check of the clip-level gradient with respect to
    /// the predicted noise, independent of any network.
    #[test]
    fn clip_gradient_matches_finite_differences() {
        let probes = FrozenProbes::from_seed(7, 4, 3, 5);
        let weights = LossWeights::default();
        let mut rng = CounterRng::new(17);
        let frames = 4;
        let width = 4;
        let target: Vec<Vec<f64>> = (0..frames).map(|_| rng.normal_vec(width)).collect();
        let cond: Vec<Vec<f64>> = (0..frames).map(|_| rng.normal_vec(2)).collect();
        let truth: Vec<Vec<f64>> = (0..frames).map(|_| rng.normal_vec(width)).collect();
        let z_t: Vec<Vec<f64>> = (0..frames).map(|_| rng.normal_vec(width)).collect();
        let mut pred: Vec<Vec<f64>> = (0..frames).map(|_| rng.normal_vec(width)).collect();
        let e = linalg::normalized(&rng.normal_vec(3)).unwrap();
        let alpha_bar = 0.62;

        let total = |pred: &[Vec<f64>]| -> f64 {
            let inputs = ClipLossInputs {
                true_noise: &truth,
                predicted: pred,
                z_t: &z_t,
                alpha_bar,
                target_frames: &target,
                cond: &cond,
                ref_embedding: &e,
            };
            let parts = clip_loss_terms(&inputs, &probes).unwrap();
            combined_loss(&parts, &weights).unwrap()
        };

        let inputs = ClipLossInputs {
            true_noise: &truth,
            predicted: &pred,
            z_t: &z_t,
            alpha_bar,
            target_frames: &target,
            cond: &cond,
            ref_embedding: &e,
        };
        let (parts, grad) = clip_loss_with_grad(&inputs, &probes, &weights).unwrap();
        let direct = clip_loss_terms(&inputs, &probes).unwrap();
        assert_eq!(parts, direct);

        let h = 1e-6;
        for f in 0..frames {
            for c in 0..width {
                let orig = pred[f][c];
                pred[f][c] = orig + h;
                let up = total(&pred);
                pred[f][c] = orig - h;
                let down = total(&pred);
                pred[f][c] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (grad[f][c] - fd).abs() / grad[f][c].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "grad[{f}][{c}]={} vs fd={fd} (rel {rel})", grad[f][c]);
            }
        }
    }
}
