//! Toy conditional noise-prediction network with low-rank identity adapters
//! and exact manual gradients.
//!
//! The backbone is a per-frame two-layer perceptron with tanh hidden
//! activation. Its input is the concatenation of the noisy frame latent, a
//! sinusoidal timestep embedding, the frame's conditioning vector, and the
//! identity embedding. Both weight matrices carry a low-rank adapter pair
//! `(A, B)` so the effective weight is `W + B*A`; biases stay frozen. During
//! federated training only the adapter factors move, and their gradients are
//! computed without ever materializing a full-weight gradient.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objectives::{clip_loss_with_grad, ClipLossInputs, FrozenProbes, LossBreakdown, LossWeights};
use crate::rng::CounterRng;
use crate::schedule::{forward_diffuse, NoiseSchedule};

/// Sinusoidal encoding of a diffusion step. Values lie in [-1, 1]; the
/// base frequency of 1 keeps the encoding injective over any realistic step
/// range once `dims >= 2`.
pub fn timestep_embedding(t: usize, dims: usize) -> Vec<f64> {
    assert!(dims >= 1, "timestep embedding needs at least one dimension");
    let mut out = Vec::with_capacity(dims);
    for i in 0..dims {
        let pair = (i / 2) as f64;
        let freq = 10_000f64.powf(-2.0 * pair / dims as f64);
        let angle = t as f64 * freq;
        out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    out
}

/// Width settings of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Frame latent width.
    pub latent: usize,
    /// Timestep embedding width.
    pub time: usize,
    /// Conditioning vector width.
    pub cond: usize,
    /// Identity embedding width.
    pub ident: usize,
    /// Hidden layer width.
    pub hidden: usize,
}

impl ModelDims {
    pub fn input_width(&self) -> usize {
        self.latent + self.time + self.cond + self.ident
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent", self.latent),
            ("time", self.time),
            ("cond", self.cond),
            ("ident", self.ident),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidParam(format!("model dim {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Frozen two-layer perceptron applied per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    dims: ModelDims,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl BackboneParams {
    /// Weights drawn once from a seeded Gaussian with 1/sqrt(fan_in) scale.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = CounterRng::derived(seed, "backbone", &[]);
        let n_in = dims.input_width();
        let w1 = Matrix::gaussian(dims.hidden, n_in, 1.0 / (n_in as f64).sqrt(), &mut rng);
        let b1 = (0..dims.hidden).map(|_| 0.1 * rng.normal()).collect();
        let w2 = Matrix::gaussian(dims.latent, dims.hidden, 1.0 / (dims.hidden as f64).sqrt(), &mut rng);
        let b2 = (0..dims.latent).map(|_| 0.1 * rng.normal()).collect();
        Ok(Self { dims, w1, b1, w2, b2 })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    /// Shapes of the two adapted weight matrices, layer order fixed.
    pub fn adapted_shapes(&self) -> [(usize, usize); 2] {
        [(self.dims.hidden, self.dims.input_width()), (self.dims.latent, self.dims.hidden)]
    }

    fn assemble_input(&self, frame: &[f64], temb: &[f64], cond: &[f64], ident: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dims.input_width());
        x.extend_from_slice(frame);
        x.extend_from_slice(temb);
        x.extend_from_slice(cond);
        x.extend_from_slice(ident);
        x
    }
}

/// One low-rank factor pair: the effective weight delta is `B * A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    /// r x d_in.
    pub a: Matrix,
    /// d_out x r.
    pub b: Matrix,
}

impl AdapterLayer {
    /// Materialized `B * A`, for inspection and tests only.
    pub fn delta_weight(&self) -> Matrix {
        let r = self.a.rows();
        let mut out = Matrix::zeros(self.b.rows(), self.a.cols());
        for k in 0..r {
            let col: Vec<f64> = (0..self.b.rows()).map(|i| self.b.get(i, k)).collect();
            out.add_outer(&col, self.a.row(k), 1.0);
        }
        out
    }
}

/// The communicated adapter object: one factor pair per adapted layer.
/// Exactly one client worker owns and mutates a set during local training;
/// the frozen backbone is shared read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    rank: usize,
    layers: Vec<AdapterLayer>,
}

impl AdapterSet {
    /// All-zero factors for the given `(d_out, d_in)` layer shapes.
    pub fn zeros(shapes: &[(usize, usize)], rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidParam("adapter rank must be >= 1".into()));
        }
        let layers = shapes
            .iter()
            .map(|&(d_out, d_in)| AdapterLayer {
                a: Matrix::zeros(rank, d_in),
                b: Matrix::zeros(d_out, rank),
            })
            .collect();
        Ok(Self { rank, layers })
    }

    /// Standard initialization: `A` Gaussian with variance 1/rank, `B` zero,
    /// so the adapted model starts exactly at the backbone.
    pub fn init(backbone: &BackboneParams, rank: usize, seed: u64) -> Result<Self> {
        let mut set = Self::zeros(&backbone.adapted_shapes(), rank)?;
        let mut rng = CounterRng::derived(seed, "adapter-init", &[]);
        let std = 1.0 / (rank as f64).sqrt();
        for layer in &mut set.layers {
            for v in layer.a.data_mut() {
                *v = std * rng.normal();
            }
        }
        Ok(set)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn zeros_like(&self) -> Self {
        let shapes: Vec<(usize, usize)> =
            self.layers.iter().map(|l| (l.b.rows(), l.a.cols())).collect();
        Self::zeros(&shapes, self.rank).expect("rank already validated")
    }

    /// Total number of adapter coordinates.
    pub fn flat_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.b.rows() * l.b.cols() + l.a.rows() * l.a.cols())
            .sum()
    }

    fn matches_backbone(&self, backbone: &BackboneParams) -> bool {
        let shapes = backbone.adapted_shapes();
        self.layers.len() == shapes.len()
            && self
                .layers
                .iter()
                .zip(shapes.iter())
                .all(|(l, &(d_out, d_in))| l.b.rows() == d_out && l.a.cols() == d_in)
    }

    /// In-place `self += scale * other`, used by the local optimizer.
    pub fn axpy(&mut self, scale: f64, other: &AdapterSet) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            for (d, s) in dst.a.data_mut().iter_mut().zip(src.a.data()) {
                *d += scale * s;
            }
            for (d, s) in dst.b.data_mut().iter_mut().zip(src.b.data()) {
                *d += scale * s;
            }
        }
    }
}

/// Serializes adapters into a flat vector. Order is fixed: for each layer in
/// order, `B` row-major then `A` row-major.
pub fn flatten_adapters(adapters: &AdapterSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(adapters.flat_len());
    for layer in &adapters.layers {
        out.extend_from_slice(layer.b.data());
        out.extend_from_slice(layer.a.data());
    }
    out
}

/// Inverse of [`flatten_adapters`] against a shape template.
pub fn unflatten_adapters(flat: &[f64], template: &AdapterSet) -> Result<AdapterSet> {
    if flat.len() != template.flat_len() {
        return Err(Error::LengthMismatch { got: flat.len(), expected: template.flat_len() });
    }
    let mut out = template.zeros_like();
    let mut offset = 0;
    for layer in &mut out.layers {
        let nb = layer.b.data().len();
        layer.b.data_mut().copy_from_slice(&flat[offset..offset + nb]);
        offset += nb;
        let na = layer.a.data().len();
        layer.a.data_mut().copy_from_slice(&flat[offset..offset + na]);
        offset += na;
    }
    Ok(out)
}

/// Per-frame forward cache for backprop.
struct FrameCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    low1: Vec<f64>,
}

fn forward_frame(
    backbone: &BackboneParams,
    adapters: &AdapterSet,
    x: Vec<f64>,
) -> (Vec<f64>, FrameCache) {
    let l1 = &adapters.layers[0];
    let l2 = &adapters.layers[1];
    let low1 = l1.a.matvec(&x);
    let mut pre = backbone.w1.matvec(&x);
    let lifted1 = l1.b.matvec(&low1);
    for ((p, l), bias) in pre.iter_mut().zip(&lifted1).zip(&backbone.b1) {
        *p += l + bias;
    }
    let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
    let low2 = l2.a.matvec(&hidden);
    let mut out = backbone.w2.matvec(&hidden);
    let lifted2 = l2.b.matvec(&low2);
    for ((o, l), bias) in out.iter_mut().zip(&lifted2).zip(&backbone.b2) {
        *o += l + bias;
    }
    (out, FrameCache { x, hidden, low1 })
}

fn check_clip_shapes(
    backbone: &BackboneParams,
    z_t: &[Vec<f64>],
    cond: &[Vec<f64>],
    ident: &[f64],
) -> Result<()> {
    let dims = backbone.dims();
    if z_t.is_empty() {
        return Err(Error::ShapeMismatch("clip has no frames".into()));
    }
    if cond.len() != z_t.len() {
        return Err(Error::ShapeMismatch(format!(
            "conditioning length {} differs from frame count {}",
            cond.len(),
            z_t.len()
        )));
    }
    if z_t.iter().any(|f| f.len() != dims.latent) {
        return Err(Error::ShapeMismatch(format!("frame width must be {}", dims.latent)));
    }
    if cond.iter().any(|c| c.len() != dims.cond) {
        return Err(Error::ShapeMismatch(format!("conditioning width must be {}", dims.cond)));
    }
    if ident.len() != dims.ident {
        return Err(Error::ShapeMismatch(format!(
            "identity embedding width {} must be {}",
            ident.len(),
            dims.ident
        )));
    }
    Ok(())
}

/// Predicted noise for a noisy clip under the adapted model, frame by frame.
pub fn predict_noise(
    backbone: &BackboneParams,
    adapters: &AdapterSet,
    z_t: &[Vec<f64>],
    t: usize,
    cond: &[Vec<f64>],
    ident: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_clip_shapes(backbone, z_t, cond, ident)?;
    if !adapters.matches_backbone(backbone) {
        return Err(Error::ShapeMismatch("adapters do not match backbone".into()));
    }
    let temb = timestep_embedding(t, backbone.dims.time);
    let mut out = Vec::with_capacity(z_t.len());
    for (frame, c) in z_t.iter().zip(cond) {
        let x = backbone.assemble_input(frame, &temb, c, ident);
        out.push(forward_frame(backbone, adapters, x).0);
    }
    Ok(out)
}

/// One element of a training batch: a clean clip with its identity
/// embedding plus the drawn step and noise tensor shared by all frames.
pub struct TrainItem<'a> {
    pub frames: &'a [Vec<f64>],
    pub cond: &'a [Vec<f64>],
    pub ref_embedding: &'a [f64],
    pub t: usize,
    pub noise: &'a [Vec<f64>],
}

/// Exact gradients of the weighted client objective with respect to the
/// adapter factors only, averaged over the batch, together with the mean
/// unweighted loss breakdown. Backbone gradients are never formed.
pub fn adapter_gradients(
    backbone: &BackboneParams,
    adapters: &AdapterSet,
    batch: &[TrainItem<'_>],
    schedule: &NoiseSchedule,
    probes: &FrozenProbes,
    weights: &LossWeights,
) -> Result<(AdapterSet, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !adapters.matches_backbone(backbone) {
        return Err(Error::ShapeMismatch("adapters do not match backbone".into()));
    }
    let l1 = &adapters.layers[0];
    let l2 = &adapters.layers[1];
    let mut grads = adapters.zeros_like();
    let mut totals = LossBreakdown::default();
    let inv_batch = 1.0 / batch.len() as f64;

    for item in batch {
        check_clip_shapes(backbone, item.frames, item.cond, item.ref_embedding)?;
        let z_t = forward_diffuse(schedule, item.frames, item.t, item.noise)?;
        let temb = timestep_embedding(item.t, backbone.dims.time);

        let mut caches = Vec::with_capacity(z_t.len());
        let mut predicted = Vec::with_capacity(z_t.len());
        for (frame, c) in z_t.iter().zip(item.cond) {
            let x = backbone.assemble_input(frame, &temb, c, item.ref_embedding);
            let (out, cache) = forward_frame(backbone, adapters, x);
            predicted.push(out);
            caches.push(cache);
        }

        let inputs = ClipLossInputs {
            true_noise: item.noise,
            predicted: &predicted,
            z_t: &z_t,
            alpha_bar: schedule.alpha_bar(item.t),
            target_frames: item.frames,
            cond: item.cond,
            ref_embedding: item.ref_embedding,
        };
        let (parts, grad_pred) = clip_loss_with_grad(&inputs, probes, weights)?;
        totals.diffusion += parts.diffusion * inv_batch;
        totals.tdc += parts.tdc * inv_batch;
        totals.identity += parts.identity * inv_batch;
        totals.perceptual += parts.perceptual * inv_batch;
        totals.sync += parts.sync * inv_batch;

        for (cache, delta_out) in caches.iter().zip(&grad_pred) {
            // Layer 2 factors: gB2 += d (A2 h)^T, gA2 += (B2^T d) h^T.
            let low2 = l2.a.matvec(&cache.hidden);
            let back2 = l2.b.matvec_t(delta_out);
            grads.layers[1].b.add_outer(delta_out, &low2, inv_batch);
            grads.layers[1].a.add_outer(&back2, &cache.hidden, inv_batch);

            // Into the hidden layer through the effective W2' = W2 + B2 A2.
            let mut delta_hidden = backbone.w2.matvec_t(delta_out);
            let lifted = l2.a.matvec_t(&back2);
            for (dh, l) in delta_hidden.iter_mut().zip(&lifted) {
                *dh += l;
            }
            for (dh, h) in delta_hidden.iter_mut().zip(&cache.hidden) {
                *dh *= 1.0 - h * h;
            }

            // Layer 1 factors.
            let back1 = l1.b.matvec_t(&delta_hidden);
            grads.layers[0].b.add_outer(&delta_hidden, &cache.low1, inv_batch);
            grads.layers[0].a.add_outer(&back1, &cache.x, inv_batch);
        }
    }
    Ok((grads, totals))
}

/// Gradients of the plain diffusion loss with respect to every backbone
/// parameter, used only by central pretraining (no adapters involved).
pub struct BackboneGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Backbone-only forward pass (no adapter terms at all).
pub fn forward_backbone(
    backbone: &BackboneParams,
    z_t: &[Vec<f64>],
    t: usize,
    cond: &[Vec<f64>],
    ident: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_clip_shapes(backbone, z_t, cond, ident)?;
    let temb = timestep_embedding(t, backbone.dims.time);
    let mut out = Vec::with_capacity(z_t.len());
    for (frame, c) in z_t.iter().zip(cond) {
        let x = backbone.assemble_input(frame, &temb, c, ident);
        let mut pre = backbone.w1.matvec(&x);
        for (p, bias) in pre.iter_mut().zip(&backbone.b1) {
            *p += bias;
        }
        let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let mut o = backbone.w2.matvec(&hidden);
        for (v, bias) in o.iter_mut().zip(&backbone.b2) {
            *v += bias;
        }
        out.push(o);
    }
    Ok(out)
}

/// Mean diffusion loss over the batch and its backbone gradients.
pub fn backbone_diffusion_gradients(
    backbone: &BackboneParams,
    batch: &[TrainItem<'_>],
    schedule: &NoiseSchedule,
) -> Result<(BackboneGrads, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dims = backbone.dims;
    let mut grads = BackboneGrads {
        w1: Matrix::zeros(dims.hidden, dims.input_width()),
        b1: vec![0.0; dims.hidden],
        w2: Matrix::zeros(dims.latent, dims.hidden),
        b2: vec![0.0; dims.latent],
    };
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;
    for item in batch {
        check_clip_shapes(backbone, item.frames, item.cond, item.ref_embedding)?;
        let z_t = forward_diffuse(schedule, item.frames, item.t, item.noise)?;
        let temb = timestep_embedding(item.t, dims.time);
        let n = (item.frames.len() * dims.latent) as f64;
        for ((frame, c), noise) in z_t.iter().zip(item.cond).zip(item.noise) {
            let x = backbone.assemble_input(frame, &temb, c, item.ref_embedding);
            let mut pre = backbone.w1.matvec(&x);
            for (p, bias) in pre.iter_mut().zip(&backbone.b1) {
                *p += bias;
            }
            let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
            let mut out = backbone.w2.matvec(&hidden);
            for (v, bias) in out.iter_mut().zip(&backbone.b2) {
                *v += bias;
            }
            let delta_out: Vec<f64> = out
                .iter()
                .zip(noise)
                .map(|(o, eps)| {
                    let d = o - eps;
                    loss += d * d / n * inv_batch;
                    2.0 * d / n * inv_batch
                })
                .collect();
            grads.w2.add_outer(&delta_out, &hidden, 1.0);
            for (g, d) in grads.b2.iter_mut().zip(&delta_out) {
                *g += d;
            }
            let mut delta_hidden = backbone.w2.matvec_t(&delta_out);
            for (dh, h) in delta_hidden.iter_mut().zip(&hidden) {
                *dh *= 1.0 - h * h;
            }
            grads.w1.add_outer(&delta_hidden, &x, 1.0);
            for (g, d) in grads.b1.iter_mut().zip(&delta_hidden) {
                *g += d;
            }
        }
    }
    Ok((grads, loss))
}

/// One gradient-descent step on the backbone, used by central pretraining.
pub fn apply_backbone_step(backbone: &mut BackboneParams, grads: &BackboneGrads, lr: f64) {
    for (w, g) in backbone.w1.data_mut().iter_mut().zip(grads.w1.data()) {
        *w -= lr * g;
    }
    for (b, g) in backbone.b1.iter_mut().zip(&grads.b1) {
        *b -= lr * g;
    }
    for (w, g) in backbone.w2.data_mut().iter_mut().zip(grads.w2.data()) {
        *w -= lr * g;
    }
    for (b, g) in backbone.b2.iter_mut().zip(&grads.b2) {
        *b -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::schedule::build_linear_schedule;

    fn small_dims() -> ModelDims {
        ModelDims { latent: 3, time: 4, cond: 2, ident: 3, hidden: 5 }
    }

    fn random_clip(rng: &mut CounterRng, frames: usize, dims: &ModelDims) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let z: Vec<Vec<f64>> = (0..frames).map(|_| rng.normal_vec(dims.latent)).collect();
        let cond: Vec<Vec<f64>> = (0..frames).map(|_| rng.normal_vec(dims.cond)).collect();
        let ident = linalg::normalized(&rng.normal_vec(dims.ident)).unwrap();
        (z, cond, ident)
    }

    #[test]
    fn timestep_embedding_bounds_and_injectivity() {
        for t in 0..200 {
            for v in timestep_embedding(t, 8) {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        let embs: Vec<Vec<f64>> = (0..200).map(|t| timestep_embedding(t, 2)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i], embs[j], "embedding collision at {i},{j}");
            }
        }
    }

    #[test]
    fn zero_b_adapters_match_backbone_bit_for_bit() {
        let dims = small_dims();
        let backbone = BackboneParams::init(dims, 12).unwrap();
        let adapters = AdapterSet::init(&backbone, 2, 13).unwrap();
        let mut rng = CounterRng::new(99);
        for t in [0usize, 3, 7] {
            let (z, cond, ident) = random_clip(&mut rng, 4, &dims);
            let adapted = predict_noise(&backbone, &adapters, &z, t, &cond, &ident).unwrap();
            let bare = forward_backbone(&backbone, &z, t, &cond, &ident).unwrap();
            for (af, bf) in adapted.iter().zip(&bare) {
                for (a, b) in af.iter().zip(bf) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn delta_weight_is_the_outer_product() {
        let mut set = AdapterSet::zeros(&[(2, 2)], 1).unwrap();
        set.layers[0].a.data_mut().copy_from_slice(&[1.0, 2.0]);
        set.layers[0].b.data_mut().copy_from_slice(&[3.0, 4.0]);
        let d = set.layers[0].delta_weight();
        assert_eq!(d.row(0), &[3.0, 6.0]);
        assert_eq!(d.row(1), &[4.0, 8.0]);
    }

    #[test]
    fn scaling_b_scales_delta_weight_linearly() {
        let backbone = BackboneParams::init(small_dims(), 5).unwrap();
        let mut adapters = AdapterSet::init(&backbone, 3, 6).unwrap();
        let mut rng = CounterRng::new(1);
        for layer in 0..2 {
            for v in adapters.layers[layer].b.data_mut() {
                *v = rng.normal();
            }
        }
        let base = adapters.layers[0].delta_weight();
        let mut doubled = adapters.clone();
        for v in doubled.layers[0].b.data_mut() {
            *v *= 2.0;
        }
        let two = doubled.layers[0].delta_weight();
        for (a, b) in base.data().iter().zip(two.data()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn flatten_roundtrip_and_lengths() {
        let single = AdapterSet::zeros(&[(2, 2)], 1).unwrap();
        assert_eq!(single.flat_len(), 4);
        assert_eq!(flatten_adapters(&single), vec![0.0; 4]);

        let backbone = BackboneParams::init(small_dims(), 3).unwrap();
        let mut adapters = AdapterSet::init(&backbone, 2, 4).unwrap();
        let mut rng = CounterRng::new(8);
        for layer in &mut adapters.layers {
            for v in layer.b.data_mut() {
                *v = rng.normal();
            }
        }
        let flat = flatten_adapters(&adapters);
        let back = unflatten_adapters(&flat, &adapters).unwrap();
        assert_eq!(adapters, back);
        assert!(unflatten_adapters(&flat[1..], &adapters).is_err());
    }

    #[test]
    fn rank_zero_rejected() {
        assert!(AdapterSet::zeros(&[(2, 2)], 0).is_err());
    }

    /// With every lambda at zero and predicted noise equal to the true
    /// noise, the objective sits at the MSE minimum: loss 0, gradient 0.
    #[test]
    fn perfect_prediction_gives_zero_loss_and_zero_gradients() {
        let dims = small_dims();
        let schedule = build_linear_schedule(6, 0.05, 0.3).unwrap();
        let mut rng = CounterRng::new(23);
        let (frames, cond, ident) = random_clip(&mut rng, 3, &dims);
        let t = 2;
        let weights = LossWeights { lambda_tdc: 0.0, lambda_id: 0.0, lambda_perc: 0.0, lambda_sync: 0.0 };
        let noise: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(dims.latent)).collect();
        let z_t = forward_diffuse(&schedule, &frames, t, &noise).unwrap();
        let inputs = ClipLossInputs {
            true_noise: &noise,
            predicted: &noise,
            z_t: &z_t,
            alpha_bar: schedule.alpha_bar(t),
            target_frames: &frames,
            cond: &cond,
            ref_embedding: &ident,
        };
        let (parts, grad) = clip_loss_with_grad(&inputs, &probes(), &weights).unwrap();
        assert_eq!(parts.diffusion, 0.0);
        assert_eq!(parts.tdc, 0.0);
        assert_eq!(crate::objectives::combined_loss(&parts, &weights).unwrap(), 0.0);
        for f in grad {
            for g in f {
                assert_eq!(g, 0.0);
            }
        }
    }

    fn probes() -> FrozenProbes {
        FrozenProbes::from_seed(55, 3, 3, 4)
    }

    #[test]
    fn gradients_are_deterministic() {
        let dims = small_dims();
        let backbone = BackboneParams::init(dims, 31).unwrap();
        let adapters = AdapterSet::init(&backbone, 2, 32).unwrap();
        let schedule = build_linear_schedule(5, 0.05, 0.3).unwrap();
        let weights = LossWeights::default();
        let run = || {
            let mut rng = CounterRng::new(33);
            let (frames, cond, ident) = random_clip(&mut rng, 3, &dims);
            let noise: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(dims.latent)).collect();
            let item = TrainItem { frames: &frames, cond: &cond, ref_embedding: &ident, t: 1, noise: &noise };
            let (g, parts) =
                adapter_gradients(&backbone, &adapters, &[item], &schedule, &probes(), &weights).unwrap();
            (flatten_adapters(&g), parts)
        };
        let (g1, p1) = run();
        let (g2, p2) = run();
        assert_eq!(p1, p2);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Directional-derivative oracle at rank 1: a single-coordinate
    /// perturbation of A must satisfy loss(A+d) - loss(A-d) ~ 2 d g.
    #[test]
    fn directional_derivative_matches_at_rank_one() {
        let dims = small_dims();
        let backbone = BackboneParams::init(dims, 41).unwrap();
        let mut adapters = AdapterSet::init(&backbone, 1, 42).unwrap();
        let mut rng = CounterRng::new(43);
        for layer in &mut adapters.layers {
            for v in layer.b.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
        let schedule = build_linear_schedule(5, 0.05, 0.3).unwrap();
        let weights = LossWeights::default();
        let probes = probes();
        let (frames, cond, ident) = random_clip(&mut rng, 3, &dims);
        let noise: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(dims.latent)).collect();
        let loss_of = |set: &AdapterSet| {
            let item = TrainItem { frames: &frames, cond: &cond, ref_embedding: &ident, t: 2, noise: &noise };
            let (_, parts) =
                adapter_gradients(&backbone, set, &[item], &schedule, &probes, &weights).unwrap();
            crate::objectives::combined_loss(&parts, &weights).unwrap()
        };
        let item = TrainItem { frames: &frames, cond: &cond, ref_embedding: &ident, t: 2, noise: &noise };
        let (grads, _) =
            adapter_gradients(&backbone, &adapters, &[item], &schedule, &probes, &weights).unwrap();
        let delta = 1e-6;
        let gradient = grads.layers[0].a.get(0, 1);
        let mut plus = adapters.clone();
        let v = plus.layers[0].a.get(0, 1);
        plus.layers[0].a.set(0, 1, v + delta);
        let mut minus = adapters.clone();
        minus.layers[0].a.set(0, 1, v - delta);
        let lhs = loss_of(&plus) - loss_of(&minus);
        assert!((lhs - 2.0 * delta * gradient).abs() < 1e-6, "{lhs} vs {}", 2.0 * delta * gradient);
    }

    #[test]
    fn backbone_pretraining_reduces_diffusion_loss() {
        let dims = small_dims();
        let mut backbone = BackboneParams::init(dims, 51).unwrap();
        let schedule = build_linear_schedule(6, 0.05, 0.3).unwrap();
        let mut rng = CounterRng::new(52);
        let (frames, cond, ident) = random_clip(&mut rng, 4, &dims);
        let noise: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(dims.latent)).collect();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let item = TrainItem { frames: &frames, cond: &cond, ref_embedding: &ident, t: 3, noise: &noise };
            let (grads, loss) = backbone_diffusion_gradients(&backbone, &[item], &schedule).unwrap();
            apply_backbone_step(&mut backbone, &grads, 0.2);
            first.get_or_insert(loss);
            last = loss;
        }
        assert!(last < 0.5 * first.unwrap(), "pretraining did not reduce loss: {first:?} -> {last}");
    }

    #[test]
    fn empty_batch_rejected() {
        let backbone = BackboneParams::init(small_dims(), 61).unwrap();
        let adapters = AdapterSet::init(&backbone, 2, 62).unwrap();
        let schedule = build_linear_schedule(4, 0.1, 0.2).unwrap();
        let r = adapter_gradients(&backbone, &adapters, &[], &schedule, &probes(), &LossWeights::default());
        assert!(matches!(r, Err(Error::EmptyBatch)));
    }
}
