//! Classification-encoding training and change/no-change partitioning.
//!
//! Each Gaussian carries a 16-d encoding that is composited exactly like
//! color. A 1×1 convolution (a per-pixel affine map 16 → 2) turns the
//! composited feature into unchanged/changed logits. With geometry frozen,
//! a pixel's feature is `Σ_i w_i e_i` with fixed weights `w_i`, so the loss
//! gradients with respect to the encodings follow directly from the
//! per-pixel weights recorded by the renderer.
//!
//! Training loss:
//!
//! ```text
//! L = L1 + tv_weight · LTV + λ2d · L2d + λ3d · L3d
//! ```
//!
//! `L1` and `LTV` only depend on the frozen color rendering; they are
//! reported for completeness and contribute no gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::knn_all;
use crate::maps::{ColorImage, Grid, Mask};
use crate::math::{log_softmax, softmax};
use crate::rasterizer::{render_view, render_view_with, Camera, CompositeOptions, PixelWeights};
use crate::scene::{deform, Encoding, GaussianCloud, PartitionLabel, TimeStamp, ENCODING_DIM};

pub const UNCHANGED: usize = 0;
pub const CHANGED: usize = 1;
const LOG_FLOOR: f64 = 1e-12;

/// 1×1 convolution from a 16-d feature to (unchanged, changed) logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeHead {
    pub weights: [[f64; ENCODING_DIM]; 2],
    pub bias: [f64; 2],
}

impl Default for ChangeHead {
    fn default() -> Self {
        ChangeHead::zeros()
    }
}

impl ChangeHead {
    pub fn zeros() -> Self {
        ChangeHead {
            weights: [[0.0; ENCODING_DIM]; 2],
            bias: [0.0; 2],
        }
    }

    pub fn logits(&self, f: &Encoding) -> [f64; 2] {
        std::array::from_fn(|c| {
            self.bias[c] + self.weights[c].iter().zip(f).map(|(w, x)| w * x).sum::<f64>()
        })
    }

    /// Probability of the changed class for a single encoding.
    pub fn p_changed(&self, e: &Encoding) -> f64 {
        softmax(self.logits(e))[CHANGED]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().chain(&self.bias).all(|v| v.is_finite())
    }
}

pub type Logits = Grid<[f64; 2]>;

pub fn change_logits(features: &Grid<Encoding>, head: &ChangeHead) -> Logits {
    features.map(|f| head.logits(f))
}

/// Strictly-greater argmax: ties go to unchanged.
pub fn change_map(logits: &Logits) -> Mask {
    logits.map(|z| z[CHANGED] > z[UNCHANGED])
}

fn pixel_ce(z: [f64; 2], label: usize) -> f64 {
    -softmax(z)[label].max(LOG_FLOOR).ln()
}

/// Mean two-class cross-entropy against the mask (true = changed).
pub fn loss_2d(logits: &Logits, mask: &Mask) -> Result<f64> {
    logits.ensure_same_dims(mask, "logits vs change mask")?;
    if mask.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&z, &m)| pixel_ce(z, usize::from(m)))
        .sum();
    Ok(sum / mask.len() as f64)
}

/// Mean absolute color error.
pub fn loss_l1(rendered: &ColorImage, target: &ColorImage) -> Result<f64> {
    rendered.ensure_same_dims(target, "rendered vs target image")?;
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .sum();
    Ok(sum / (3 * rendered.len()) as f64)
}

/// Anisotropic total variation: summed |horizontal| + |vertical| neighbour
/// differences over all channels, divided by the number of samples.
pub fn loss_tv(img: &ColorImage) -> f64 {
    if img.is_empty() {
        return 0.0;
    }
    let (w, h) = img.dims();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let c = img.get(x, y);
            if x + 1 < w {
                let r = img.get(x + 1, y);
                sum += (0..3).map(|k| (r[k] - c[k]).abs()).sum::<f64>();
            }
            if y + 1 < h {
                let d = img.get(x, y + 1);
                sum += (0..3).map(|k| (d[k] - c[k]).abs()).sum::<f64>();
            }
        }
    }
    sum / (3 * img.len()) as f64
}

fn kl(p_logits: [f64; 2], q_logits: [f64; 2]) -> f64 {
    let (lp, lq) = (log_softmax(p_logits), log_softmax(q_logits));
    (0..2).map(|c| lp[c].exp() * (lp[c] - lq[c])).sum()
}

/// Neighbour lists at before-epoch positions.
pub fn neighborhoods(cloud: &GaussianCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    let positions: Vec<_> = deform(cloud, TimeStamp::Before)?
        .gaussians
        .iter()
        .map(|g| g.position)
        .collect();
    knn_all(&positions, k)
}

/// `m` distinct Gaussian indices in ascending order; all of them when `m >= n`.
pub fn sample_gaussians(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut picked = sample(rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Mean KL between each sampled Gaussian's class distribution and each of
/// its neighbours'.
pub fn loss_3d_given(encodings: &[Encoding], head: &ChangeHead, samples: &[usize], neighbors: &[Vec<usize>]) -> f64 {
    let mut sum = 0.0;
    let mut terms = 0usize;
    for &s in samples {
        let zs = head.logits(&encodings[s]);
        for &j in &neighbors[s] {
            sum += kl(zs, head.logits(&encodings[j]));
            terms += 1;
        }
    }
    if terms == 0 {
        0.0
    } else {
        sum / terms as f64
    }
}

/// Spatial-consistency loss with the samples drawn from `cfg.rng_seed`.
pub fn loss_3d(cloud: &GaussianCloud, head: &ChangeHead, cfg: &TrainConfig) -> Result<f64> {
    let neighbors = neighborhoods(cloud, cfg.k_neighbors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let samples = sample_gaussians(cloud.len(), cfg.m_samples, &mut rng);
    Ok(loss_3d_given(&cloud.encodings(), head, &samples, &neighbors))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub k_neighbors: usize,
    /// Gaussians sampled per iteration for the 3D loss (capped at cloud size).
    pub m_samples: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub tv_weight: f64,
    pub rng_seed: u64,
    pub optimizer: Optimizer,
    /// Std of the initial encodings.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_2d: 1.0,
            lambda_3d: 0.1,
            k_neighbors: 5,
            m_samples: 1000,
            learning_rate: 0.05,
            iterations: 500,
            tv_weight: 1.0,
            rng_seed: 0,
            optimizer: Optimizer::GradientDescent,
            init_std: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.k_neighbors == 0 {
            problems.push("k_neighbors must be >= 1".to_string());
        }
        if self.m_samples == 0 {
            problems.push("m_samples must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, v) in [
            ("lambda_2d", self.lambda_2d),
            ("lambda_3d", self.lambda_3d),
            ("tv_weight", self.tv_weight),
            ("init_std", self.init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// One supervised view: where it was captured, the captured image and its
/// detected change mask.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub camera: Camera,
    pub epoch: TimeStamp,
    pub target: ColorImage,
    pub mask: Mask,
}

/// A training view rendered once with frozen geometry.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub weights: PixelWeights,
    pub mask: Mask,
    pub l1: f64,
    pub tv: f64,
}

/// Renders every view once and records its per-pixel compositing weights.
pub fn prepare_views(cloud: &GaussianCloud, views: &[TrainingView]) -> Result<Vec<PreparedView>> {
    let opts = CompositeOptions {
        early_termination: true,
        record_weights: true,
    };
    views
        .iter()
        .map(|v| {
            let (bundle, weights) = render_view_with(cloud, v.epoch, &v.camera, opts)?;
            bundle.color.ensure_same_dims(&v.mask, "training view vs its change mask")?;
            Ok(PreparedView {
                weights: weights.expect("weights requested"),
                mask: v.mask.clone(),
                l1: loss_l1(&bundle.color, &v.target)?,
                tv: loss_tv(&bundle.color),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub tv: f64,
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encodings: Vec<Encoding>,
    pub head: ChangeHead,
}

impl Gradients {
    fn zeros(n: usize) -> Self {
        Gradients {
            encodings: vec![[0.0; ENCODING_DIM]; n],
            head: ChangeHead::zeros(),
        }
    }

    fn add_scaled(&mut self, o: &Gradients, s: f64) {
        for (a, b) in self.encodings.iter_mut().zip(&o.encodings) {
            for k in 0..ENCODING_DIM {
                a[k] += s * b[k];
            }
        }
        for c in 0..2 {
            for k in 0..ENCODING_DIM {
                self.head.weights[c][k] += s * o.head.weights[c][k];
            }
            self.head.bias[c] += s * o.head.bias[c];
        }
    }
}

/// Per-Gaussian head projections `[h_0 · e_i, h_1 · e_i]`. Since both the
/// compositing and the head are linear, a pixel's logits are the bias plus
/// the weight-averaged projections of the Gaussians covering it.
fn projections(encodings: &[Encoding], head: &ChangeHead) -> Vec<[f64; 2]> {
    encodings
        .iter()
        .map(|e| std::array::from_fn(|c| head.weights[c].iter().zip(e).map(|(w, x)| w * x).sum()))
        .collect()
}

/// Cross-entropy of one view (mean over pixels) and its gradient with respect
/// to the projections and the bias.
fn view_loss_2d(view: &PreparedView, proj: &[[f64; 2]], bias: [f64; 2]) -> (f64, Vec<[f64; 2]>, [f64; 2]) {
    let mut d_proj = vec![[0.0; 2]; proj.len()];
    let mut d_bias = [0.0; 2];
    let n = view.weights.pixel_count();
    if n == 0 {
        return (0.0, d_proj, d_bias);
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for p in 0..n {
        let entries = view.weights.pixel(p);
        let mut z = bias;
        for &(i, w) in entries {
            let s = proj[i as usize];
            z[0] += w * s[0];
            z[1] += w * s[1];
        }
        let label = usize::from(view.mask.data[p]);
        let prob = softmax(z);
        loss += -prob[label].max(LOG_FLOOR).ln();
        if prob[label] < LOG_FLOOR {
            continue;
        }
        let g: [f64; 2] = std::array::from_fn(|c| (prob[c] - f64::from(u8::from(c == label))) * inv_n);
        d_bias[0] += g[0];
        d_bias[1] += g[1];
        for &(i, w) in entries {
            let d = &mut d_proj[i as usize];
            d[0] += w * g[0];
            d[1] += w * g[1];
        }
    }
    (loss * inv_n, d_proj, d_bias)
}

fn loss_3d_with_grad(encodings: &[Encoding], head: &ChangeHead, samples: &[usize], neighbors: &[Vec<usize>]) -> (f64, Gradients) {
    let mut grads = Gradients::zeros(encodings.len());
    let terms: usize = samples.iter().map(|&s| neighbors[s].len()).sum();
    if terms == 0 {
        return (0.0, grads);
    }
    let scale = 1.0 / terms as f64;
    let mut loss = 0.0;
    let backprop = |grads: &mut Gradients, idx: usize, dz: [f64; 2]| {
        let e = encodings[idx];
        for c in 0..2 {
            grads.head.bias[c] += dz[c];
            for k in 0..ENCODING_DIM {
                grads.head.weights[c][k] += dz[c] * e[k];
                grads.encodings[idx][k] += dz[c] * head.weights[c][k];
            }
        }
    };
    for &s in samples {
        let zs = head.logits(&encodings[s]);
        let lp = log_softmax(zs);
        let p = lp.map(f64::exp);
        for &j in &neighbors[s] {
            let lq = log_softmax(head.logits(&encodings[j]));
            let q = lq.map(f64::exp);
            let r = [lp[0] - lq[0], lp[1] - lq[1]];
            let d = p[0] * r[0] + p[1] * r[1];
            loss += d;
            // ∂KL/∂z_p = p ⊙ (r - KL), ∂KL/∂z_q = q - p
            let dzs = [scale * p[0] * (r[0] - d), scale * p[1] * (r[1] - d)];
            let dzj = [scale * (q[0] - p[0]), scale * (q[1] - p[1])];
            backprop(&mut grads, s, dzs);
            backprop(&mut grads, j, dzj);
        }
    }
    (loss * scale, grads)
}

/// Everything the loss needs besides the trainable parameters.
pub struct LossContext<'a> {
    pub views: &'a [PreparedView],
    pub neighbors: &'a [Vec<usize>],
    pub samples: &'a [usize],
    pub cfg: &'a TrainConfig,
}

/// Total loss and its analytic gradient with respect to every encoding and
/// every head parameter. Per-view terms are reduced in view order.
pub fn total_loss(ctx: &LossContext<'_>, encodings: &[Encoding], head: &ChangeHead) -> (LossBreakdown, Gradients) {
    let cfg = ctx.cfg;
    let mut grads = Gradients::zeros(encodings.len());
    let nv = ctx.views.len().max(1) as f64;
    let proj = projections(encodings, head);
    let per_view: Vec<_> = ctx
        .views
        .par_iter()
        .map(|v| view_loss_2d(v, &proj, head.bias))
        .collect();
    let mut l2d = 0.0;
    let s = cfg.lambda_2d / nv;
    for (l, d_proj, d_bias) in &per_view {
        l2d += l / nv;
        for c in 0..2 {
            grads.head.bias[c] += s * d_bias[c];
        }
        for (i, d) in d_proj.iter().enumerate() {
            for c in 0..2 {
                if d[c] == 0.0 {
                    continue;
                }
                for k in 0..ENCODING_DIM {
                    grads.encodings[i][k] += s * d[c] * head.weights[c][k];
                    grads.head.weights[c][k] += s * d[c] * encodings[i][k];
                }
            }
        }
    }
    let l1 = ctx.views.iter().map(|v| v.l1).sum::<f64>() / nv;
    let tv = ctx.views.iter().map(|v| v.tv).sum::<f64>() / nv;
    let l3d = if cfg.lambda_3d > 0.0 || !ctx.samples.is_empty() {
        let (l, g) = loss_3d_with_grad(encodings, head, ctx.samples, ctx.neighbors);
        grads.add_scaled(&g, cfg.lambda_3d);
        l
    } else {
        0.0
    };
    let total = l1 + cfg.tv_weight * tv + cfg.lambda_2d * l2d + cfg.lambda_3d * l3d;
    (LossBreakdown { l1, tv, l2d, l3d, total }, grads)
}

/// Trainable parameters flattened: encodings, then head weights, then bias.
fn flatten(encodings: &[Encoding], head: &ChangeHead) -> Vec<f64> {
    let mut out: Vec<f64> = encodings.iter().flatten().copied().collect();
    out.extend(head.weights.iter().flatten());
    out.extend(head.bias);
    out
}

fn unflatten(params: &[f64], n: usize) -> (Vec<Encoding>, ChangeHead) {
    let enc = (0..n)
        .map(|i| std::array::from_fn(|k| params[i * ENCODING_DIM + k]))
        .collect();
    let base = n * ENCODING_DIM;
    let head = ChangeHead {
        weights: std::array::from_fn(|c| std::array::from_fn(|k| params[base + c * ENCODING_DIM + k])),
        bias: [params[base + 2 * ENCODING_DIM], params[base + 2 * ENCODING_DIM + 1]],
    };
    (enc, head)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-15;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Input cloud with learned encodings and the head attached.
    pub cloud: GaussianCloud,
    pub head: ChangeHead,
    /// Loss before every step, plus the loss after the last one.
    pub curve: Vec<LossBreakdown>,
}

/// Fits encodings and head to the views' change masks. Geometry, color and
/// opacity are never touched.
pub fn train(cloud: &GaussianCloud, views: &[TrainingView], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    cloud.validate()?;
    let n = cloud.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let init = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Validation(e.to_string()))?;
    let encodings: Vec<Encoding> = (0..n)
        .map(|_| std::array::from_fn(|_| init.sample(&mut rng)))
        .collect();
    let head = ChangeHead::zeros();
    let prepared = prepare_views(cloud, views)?;
    let neighbors = if cfg.lambda_3d > 0.0 {
        neighborhoods(cloud, cfg.k_neighbors)?
    } else {
        vec![Vec::new(); n]
    };

    let mut params = flatten(&encodings, &head);
    let mut adam = Adam::new(params.len());
    let mut curve = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let samples = if cfg.lambda_3d > 0.0 {
            sample_gaussians(n, cfg.m_samples, &mut rng)
        } else {
            Vec::new()
        };
        let ctx = LossContext {
            views: &prepared,
            neighbors: &neighbors,
            samples: &samples,
            cfg,
        };
        let (enc, head) = unflatten(&params, n);
        let (loss, grads) = total_loss(&ctx, &enc, &head);
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss {loss:?}"),
            });
        }
        curve.push(loss);
        if it == cfg.iterations {
            break;
        }
        let g = flatten(&grads.encodings, &grads.head);
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                for (p, gi) in params.iter_mut().zip(&g) {
                    *p -= cfg.learning_rate * gi;
                }
            }
            Optimizer::Adam => adam.step(&mut params, &g, cfg.learning_rate),
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: "non-finite parameter after update".into(),
            });
        }
        if it % 100 == 0 {
            log::debug!("iter {it}: total {:.5} l2d {:.5} l3d {:.5}", loss.total, loss.l2d, loss.l3d);
        }
    }
    let (enc, head) = unflatten(&params, n);
    let mut out = cloud.clone();
    out.set_encodings(&enc);
    out.head = Some(head.clone());
    Ok(TrainOutcome {
        cloud: out,
        head,
        curve,
    })
}

/// Labels Gaussian `i` changed iff `p_changed(e_i) > tau`.
pub fn partition_cloud(cloud: &GaussianCloud, head: &ChangeHead, tau: f64) -> GaussianCloud {
    let mut out = cloud.clone();
    out.partition = cloud
        .gaussians
        .iter()
        .map(|g| {
            if head.p_changed(&g.class_encoding) > tau {
                PartitionLabel::Changed
            } else {
                PartitionLabel::Unchanged
            }
        })
        .collect();
    out.head = Some(head.clone());
    out
}

/// Renders the feature map at `(t, cam)` and classifies every pixel.
pub fn render_change_map(cloud: &GaussianCloud, head: &ChangeHead, t: TimeStamp, cam: &Camera) -> Result<Mask> {
    let bundle = render_view(cloud, t, cam)?;
    Ok(change_map(&change_logits(&bundle.features, head)))
}
