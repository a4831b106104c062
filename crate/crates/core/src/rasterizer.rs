//! CPU splatting renderer.
//!
//! Every Gaussian is projected to a 2D Gaussian footprint, the footprints are
//! sorted globally by view depth, and each pixel composites them front to
//! back. Besides color the renderer produces alpha, depth, the dominant
//! instance per pixel and the 16-channel classification feature map, which
//! is composited with exactly the same weights as color.
//!
//! Rows are rendered in parallel on the current rayon pool. Each pixel only
//! reads the shared splat list, so output does not depend on thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::FeatureMap;
use crate::maps::{ColorImage, Grid, IdMap};
use crate::math::{mat_mul, transpose, Mat3};
use crate::pose_interp::Pose;
use crate::scene::{deform, Encoding, GaussianCloud, TimeStamp, ENCODING_DIM};

/// Isotropic variance added to every projected footprint, px².
pub const COV2D_FLOOR: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Per-splat alphas below this are skipped.
pub const MIN_ALPHA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: 0.1,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.width == 0 || self.height == 0 {
            problems.push(format!("image size {}x{} is empty", self.width, self.height));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            problems.push(format!("focal lengths ({}, {}) must be positive", self.fx, self.fy));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            problems.push(format!("need 0 < near < far, got near {} far {}", self.near, self.far));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            problems.push("principal point is not finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl Camera {
    pub fn new(pose: Pose, intrinsics: Intrinsics) -> Self {
        Camera { pose, intrinsics }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// One projected Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub index: usize,
    /// Continuous pixel coordinates; pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
    pub mean: [f64; 2],
    /// Symmetric 2D covariance `[xx, xy, yy]`, floor included.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    /// Inclusive pixel range `[x0, y0, x1, y1]` outside which alpha < MIN_ALPHA;
    /// `x0 > x1` when no pixel is reachable.
    pub bbox: [i64; 4],
}

impl Splat {
    /// Clamped alpha at a continuous pixel position.
    pub fn alpha_at(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let power = -0.5 * (self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy);
        (self.opacity * power.exp()).min(MAX_ALPHA)
    }

    fn covers(&self, x: i64, y: i64) -> bool {
        x >= self.bbox[0] && x <= self.bbox[2] && y >= self.bbox[1] && y <= self.bbox[3]
    }
}

/// Splats sorted by ascending depth, ties broken by Gaussian index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatList {
    pub splats: Vec<Splat>,
}

impl SplatList {
    pub fn from_unsorted(mut splats: Vec<Splat>) -> Self {
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        SplatList { splats }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

/// Projected covariance `J W Σ Wᵀ Jᵀ` for a camera-space position, without the floor.
pub fn project_covariance(cam_pos: [f64; 3], world_cov: &Mat3, view: &Mat3, fx: f64, fy: f64) -> [f64; 3] {
    let [x, y, z] = cam_pos;
    let cov_cam = mat_mul(&mat_mul(view, world_cov), &transpose(view));
    let j = [
        [fx / z, 0.0, -fx * x / (z * z)],
        [0.0, fy / z, -fy * y / (z * z)],
    ];
    let mut out = [0.0; 3];
    for (slot, (r, c)) in [(0usize, 0usize), (0, 1), (1, 1)].into_iter().enumerate() {
        let mut acc = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                acc += j[r][a] * cov_cam[a][b] * j[c][b];
            }
        }
        out[slot] = acc;
    }
    out
}

/// World covariance `R diag(s²) Rᵀ` of a Gaussian.
pub fn world_covariance(rotation: crate::math::Quat, scale: [f64; 3]) -> Mat3 {
    let r = rotation.to_matrix();
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| r[i][k] * scale[k] * scale[k] * r[j][k]).sum();
        }
    }
    m
}

/// Projects an already-deformed cloud. Gaussians outside `[near, far]` or
/// whose footprint misses the image are culled.
pub fn project(cloud: &GaussianCloud, cam: &Camera) -> SplatList {
    let intr = &cam.intrinsics;
    let view = cam.pose.rotation.to_matrix();
    let (w, h) = (intr.width as f64, intr.height as f64);
    let splats = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let pc = cam.pose.world_to_camera(g.position);
            let z = pc[2];
            if !(z >= intr.near && z <= intr.far) || g.opacity <= MIN_ALPHA {
                return None;
            }
            let mean = [intr.fx * pc[0] / z + intr.cx, intr.fy * pc[1] / z + intr.cy];
            let raw = project_covariance(pc, &world_covariance(g.rotation, g.scale), &view, intr.fx, intr.fy);
            let cov = [raw[0] + COV2D_FLOOR, raw[1], raw[2] + COV2D_FLOOR];
            let det = cov[0] * cov[2] - cov[1] * cov[1];
            if !(det > 0.0) || !det.is_finite() {
                return None;
            }
            let mid = 0.5 * (cov[0] + cov[2]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            // Culling on the MIN_ALPHA extent (wider than 3σ) keeps culled splats invisible.
            let reach = lambda_max.sqrt() * (2.0 * (g.opacity / MIN_ALPHA).ln()).sqrt();
            if mean[0] + reach < 0.0 || mean[0] - reach > w || mean[1] + reach < 0.0 || mean[1] - reach > h {
                return None;
            }
            let lo = |m: f64| (m - reach - 0.5).ceil() as i64;
            let hi = |m: f64| (m + reach - 0.5).floor() as i64;
            let bbox = [
                lo(mean[0]).max(0),
                lo(mean[1]).max(0),
                hi(mean[0]).min(intr.width as i64 - 1),
                hi(mean[1]).min(intr.height as i64 - 1),
            ];
            Some(Splat {
                index,
                mean,
                cov,
                conic: [cov[2] / det, -cov[1] / det, cov[0] / det],
                depth: z,
                opacity: g.opacity,
                bbox,
            })
        })
        .collect();
    SplatList::from_unsorted(splats)
}

/// Front-to-back accumulator: `w_i = α_i ∏_{j<i} (1 - α_j)`.
#[derive(Clone, Copy, Debug)]
pub struct Transmittance {
    remaining: f64,
    cutoff: f64,
}

impl Transmittance {
    pub fn new(early_termination: bool) -> Self {
        Transmittance {
            remaining: 1.0,
            cutoff: if early_termination { TRANSMITTANCE_CUTOFF } else { 0.0 },
        }
    }

    /// Compositing weight of the next layer; advances the transmittance.
    pub fn push(&mut self, alpha: f64) -> f64 {
        let w = alpha * self.remaining;
        self.remaining *= 1.0 - alpha;
        w
    }

    pub fn remaining(&self) -> f64 {
        self.remaining
    }

    pub fn done(&self) -> bool {
        self.remaining < self.cutoff
    }
}

/// Everything rendered for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub color: ColorImage,
    pub alpha: Grid<f64>,
    /// Weight-averaged view depth, `+∞` where nothing was composited.
    pub depth: Grid<f64>,
    /// Instance of the largest-weight splat per pixel, 0 for background.
    pub id_map: IdMap,
    /// Composited classification features, one 16-vector per pixel.
    pub features: Grid<Encoding>,
}

impl FrameBundle {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Channel-major f32 planes for the feature-map file.
    pub fn feature_map(&self) -> FeatureMap {
        let (w, h) = self.features.dims();
        let mut planes = vec![0f32; ENCODING_DIM * w * h];
        for (p, f) in self.features.data.iter().enumerate() {
            for (c, v) in f.iter().enumerate() {
                planes[c * w * h + p] = *v as f32;
            }
        }
        FeatureMap {
            channels: ENCODING_DIM,
            width: w,
            height: h,
            planes,
        }
    }
}

/// Per-pixel compositing weights in CSR layout: pixel `p` owns
/// `entries[offsets[p]..offsets[p + 1]]`, each `(gaussian index, weight)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelWeights {
    pub width: usize,
    pub height: usize,
    pub offsets: Vec<usize>,
    pub entries: Vec<(u32, f64)>,
}

impl PixelWeights {
    pub fn pixel(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CompositeOptions {
    pub early_termination: bool,
    pub record_weights: bool,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        CompositeOptions {
            early_termination: true,
            record_weights: false,
        }
    }
}

struct RowOut {
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    ids: Vec<u32>,
    features: Vec<Encoding>,
    weights: Vec<Vec<(u32, f64)>>,
}

fn composite_row(y: usize, splats: &[&Splat], cloud: &GaussianCloud, width: usize, opts: CompositeOptions) -> RowOut {
    let mut out = RowOut {
        color: Vec::with_capacity(width),
        alpha: Vec::with_capacity(width),
        depth: Vec::with_capacity(width),
        ids: Vec::with_capacity(width),
        features: Vec::with_capacity(width),
        weights: Vec::new(),
    };
    let py = y as f64 + 0.5;
    for x in 0..width {
        let px = x as f64 + 0.5;
        let mut trans = Transmittance::new(opts.early_termination);
        let mut color = [0.0; 3];
        let mut feature = [0.0; ENCODING_DIM];
        let (mut wsum, mut zsum) = (0.0, 0.0);
        let (mut best_w, mut best_id) = (0.0, 0u32);
        let mut record = Vec::new();
        for s in splats.iter().filter(|s| s.covers(x as i64, y as i64)) {
            let alpha = s.alpha_at(px, py);
            if alpha < MIN_ALPHA {
                continue;
            }
            let g = &cloud.gaussians[s.index];
            let w = trans.push(alpha);
            for k in 0..3 {
                color[k] += w * g.color[k];
            }
            for (f, e) in feature.iter_mut().zip(&g.class_encoding) {
                *f += w * e;
            }
            wsum += w;
            zsum += w * s.depth;
            if w > best_w {
                best_w = w;
                best_id = g.instance_id;
            }
            if opts.record_weights {
                record.push((s.index as u32, w));
            }
            if trans.done() {
                break;
            }
        }
        out.color.push(color);
        out.alpha.push(wsum);
        out.depth.push(if wsum > 0.0 { zsum / wsum } else { f64::INFINITY });
        out.ids.push(best_id);
        out.features.push(feature);
        if opts.record_weights {
            out.weights.push(record);
        }
    }
    out
}

/// Composites a sorted splat list. `cloud` must be the deformed cloud the
/// splats were projected from.
pub fn composite_with(
    splats: &SplatList,
    cloud: &GaussianCloud,
    cam: &Camera,
    opts: CompositeOptions,
) -> (FrameBundle, Option<PixelWeights>) {
    let (width, height) = (cam.width(), cam.height());
    let rows: Vec<RowOut> = (0..height)
        .into_par_iter()
        .map(|y| {
            let yi = y as i64;
            let row_splats: Vec<&Splat> = splats
                .splats
                .iter()
                .filter(|s| yi >= s.bbox[1] && yi <= s.bbox[3] && s.bbox[0] <= s.bbox[2])
                .collect();
            composite_row(y, &row_splats, cloud, width, opts)
        })
        .collect();

    let n = width * height;
    let mut color = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    let mut weights = opts.record_weights.then(|| PixelWeights {
        width,
        height,
        offsets: vec![0],
        entries: Vec::new(),
    });
    for row in rows {
        color.extend(row.color);
        alpha.extend(row.alpha);
        depth.extend(row.depth);
        ids.extend(row.ids);
        features.extend(row.features);
        if let Some(pw) = weights.as_mut() {
            for px in row.weights {
                pw.entries.extend(px);
                pw.offsets.push(pw.entries.len());
            }
        }
    }
    let bundle = FrameBundle {
        color: Grid { width, height, data: color },
        alpha: Grid { width, height, data: alpha },
        depth: Grid { width, height, data: depth },
        id_map: Grid { width, height, data: ids },
        features: Grid { width, height, data: features },
    };
    (bundle, weights)
}

pub fn composite(splats: &SplatList, cloud: &GaussianCloud, cam: &Camera) -> FrameBundle {
    composite_with(splats, cloud, cam, CompositeOptions::default()).0
}

/// Deform to `t`, project and composite.
pub fn render_view(cloud: &GaussianCloud, t: TimeStamp, cam: &Camera) -> Result<FrameBundle> {
    Ok(render_view_with(cloud, t, cam, CompositeOptions::default())?.0)
}

pub fn render_view_with(
    cloud: &GaussianCloud,
    t: TimeStamp,
    cam: &Camera,
    opts: CompositeOptions,
) -> Result<(FrameBundle, Option<PixelWeights>)> {
    cam.intrinsics.validate()?;
    let deformed = deform(cloud, t)?;
    let splats = project(&deformed, cam);
    Ok(composite_with(&splats, &deformed, cam, opts))
}
