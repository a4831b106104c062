//! Random fixtures and straight-line reference implementations shared by
//! the integration and acceptance tests. Nothing here calls the code it
//! checks, except to build inputs.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeSet, VecDeque};

use gsdiff::maps::{Grid, Mask};
use gsdiff::math::Quat;
use gsdiff::partition::{neighborhoods, prepare_views, sample_gaussians, total_loss, ChangeHead, LossContext, TrainConfig, TrainingView};
use gsdiff::pose_interp::Pose;
use gsdiff::rasterizer::{Camera, Intrinsics};
use gsdiff::scene::{DeformationDelta, Encoding, Gaussian, GaussianCloud, TimeStamp, ENCODING_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() > 0.1 {
            return q.normalized().unwrap();
        }
    }
}

pub fn random_encoding(rng: &mut ChaCha8Rng, amp: f64) -> Encoding {
    std::array::from_fn(|_| rng.random_range(-amp..amp))
}

/// A Gaussian somewhere in front of an identity camera (some partly or fully
/// off-screen, some behind the near plane).
pub fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
    Gaussian {
        position: [
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-0.5..6.0),
        ],
        scale: std::array::from_fn(|_| rng.random_range(0.03..0.6)),
        rotation: random_unit_quat(rng),
        opacity: rng.random_range(0.05..1.0),
        color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        instance_id: rng.random_range(0..5),
        class_encoding: random_encoding(rng, 1.0),
    }
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
    GaussianCloud::new((0..n).map(|_| random_gaussian(rng)).collect())
}

pub fn identity_camera(w: usize, h: usize, focal: f64) -> Camera {
    Camera::new(Pose::captured(Quat::IDENTITY, [0.0; 3]), Intrinsics::centered(w, h, focal))
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> Mask {
    Mask::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(density)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Compositing reference

fn quat_matrix(q: Quat) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub struct ReferenceFrame {
    pub features: Vec<Encoding>,
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

/// Exhaustive front-to-back compositing: every Gaussian between the near and
/// far planes is evaluated at every pixel, sorted by (depth, index), with no
/// early termination and no footprint culling.
pub fn reference_composite(cloud: &GaussianCloud, cam: &Camera) -> ReferenceFrame {
    let k = &cam.intrinsics;
    let rv = quat_matrix(cam.pose.rotation);
    let t = cam.pose.translation;
    struct S {
        depth: f64,
        idx: usize,
        mean: [f64; 2],
        inv: [f64; 3],
        opacity: f64,
    }
    let mut splats = Vec::new();
    for (idx, g) in cloud.gaussians.iter().enumerate() {
        let p = g.position;
        let c: [f64; 3] = std::array::from_fn(|i| rv[i][0] * p[0] + rv[i][1] * p[1] + rv[i][2] * p[2] + t[i]);
        if c[2] < k.near || c[2] > k.far {
            continue;
        }
        let r = quat_matrix(g.rotation);
        let mut sigma = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for m in 0..3 {
                    sigma[i][j] += r[i][m] * g.scale[m] * g.scale[m] * r[j][m];
                }
            }
        }
        // camera-space covariance V Σ Vᵀ
        let mut cs = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for a in 0..3 {
                    for b in 0..3 {
                        cs[i][j] += rv[i][a] * sigma[a][b] * rv[j][b];
                    }
                }
            }
        }
        let z = c[2];
        let jac = [[k.fx / z, 0.0, -k.fx * c[0] / (z * z)], [0.0, k.fy / z, -k.fy * c[1] / (z * z)]];
        let mut cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        cov[i][j] += jac[i][a] * cs[a][b] * jac[j][b];
                    }
                }
            }
        }
        cov[0][0] += 0.3;
        cov[1][1] += 0.3;
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        splats.push(S {
            depth: z,
            idx,
            mean: [k.fx * c[0] / z + k.cx, k.fy * c[1] / z + k.cy],
            inv: [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det],
            opacity: g.opacity,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.idx.cmp(&b.idx)));

    let n = k.width * k.height;
    let mut out = ReferenceFrame {
        features: vec![[0.0; ENCODING_DIM]; n],
        color: vec![[0.0; 3]; n],
        alpha: vec![0.0; n],
    };
    for y in 0..k.height {
        for x in 0..k.width {
            let p = y * k.width + x;
            let mut trans = 1.0;
            for s in &splats {
                let dx = x as f64 + 0.5 - s.mean[0];
                let dy = y as f64 + 0.5 - s.mean[1];
                let q = s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
                let a = (s.opacity * (-0.5 * q).exp()).min(0.99);
                let w = a * trans;
                let g = &cloud.gaussians[s.idx];
                for c in 0..ENCODING_DIM {
                    out.features[p][c] += w * g.class_encoding[c];
                }
                for c in 0..3 {
                    out.color[p][c] += w * g.color[c];
                }
                out.alpha[p] += w;
                trans *= 1.0 - a;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Metric references

pub fn reference_counts(pred: &Mask, gt: &Mask) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for y in 0..pred.height {
        for x in 0..pred.width {
            let p = *pred.get(x, y);
            let g = *gt.get(x, y);
            if p && g {
                tp += 1;
            } else if p {
                fp += 1;
            } else if g {
                fn_ += 1;
            }
        }
    }
    (tp, fp, fn_)
}

/// Breadth-first flood fill with 8-neighbourhoods; components in scan
/// order, pixels sorted row-major.
pub fn reference_components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) || seen[y * w + x] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(x, y)]);
            seen[y * w + x] = true;
            while let Some((cx, cy)) = queue.pop_front() {
                comp.push((cx, cy));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if *mask.get(nx, ny) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            comp.sort_by_key(|&(x, y)| (y, x));
            comps.push(comp);
        }
    }
    comps
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub encodings: f64,
    pub weights: f64,
    pub bias: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.encodings.max(self.weights).max(self.bias)
    }
}

/// One random 5-Gaussian, 8×8 instance with two views (one per epoch):
/// compares every analytic partial derivative of the total loss with a
/// central difference.
pub fn gradient_trial(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let gaussians: Vec<Gaussian> = (0..5)
        .map(|_| Gaussian {
            position: [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(2.0..4.0)],
            scale: std::array::from_fn(|_| r.random_range(0.15..0.5)),
            rotation: random_unit_quat(&mut r),
            opacity: r.random_range(0.3..0.95),
            color: std::array::from_fn(|_| r.random_range(0.0..1.0)),
            instance_id: 1,
            class_encoding: [0.0; ENCODING_DIM],
        })
        .collect();
    let mut cloud = GaussianCloud::new(gaussians);
    for d in cloud.deltas.after.iter_mut() {
        *d = DeformationDelta::translation([r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), 0.0]);
    }
    let cam = identity_camera(8, 8, 8.0);
    let views: Vec<TrainingView> = TimeStamp::ALL
        .iter()
        .map(|&epoch| TrainingView {
            camera: cam,
            epoch,
            target: Grid::from_vec(8, 8, (0..64).map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0))).collect()).unwrap(),
            mask: random_mask(&mut r, 8, 8, 0.4),
        })
        .collect();
    let cfg = TrainConfig {
        lambda_2d: r.random_range(0.5..2.0),
        lambda_3d: r.random_range(0.1..1.0),
        k_neighbors: 2,
        m_samples: 3,
        rng_seed: seed,
        ..TrainConfig::default()
    };
    let prepared = prepare_views(&cloud, &views).unwrap();
    let neighbors = neighborhoods(&cloud, cfg.k_neighbors).unwrap();
    let samples = sample_gaussians(cloud.len(), cfg.m_samples, &mut rng(seed ^ 0x5eed));
    let ctx = LossContext {
        views: &prepared,
        neighbors: &neighbors,
        samples: &samples,
        cfg: &cfg,
    };
    let enc: Vec<Encoding> = (0..5).map(|_| random_encoding(&mut r, 1.5)).collect();
    let head = ChangeHead {
        weights: std::array::from_fn(|_| random_encoding(&mut r, 1.0)),
        bias: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
    };
    let (_, grads) = total_loss(&ctx, &enc, &head);
    let loss_at = |enc: &[Encoding], head: &ChangeHead| total_loss(&ctx, enc, head).0.total;
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * FD_STEP);

    let mut check = GradCheck::default();
    for i in 0..enc.len() {
        for c in 0..ENCODING_DIM {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p[i][c] += FD_STEP;
            m[i][c] -= FD_STEP;
            let n = central(loss_at(&p, &head), loss_at(&m, &head));
            check.encodings = check.encodings.max(relative_error(grads.encodings[i][c], n));
            check.checked += 1;
        }
    }
    for row in 0..2 {
        for c in 0..ENCODING_DIM {
            let (mut p, mut m) = (head.clone(), head.clone());
            p.weights[row][c] += FD_STEP;
            m.weights[row][c] -= FD_STEP;
            let n = central(loss_at(&enc, &p), loss_at(&enc, &m));
            check.weights = check.weights.max(relative_error(grads.head.weights[row][c], n));
            check.checked += 1;
        }
        let (mut p, mut m) = (head.clone(), head.clone());
        p.bias[row] += FD_STEP;
        m.bias[row] -= FD_STEP;
        let n = central(loss_at(&enc, &p), loss_at(&enc, &m));
        check.bias = check.bias.max(relative_error(grads.head.bias[row], n));
        check.checked += 1;
    }
    check
}

/// Instance ids present in exactly one of the two maps.
pub fn reference_symmetric_ids(a: &Grid<u32>, b: &Grid<u32>) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for id in a.data.iter().chain(&b.data).copied() {
        if id == 0 {
            continue;
        }
        let in_a = a.data.contains(&id);
        let in_b = b.data.contains(&id);
        if in_a != in_b {
            out.insert(id);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Criterion checks. Each returns a one-line summary, or the first failure.

pub type Check = std::result::Result<String, String>;

pub fn random_scene_camera(r: &mut ChaCha8Rng, w: usize, h: usize) -> Camera {
    let eye = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.0)];
    let pose = Pose::look_at(eye, [r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), 3.0], [0.0, 1.0, 0.0]);
    Camera::new(pose, Intrinsics::centered(w, h, r.random_range(12.0..30.0)))
}

/// Largest per-channel deviation between the rasterizer and the exhaustive
/// reference over `scenes` random scenes.
pub fn compositing_max_error(scenes: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..scenes {
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..40);
        let cloud = random_cloud(&mut r, n);
        let cam = random_scene_camera(&mut r, 24, 18);
        let got = gsdiff::rasterizer::render_view(&cloud, TimeStamp::Before, &cam).unwrap();
        let want = reference_composite(&cloud, &cam);
        for p in 0..want.alpha.len() {
            for c in 0..ENCODING_DIM {
                worst = worst.max((got.features.data[p][c] - want.features[p][c]).abs());
            }
            for c in 0..3 {
                worst = worst.max((got.color.data[p][c] - want.color[p][c]).abs());
            }
            worst = worst.max((got.alpha.data[p] - want.alpha[p]).abs());
        }
    }
    worst
}

pub fn check_compositing() -> Check {
    let worst = compositing_max_error(50);
    if worst <= 1e-3 {
        Ok(format!("50 scenes, max channel error {worst:.2e}"))
    } else {
        Err(format!("max channel error {worst:.2e} > 1e-3"))
    }
}

fn quat_close(a: Quat, b: Quat, tol: f64) -> bool {
    let d = a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let s = a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    d.min(s) <= tol
}

/// Rotation by `angle` about the unit `axis`, written out directly.
fn axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let (s, c) = (0.5 * angle).sin_cos();
    Quat::new(c, s * axis[0], s * axis[1], s * axis[2])
}

pub fn check_slerp() -> Check {
    use gsdiff::pose_interp::{slerp, SLERP_PARALLEL_EPS};
    use std::ops::Mul;
    let mut r = rng(45);
    for _ in 0..500 {
        let (a, b) = (random_unit_quat(&mut r), random_unit_quat(&mut r));
        if slerp(a, b, 0.0).unwrap() != a || slerp(a, b, 1.0).unwrap() != b {
            return Err(format!("endpoint not recovered for {a:?} -> {b:?}"));
        }
        let d = r.random_range(0.0..1.0);
        let n = slerp(a, b, d).unwrap().norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(format!("norm {n} at delta {d}"));
        }
    }
    for axis in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.6, 0.0, 0.8]] {
        let mid = slerp(Quat::IDENTITY, axis_angle(axis, std::f64::consts::FRAC_PI_2), 0.5).unwrap();
        let want = axis_angle(axis, std::f64::consts::FRAC_PI_4);
        if !quat_close(mid, want, 1e-9) {
            return Err(format!("45 degree midpoint {mid:?}, expected {want:?}"));
        }
    }
    // Angles between the quaternions straddling the lerp fallback threshold.
    let base = random_unit_quat(&mut r);
    let mut worst: f64 = 0.0;
    for k in 0..=60 {
        let theta = 1e-11 * 10f64.powf(k as f64 / 10.0);
        let end = base.mul(axis_angle([0.0, 0.6, 0.8], 2.0 * theta));
        for d in [0.25, 0.5, 0.75] {
            let got = slerp(base, end, d).unwrap();
            let want = base.mul(axis_angle([0.0, 0.6, 0.8], 2.0 * theta * d));
            let err = got.to_array().iter().zip(want.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    let theta = SLERP_PARALLEL_EPS;
    let below = slerp(base, base.mul(axis_angle([1.0, 0.0, 0.0], 2.0 * theta * 0.999)), 0.5).unwrap();
    let above = slerp(base, base.mul(axis_angle([1.0, 0.0, 0.0], 2.0 * theta * 1.001)), 0.5).unwrap();
    worst = worst.max(below.to_array().iter().zip(above.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    if worst > 1e-6 {
        return Err(format!("near-parallel discontinuity {worst:.2e}"));
    }
    Ok(format!("endpoints exact, norms within 1e-9, midpoints within 1e-9, near-parallel error {worst:.1e}"))
}

pub fn check_metrics() -> Check {
    let mut r = rng(200);
    for trial in 0..200 {
        let (w, h) = (r.random_range(1..24), r.random_range(1..24));
        let (dp, dg) = (r.random_range(0.0..0.7), r.random_range(0.0..0.7));
        let pred = random_mask(&mut r, w, h, dp);
        let gt = random_mask(&mut r, w, h, dg);
        let m = gsdiff::eval::pixel_metrics(&pred, &gt).unwrap();
        let (tp, fp, fn_) = reference_counts(&pred, &gt);
        if (m.tp, m.fp, m.fn_) != (tp, fp, fn_) {
            return Err(format!("trial {trial}: counts {:?} vs {:?}", (m.tp, m.fp, m.fn_), (tp, fp, fn_)));
        }
        if tp + fp > 0 && m.precision != tp as f64 / (tp + fp) as f64 {
            return Err(format!("trial {trial}: precision {}", m.precision));
        }
        if tp + fn_ > 0 && m.recall != tp as f64 / (tp + fn_) as f64 {
            return Err(format!("trial {trial}: recall {}", m.recall));
        }
        if tp + fp + fn_ > 0 && m.iou != tp as f64 / (tp + fp + fn_) as f64 {
            return Err(format!("trial {trial}: iou {}", m.iou));
        }
        for mask in [&pred, &gt] {
            let got: Vec<Vec<(usize, usize)>> = gsdiff::eval::connected_components(mask)
                .into_iter()
                .map(|mut c| {
                    c.sort_by_key(|&(x, y)| (y, x));
                    c
                })
                .collect();
            if got != reference_components(mask) {
                return Err(format!("trial {trial}: components differ"));
            }
        }
    }
    Ok("200 random mask pairs, counts and components identical".into())
}

pub fn check_loss_units() -> Check {
    use gsdiff::partition::{loss_2d, loss_3d_given, loss_tv};
    let mut r = rng(2);
    for _ in 0..20 {
        let (w, h) = (r.random_range(1..16), r.random_range(1..16));
        let c = r.random_range(-5.0..5.0);
        let logits = Grid::filled(w, h, [c, c]);
        let l = loss_2d(&logits, &random_mask(&mut r, w, h, 0.5)).unwrap();
        if (l - std::f64::consts::LN_2).abs() > 1e-9 {
            return Err(format!("uniform L2d {l}"));
        }
        let e = random_encoding(&mut r, 2.0);
        let n = r.random_range(2..30);
        let head = ChangeHead {
            weights: std::array::from_fn(|_| random_encoding(&mut r, 1.0)),
            bias: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
        };
        let neighbors: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| j != i).take(4).collect()).collect();
        let samples: Vec<usize> = (0..n).collect();
        let l3 = loss_3d_given(&vec![e; n], &head, &samples, &neighbors);
        if l3 != 0.0 {
            return Err(format!("identical-encoding L3d {l3}"));
        }
        let col: [f64; 3] = std::array::from_fn(|_| r.random_range(0.0..1.0));
        let tv = loss_tv(&Grid::filled(w, h, col));
        if tv != 0.0 {
            return Err(format!("constant-image TV {tv}"));
        }
    }
    Ok("uniform L2d = ln 2, identical-encoding L3d = 0, constant TV = 0".into())
}

pub fn check_gradients(trials: u64) -> Check {
    let mut worst = GradCheck::default();
    let mut checked = 0;
    for t in 0..trials {
        let g = gradient_trial(t);
        checked += g.checked;
        worst.encodings = worst.encodings.max(g.encodings);
        worst.weights = worst.weights.max(g.weights);
        worst.bias = worst.bias.max(g.bias);
    }
    let msg = format!(
        "{trials} trials, {checked} partials, max rel err enc {:.1e} W {:.1e} b {:.1e}",
        worst.encodings, worst.weights, worst.bias
    );
    if worst.worst() <= 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
