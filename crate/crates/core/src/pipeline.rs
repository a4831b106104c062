//! End-to-end stages over an output directory.
//!
//! ```text
//! <out>/cloud.gsdf              generated (or copied) scene
//! <out>/poses.json              captured poses, both epochs
//! <out>/eval_poses.json         held-out views
//! <out>/ground_truth.json       changed ids and Gaussians (synthetic scenes)
//! <out>/gt/view_NN.pgm          ground-truth change masks of the held-out views
//! <out>/detect/                 densified poses, input images s1/ s2/, masks m1/ m2/, report
//! <out>/train/                  trained cloud and loss curve
//! <out>/render/                 predicted change maps, colors and feature maps
//! <out>/eval/                   metrics CSV and table
//! <out>/baseline/               delta-threshold grid, best masks and metrics
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{filter_by_delta, render_baseline_change_map, threshold_grid, DeltaThresholds};
use crate::config::{PipelineConfig, SegmentationSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, PixelMetrics, DEFAULT_BOX_IOU};
use crate::io::{read_mask, read_ppm, write_atomic, write_features, write_mask, write_ppm};
use crate::maps::Mask;
use crate::math::{add, Vec3};
use crate::partition::{change_logits, change_map, partition_cloud, train, LossBreakdown, TrainingView};
use crate::pose_interp::{densify_merged, load_poses, merge, save_poses, Pose, PoseSequence};
use crate::rasterizer::{render_view, Camera};
use crate::scene::synthetic::{changed_gaussians, generate_synthetic_scene};
use crate::scene::{load_cloud, save_cloud, GaussianCloud, TimeStamp};
use crate::segmentation::{detect_sequences, ingest_masks, oracle_segment, InstanceFrame, Manifest, PairedFrames};

const SCENE_CENTER: Vec3 = [0.0, 0.0, 0.0];
const DOWN: Vec3 = [0.0, 1.0, 0.0];

pub fn view_name(i: usize) -> String {
    format!("view_{i:02}")
}

fn frame_name(i: usize) -> String {
    format!("{i:03}")
}

/// Paths of every artifact under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn cloud(&self) -> PathBuf {
        self.root.join("cloud.gsdf")
    }
    pub fn poses(&self) -> PathBuf {
        self.root.join("poses.json")
    }
    pub fn eval_poses(&self) -> PathBuf {
        self.root.join("eval_poses.json")
    }
    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.json")
    }
    pub fn gt_dir(&self) -> PathBuf {
        self.root.join("gt")
    }
    pub fn detect_dir(&self) -> PathBuf {
        self.root.join("detect")
    }
    pub fn densified_poses(&self) -> PathBuf {
        self.detect_dir().join("densified_poses.json")
    }
    pub fn detect_report(&self) -> PathBuf {
        self.detect_dir().join("report.json")
    }
    pub fn trained_cloud(&self) -> PathBuf {
        self.root.join("train").join("trained.gsdf")
    }
    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("train").join("loss.csv")
    }
    pub fn render_dir(&self) -> PathBuf {
        self.root.join("render")
    }
    pub fn pred_dir(&self) -> PathBuf {
        self.render_dir().join("pred")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::file(path, e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, e.to_string()))
}

fn orbit(distance: f64, azimuth_deg: f64, elevation_deg: f64) -> Pose {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let offset = [distance * a.sin() * e.cos(), -distance * e.sin(), -distance * a.cos() * e.cos()];
    Pose::look_at(add(SCENE_CENTER, offset), SCENE_CENTER, DOWN)
}

fn sweep(n: usize, arc_deg: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -arc_deg + 2.0 * arc_deg * i as f64 / (n - 1) as f64)
        .collect()
}

/// Captured poses of both epochs from the rig description.
pub fn rig_poses(cfg: &PipelineConfig) -> (PoseSequence, PoseSequence) {
    let r = &cfg.rig;
    let arc = sweep(r.poses_per_epoch, r.arc_deg);
    let before = arc.iter().map(|&a| orbit(r.distance, a, r.elevation_deg)).collect();
    let after = arc.iter().map(|&a| orbit(r.distance, a, -r.elevation_deg)).collect();
    (
        PoseSequence::captured(before, TimeStamp::Before),
        PoseSequence::captured(after, TimeStamp::After),
    )
}

/// Held-out views: level with the scene, closer than the captures, at
/// azimuths between capture positions.
pub fn rig_eval_poses(cfg: &PipelineConfig) -> PoseSequence {
    let r = &cfg.rig;
    let poses = sweep(r.eval_views, r.eval_arc_deg)
        .iter()
        .map(|&a| orbit(r.eval_distance, a, 0.0))
        .collect();
    PoseSequence::captured(poses, cfg.eval_epoch)
}

pub fn camera(cfg: &PipelineConfig, pose: Pose) -> Camera {
    Camera::new(pose, cfg.camera.intrinsics())
}

/// Ground truth of a synthetic scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub changed_ids: BTreeSet<u32>,
    pub changed_gaussians: BTreeSet<usize>,
}

/// Change mask from the renderer's dominant instance per pixel.
pub fn ground_truth_mask(cloud: &GaussianCloud, changed_ids: &BTreeSet<u32>, t: TimeStamp, cam: &Camera) -> Result<Mask> {
    let bundle = render_view(cloud, t, cam)?;
    Ok(bundle.id_map.map(|id| *id != 0 && changed_ids.contains(id)))
}

pub fn load_ground_truth(cfg: &PipelineConfig) -> Result<GroundTruth> {
    read_json(&Layout::new(&cfg.out_dir).ground_truth())
}

pub fn load_detect_report(cfg: &PipelineConfig) -> Result<DetectReport> {
    read_json(&Layout::new(&cfg.out_dir).detect_report())
}

fn eval_sequence(layout: &Layout) -> Result<PoseSequence> {
    let path = layout.eval_poses();
    let (before, after) = load_poses(&path)?;
    Ok(if before.is_empty() { after } else { before })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOutput {
    pub cloud: GaussianCloud,
    pub ground_truth: Option<GroundTruth>,
}

/// Writes the scene, the capture and held-out poses and, for synthetic
/// scenes, the ground truth with its held-out masks.
pub fn generate(cfg: &PipelineConfig) -> Result<GenerateOutput> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    create_dir(&layout.root)?;
    let (cloud, ground_truth) = match cfg.scene_spec()? {
        Some(spec) => {
            let (cloud, ids) = generate_synthetic_scene(&spec, cfg.seed)?;
            let gt = GroundTruth {
                changed_gaussians: changed_gaussians(&cloud, &ids),
                changed_ids: ids,
            };
            (cloud, Some(gt))
        }
        None => {
            let path = cfg.scene.cloud.as_ref().expect("validated scene source");
            (load_cloud(path)?, None)
        }
    };
    cloud.validate()?;
    save_cloud(&cloud, layout.cloud())?;

    let (before, after) = match &cfg.rig.poses {
        Some(p) => load_poses(p)?,
        None => rig_poses(cfg),
    };
    if before.is_empty() || after.is_empty() {
        return Err(Error::Validation("captured poses must cover both epochs".into()));
    }
    save_poses(layout.poses(), &[&before, &after])?;
    let eval = match &cfg.rig.eval_poses {
        Some(p) => {
            let (b, a) = load_poses(p)?;
            PoseSequence::captured([b.poses, a.poses].concat(), cfg.eval_epoch)
        }
        None => rig_eval_poses(cfg),
    };
    save_poses(layout.eval_poses(), &[&eval])?;

    if let Some(gt) = &ground_truth {
        write_json(&layout.ground_truth(), gt)?;
        create_dir(&layout.gt_dir())?;
        for (i, pose) in eval.poses.iter().enumerate() {
            let mask = ground_truth_mask(&cloud, &gt.changed_ids, eval.epoch, &camera(cfg, *pose))?;
            write_mask(layout.gt_dir().join(format!("{}.pgm", view_name(i))), &mask)?;
        }
    }
    log::info!("generated {} gaussians into {}", cloud.len(), layout.root.display());
    Ok(GenerateOutput { cloud, ground_truth })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub changed_ids: BTreeSet<u32>,
    pub flag_counts: BTreeMap<u32, usize>,
    pub m1_frames: usize,
    pub m2_frames: usize,
    pub mask_pixels_m1: usize,
    pub mask_pixels_m2: usize,
}

fn render_frames(cloud: &GaussianCloud, cfg: &PipelineConfig, seq: &PoseSequence, t: TimeStamp, offset: usize) -> Result<Vec<InstanceFrame>> {
    seq.poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let bundle = render_view(cloud, t, &camera(cfg, *pose))?;
            Ok(oracle_segment(&bundle, cfg.segmentation.min_pixels, offset + i, t))
        })
        .collect()
}

/// Densifies the captures, renders the input images, segments both epochs
/// at every densified pose and writes the change masks M1 and M2.
pub fn detect(cfg: &PipelineConfig) -> Result<DetectReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let cloud = load_cloud(layout.cloud())?;
    let (before, after) = load_poses(layout.poses())?;
    let dense = densify_merged(&merge(&before, &after), cfg.n_interp)?;
    let dir = layout.detect_dir();
    for sub in ["s1", "s2", "m1", "m2"] {
        create_dir(&dir.join(sub))?;
    }
    save_poses(layout.densified_poses(), &[&dense.before, &dense.after])?;

    let (l1, l2) = (dense.before.len(), dense.after.len());
    let (f1b, f1a, f2b, f2a) = match cfg.segmentation.source {
        SegmentationSource::Oracle => (
            render_frames(&cloud, cfg, &dense.before, TimeStamp::Before, 0)?,
            render_frames(&cloud, cfg, &dense.before, TimeStamp::After, 0)?,
            render_frames(&cloud, cfg, &dense.after, TimeStamp::Before, l1)?,
            render_frames(&cloud, cfg, &dense.after, TimeStamp::After, l1)?,
        ),
        SegmentationSource::Ingest => {
            let ingest = cfg.segmentation.ingest_dir.as_ref().expect("validated ingest dir");
            let manifest = Manifest::load(ingest.join("manifest.json"))?;
            let dims = (cfg.camera.width, cfg.camera.height);
            let frames = ingest_masks(ingest, &manifest, l1 + l2, dims)?;
            let pick = |t: TimeStamp, range: std::ops::Range<usize>| -> Result<Vec<InstanceFrame>> {
                let out: Vec<_> = frames
                    .iter()
                    .filter(|f| f.epoch == t && range.contains(&f.pose_index))
                    .cloned()
                    .collect();
                if out.len() != range.len() {
                    return Err(Error::Validation(format!(
                        "manifest covers {} of the {} {t} frames for poses {range:?}",
                        out.len(),
                        range.len()
                    )));
                }
                Ok(out)
            };
            (
                pick(TimeStamp::Before, 0..l1)?,
                pick(TimeStamp::After, 0..l1)?,
                pick(TimeStamp::Before, l1..l1 + l2)?,
                pick(TimeStamp::After, l1..l1 + l2)?,
            )
        }
    };
    let det = detect_sequences(
        PairedFrames {
            before: &f1b,
            after: &f1a,
        },
        PairedFrames {
            before: &f2b,
            after: &f2a,
        },
        &cfg.segmentation.detect(),
    )?;

    for (sub, seq, masks) in [("1", &dense.before, &det.m1), ("2", &dense.after, &det.m2)] {
        let images: Vec<_> = seq
            .poses
            .par_iter()
            .map(|p| Ok(render_view(&cloud, seq.epoch, &camera(cfg, *p))?.color))
            .collect::<Result<_>>()?;
        for (i, (img, m)) in images.iter().zip(masks).enumerate() {
            write_ppm(dir.join(format!("s{sub}")).join(format!("{}.ppm", frame_name(i))), img)?;
            write_mask(dir.join(format!("m{sub}")).join(format!("{}.pgm", frame_name(i))), &m.mask)?;
        }
    }
    let report = DetectReport {
        changed_ids: det.changed_ids.clone(),
        flag_counts: det.flag_counts.clone(),
        m1_frames: det.m1.len(),
        m2_frames: det.m2.len(),
        mask_pixels_m1: det.m1.iter().map(|m| m.mask.count()).sum(),
        mask_pixels_m2: det.m2.iter().map(|m| m.mask.count()).sum(),
    };
    write_json(&layout.detect_report(), &report)?;
    log::info!("changed ids {:?} over {} + {} frames", report.changed_ids, l1, l2);
    Ok(report)
}

/// Training views from the detect stage's outputs.
pub fn load_training_views(cfg: &PipelineConfig) -> Result<Vec<TrainingView>> {
    let layout = Layout::new(&cfg.out_dir);
    let (p1, p2) = load_poses(layout.densified_poses())?;
    let dir = layout.detect_dir();
    let mut views = Vec::with_capacity(p1.len() + p2.len());
    for (sub, seq) in [("1", &p1), ("2", &p2)] {
        for (i, pose) in seq.poses.iter().enumerate() {
            views.push(TrainingView {
                camera: camera(cfg, *pose),
                epoch: seq.epoch,
                target: read_ppm(dir.join(format!("s{sub}")).join(format!("{}.ppm", frame_name(i))))?,
                mask: read_mask(dir.join(format!("m{sub}")).join(format!("{}.pgm", frame_name(i))))?,
            });
        }
    }
    Ok(views)
}

pub fn loss_curve_csv(curve: &[LossBreakdown]) -> String {
    let mut s = String::from("iteration,l1,ltv,l2d,l3d,total\n");
    for (i, l) in curve.iter().enumerate() {
        s += &format!("{i},{:.9},{:.9},{:.9},{:.9},{:.9}\n", l.l1, l.tv, l.l2d, l.l3d, l.total);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub cloud: GaussianCloud,
    pub curve: Vec<LossBreakdown>,
}

/// Fits encodings and head, partitions the cloud, writes both artifacts.
pub fn train_stage(cfg: &PipelineConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let cloud = load_cloud(layout.cloud())?;
    let views = load_training_views(cfg)?;
    let out = train(&cloud, &views, &cfg.train)?;
    let cloud = partition_cloud(&out.cloud, &out.head, cfg.tau);
    create_dir(layout.trained_cloud().parent().unwrap())?;
    save_cloud(&cloud, layout.trained_cloud())?;
    write_text(&layout.loss_csv(), &loss_curve_csv(&out.curve))?;
    if let (Some(first), Some(last)) = (out.curve.first(), out.curve.last()) {
        log::info!("loss {:.5} -> {:.5} (l2d {:.5} -> {:.5})", first.total, last.total, first.l2d, last.l2d);
    }
    Ok(TrainOutput {
        cloud,
        curve: out.curve,
    })
}

/// Renders change maps, colors and feature maps for `poses`, each at the
/// epoch of its sequence. Returns the change maps in order.
pub fn render_poses(cfg: &PipelineConfig, poses: &[&PoseSequence], out_dir: &Path) -> Result<Vec<Mask>> {
    let layout = Layout::new(&cfg.out_dir);
    let cloud = load_cloud(layout.trained_cloud())?;
    let head = cloud
        .head
        .clone()
        .ok_or_else(|| Error::Validation(format!("{} carries no change head", layout.trained_cloud().display())))?;
    for sub in ["pred", "color", "features"] {
        create_dir(&out_dir.join(sub))?;
    }
    let jobs: Vec<(TimeStamp, Pose)> = poses
        .iter()
        .flat_map(|s| s.poses.iter().map(move |p| (s.epoch, *p)))
        .collect();
    let mut masks = Vec::with_capacity(jobs.len());
    for (i, (t, pose)) in jobs.iter().enumerate() {
        let cam = camera(cfg, *pose);
        let bundle = render_view(&cloud, *t, &cam)?;
        let mask = change_map(&change_logits(&bundle.features, &head));
        let name = view_name(i);
        write_mask(out_dir.join("pred").join(format!("{name}.pgm")), &mask)?;
        write_ppm(out_dir.join("color").join(format!("{name}.ppm")), &bundle.color)?;
        write_features(out_dir.join("features").join(format!("{name}.gsfm")), &bundle.feature_map())?;
        masks.push(mask);
    }
    Ok(masks)
}

/// Renders the held-out views, or the poses in `pose_file` when given.
pub fn render_stage(cfg: &PipelineConfig, pose_file: Option<&Path>) -> Result<Vec<Mask>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    match pose_file {
        Some(p) => {
            let (b, a) = load_poses(p)?;
            render_poses(cfg, &[&b, &a], &layout.render_dir())
        }
        None => {
            let eval = eval_sequence(&layout)?;
            render_poses(cfg, &[&eval], &layout.render_dir())
        }
    }
}

fn list_masks(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e.to_string()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Scores every prediction in `pred_dir` against the same-named mask in `gt_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let gts = list_masks(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::Validation(format!("no ground-truth masks in {}", gt_dir.display())));
    }
    let mut loaded = Vec::with_capacity(gts.len());
    for (name, gt_path) in gts {
        let pred_path = pred_dir.join(format!("{name}.pgm"));
        if !pred_path.is_file() {
            return Err(Error::file(&pred_path, "prediction missing for ground-truth mask"));
        }
        loaded.push((name, read_mask(&pred_path)?, read_mask(&gt_path)?));
    }
    evaluate(loaded.iter().map(|(n, p, g)| (n.clone(), p, g)), DEFAULT_BOX_IOU)
}

pub fn eval_stage(cfg: &PipelineConfig, pred_dir: Option<&Path>, gt_dir: Option<&Path>) -> Result<EvalReport> {
    let layout = Layout::new(&cfg.out_dir);
    let pred = pred_dir.map_or_else(|| layout.pred_dir(), Path::to_path_buf);
    let gt = gt_dir.map_or_else(|| layout.gt_dir(), Path::to_path_buf);
    let report = evaluate_dirs(&pred, &gt)?;
    create_dir(&layout.eval_dir())?;
    report.write_csv(&layout.eval_dir().join("metrics.csv"))?;
    write_text(&layout.eval_dir().join("metrics.txt"), &report.pretty())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub thresholds: DeltaThresholds,
    pub selected: usize,
    pub mean: PixelMetrics,
    pub pooled: PixelMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub grid: Vec<GridPoint>,
    /// Grid index with the highest mean F1 (first on ties).
    pub best: usize,
    pub configured: GridPoint,
}

impl BaselineReport {
    pub fn best_point(&self) -> &GridPoint {
        &self.grid[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pos_thresh,rot_thresh,scale_thresh,selected,precision,recall,f1,iou\n");
        for g in &self.grid {
            let t = &g.thresholds;
            s += &format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                t.pos_thresh, t.rot_thresh, t.scale_thresh, g.selected, g.mean.precision, g.mean.recall, g.mean.f1, g.mean.iou
            );
        }
        s
    }
}

fn baseline_point(cloud: &GaussianCloud, cfg: &PipelineConfig, eval: &PoseSequence, gts: &[Mask], th: DeltaThresholds) -> Result<(GridPoint, Vec<Mask>)> {
    let selected = filter_by_delta(cloud, &th)?;
    let preds: Vec<Mask> = eval
        .poses
        .par_iter()
        .map(|p| render_baseline_change_map(cloud, &selected, eval.epoch, &camera(cfg, *p)))
        .collect::<Result<_>>()?;
    let report = evaluate(
        preds.iter().zip(gts).enumerate().map(|(i, (p, g))| (view_name(i), p, g)),
        DEFAULT_BOX_IOU,
    )?;
    Ok((
        GridPoint {
            thresholds: th,
            selected: selected.len(),
            mean: report.mean,
            pooled: report.pooled,
        },
        preds,
    ))
}

/// Scores the delta-threshold detector over the configured grid and at the
/// configured thresholds, on the held-out views.
pub fn baseline_stage(cfg: &PipelineConfig) -> Result<BaselineReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let cloud = load_cloud(layout.cloud())?;
    let eval = eval_sequence(&layout)?;
    let gts: Vec<Mask> = (0..eval.len())
        .map(|i| read_mask(layout.gt_dir().join(format!("{}.pgm", view_name(i)))))
        .collect::<Result<_>>()?;
    let b = &cfg.baseline;
    let grid_th = threshold_grid(
        (b.pos_range[0], b.pos_range[1]),
        (b.rot_scale_range[0], b.rot_scale_range[1]),
        b.grid_steps,
    );
    let mut grid: Vec<GridPoint> = Vec::with_capacity(grid_th.len());
    let mut best: Option<(usize, Vec<Mask>)> = None;
    for th in grid_th {
        let (point, masks) = baseline_point(&cloud, cfg, &eval, &gts, th)?;
        if best.as_ref().is_none_or(|(i, _)| point.mean.f1 > grid[*i].mean.f1) {
            best = Some((grid.len(), masks));
        }
        grid.push(point);
    }
    let (best, best_masks) = best.expect("grid is non-empty");
    let (configured, configured_masks) = baseline_point(&cloud, cfg, &eval, &gts, b.thresholds())?;

    let dir = layout.baseline_dir();
    for (sub, masks) in [("best", &best_masks), ("configured", &configured_masks)] {
        create_dir(&dir.join(sub))?;
        for (i, m) in masks.iter().enumerate() {
            write_mask(dir.join(sub).join(format!("{}.pgm", view_name(i))), m)?;
        }
    }
    let report = BaselineReport { grid, best, configured };
    write_text(&dir.join("grid.csv"), &report.to_csv())?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// Every stage in order, as the acceptance runs use it.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub generated: GenerateOutput,
    pub detect: DetectReport,
    pub train: TrainOutput,
    pub eval: EvalReport,
}

pub fn run_all(cfg: &PipelineConfig) -> Result<RunOutput> {
    let generated = generate(cfg)?;
    let detect = detect(cfg)?;
    let train = train_stage(cfg)?;
    render_stage(cfg, None)?;
    let eval = eval_stage(cfg, None, None)?;
    Ok(RunOutput {
        generated,
        detect,
        train,
        eval,
    })
}
