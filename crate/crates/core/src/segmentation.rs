//! Instance IDs per frame and change detection by comparing them.
//!
//! Frames come either from the oracle segmenter (the renderer's dominant
//! instance per pixel) or from externally produced 16-bit PGM ID maps listed
//! in a manifest. Either way IDs must mean the same instance in every frame
//! of both epochs. A co-posed before/after pair is diffed by taking the
//! symmetric difference of the two frames' ID sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_id_map;
use crate::maps::{IdMap, Mask};
use crate::rasterizer::FrameBundle;
use crate::scene::TimeStamp;

pub const DEFAULT_MIN_PIXELS: usize = 8;
pub const DEFAULT_PERSIST_K: usize = 3;
pub const DEFAULT_MOVED_IOU: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFrame {
    pub id_map: IdMap,
    pub pose_index: usize,
    pub epoch: TimeStamp,
}

impl InstanceFrame {
    /// Nonzero IDs present in the frame.
    pub fn ids(&self) -> BTreeSet<u32> {
        self.id_map.data.iter().copied().filter(|&id| id != 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMask {
    pub mask: Mask,
    pub pose_index: usize,
    pub epoch: TimeStamp,
}

/// Copies the renderer's dominant-instance map, dropping instances smaller
/// than `min_pixels`.
pub fn oracle_segment(bundle: &FrameBundle, min_pixels: usize, pose_index: usize, epoch: TimeStamp) -> InstanceFrame {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in &bundle.id_map.data {
        *counts.entry(id).or_default() += 1;
    }
    let id_map = bundle
        .id_map
        .map(|&id| if counts[&id] < min_pixels { 0 } else { id });
    InstanceFrame {
        id_map,
        pose_index,
        epoch,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub pose_index: usize,
    pub epoch: TimeStamp,
}

/// External ID maps. `pose_index` indexes the concatenation of the two
/// densified sequences (before-capture sequence first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    pub id_space: String,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::file(path, format!("invalid manifest: {e}")))
    }
}

/// Loads and validates the frames a manifest lists, sorted by (epoch, pose).
pub fn ingest_masks(dir: &Path, manifest: &Manifest, pose_count: usize, dims: (usize, usize)) -> Result<Vec<InstanceFrame>> {
    if manifest.id_space != "consistent" {
        return Err(Error::Validation(format!(
            "manifest id_space is {:?}; only \"consistent\" ID spaces can be compared",
            manifest.id_space
        )));
    }
    let mut seen = BTreeSet::new();
    let mut frames = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        if entry.pose_index >= pose_count {
            return Err(Error::Validation(format!(
                "{}: pose_index {} out of range (sequence has {pose_count} poses)",
                entry.path.display(),
                entry.pose_index
            )));
        }
        if !seen.insert((entry.epoch, entry.pose_index)) {
            return Err(Error::Validation(format!(
                "{}: duplicate pose_index {} for epoch {}",
                entry.path.display(),
                entry.pose_index,
                entry.epoch
            )));
        }
        let path = dir.join(&entry.path);
        if !path.is_file() {
            return Err(Error::file(path, "listed in manifest but missing"));
        }
        let id_map = read_id_map(&path)?;
        if id_map.dims() != dims {
            return Err(Error::file(
                path,
                format!(
                    "dimension mismatch: {}x{}, expected {}x{}",
                    id_map.width, id_map.height, dims.0, dims.1
                ),
            ));
        }
        frames.push(InstanceFrame {
            id_map,
            pose_index: entry.pose_index,
            epoch: entry.epoch,
        });
    }
    frames.sort_by_key(|f| (f.epoch, f.pose_index));
    Ok(frames)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffOptions {
    /// Also flag an ID present in both frames when the IoU of its two pixel
    /// sets falls below this. Off by default.
    pub moved_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdDiff {
    pub changed: BTreeSet<u32>,
    pub before: ChangeMask,
    pub after: ChangeMask,
}

fn mask_of(frame: &InstanceFrame, ids: &BTreeSet<u32>) -> ChangeMask {
    ChangeMask {
        mask: frame.id_map.map(|id| *id != 0 && ids.contains(id)),
        pose_index: frame.pose_index,
        epoch: frame.epoch,
    }
}

fn shared_id_iou(before: &IdMap, after: &IdMap, id: u32) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in before.data.iter().zip(&after.data) {
        let (ia, ib) = (a == id, b == id);
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn changed_ids(before: &InstanceFrame, after: &InstanceFrame, opts: DiffOptions) -> Result<BTreeSet<u32>> {
    if before.pose_index != after.pose_index {
        return Err(Error::Contract(format!(
            "diffing frames from different poses ({} vs {})",
            before.pose_index, after.pose_index
        )));
    }
    before.id_map.ensure_same_dims(&after.id_map, "diffed frames differ in size")?;
    let (a, b) = (before.ids(), after.ids());
    let mut changed: BTreeSet<u32> = a.symmetric_difference(&b).copied().collect();
    if let Some(threshold) = opts.moved_iou {
        changed.extend(
            a.intersection(&b)
                .filter(|&&id| shared_id_iou(&before.id_map, &after.id_map, id) < threshold),
        );
    }
    Ok(changed)
}

/// Changed IDs of a co-posed pair and the pixels they cover in each frame.
pub fn diff_ids(before: &InstanceFrame, after: &InstanceFrame, opts: DiffOptions) -> Result<IdDiff> {
    let changed = changed_ids(before, after, opts)?;
    Ok(IdDiff {
        before: mask_of(before, &changed),
        after: mask_of(after, &changed),
        changed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub min_pixels: usize,
    /// IDs flagged in fewer pose pairs than this are dropped everywhere.
    pub persist_k: usize,
    #[serde(default)]
    pub diff: DiffOptions,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            min_pixels: DEFAULT_MIN_PIXELS,
            persist_k: DEFAULT_PERSIST_K,
            diff: DiffOptions::default(),
        }
    }
}

/// Frames of one pose sequence rendered at both epochs, pose-aligned.
#[derive(Clone, Copy, Debug)]
pub struct PairedFrames<'a> {
    pub before: &'a [InstanceFrame],
    pub after: &'a [InstanceFrame],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDetection {
    /// Masks over the before-epoch frames, one per pose.
    pub before_masks: Vec<ChangeMask>,
    /// Masks over the after-epoch frames, one per pose.
    pub after_masks: Vec<ChangeMask>,
    /// Changed IDs that survived the persistence filter.
    pub changed_ids: BTreeSet<u32>,
    /// Pose pairs each ID was flagged in, before filtering.
    pub flag_counts: BTreeMap<u32, usize>,
}

fn detect_pairs(sets: &[PairedFrames<'_>], cfg: &DetectConfig) -> Result<Vec<SequenceDetection>> {
    for s in sets {
        if s.before.len() != s.after.len() {
            return Err(Error::Contract(format!(
                "{} before frames vs {} after frames",
                s.before.len(),
                s.after.len()
            )));
        }
    }
    let per_pose: Vec<Vec<BTreeSet<u32>>> = sets
        .iter()
        .map(|s| {
            s.before
                .par_iter()
                .zip(s.after.par_iter())
                .map(|(b, a)| changed_ids(b, a, cfg.diff))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut flag_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for id in per_pose.iter().flatten().flatten() {
        *flag_counts.entry(*id).or_default() += 1;
    }
    let kept: BTreeSet<u32> = flag_counts
        .iter()
        .filter(|(_, &n)| n >= cfg.persist_k)
        .map(|(&id, _)| id)
        .collect();
    Ok(sets
        .iter()
        .zip(per_pose)
        .map(|(s, flagged)| {
            let (before_masks, after_masks) = s
                .before
                .iter()
                .zip(s.after)
                .zip(&flagged)
                .map(|((b, a), ids)| {
                    let ids: BTreeSet<u32> = ids.intersection(&kept).copied().collect();
                    (mask_of(b, &ids), mask_of(a, &ids))
                })
                .unzip();
            SequenceDetection {
                before_masks,
                after_masks,
                changed_ids: flagged.iter().flatten().filter(|id| kept.contains(id)).copied().collect(),
                flag_counts: flag_counts.clone(),
            }
        })
        .collect())
}

/// Diffs every pose of one sequence and applies the persistence filter.
pub fn detect_sequence(frames_before: &[InstanceFrame], frames_after: &[InstanceFrame], cfg: &DetectConfig) -> Result<SequenceDetection> {
    let mut out = detect_pairs(
        &[PairedFrames {
            before: frames_before,
            after: frames_after,
        }],
        cfg,
    )?;
    Ok(out.pop().unwrap())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Before-epoch masks over the densified before-capture poses.
    pub m1: Vec<ChangeMask>,
    /// After-epoch masks over the densified after-capture poses.
    pub m2: Vec<ChangeMask>,
    pub changed_ids: BTreeSet<u32>,
    pub flag_counts: BTreeMap<u32, usize>,
}

/// Runs detection over both densified sequences with one shared
/// persistence count.
pub fn detect_sequences(seq1: PairedFrames<'_>, seq2: PairedFrames<'_>, cfg: &DetectConfig) -> Result<Detection> {
    let mut out = detect_pairs(&[seq1, seq2], cfg)?;
    let second = out.pop().unwrap();
    let first = out.pop().unwrap();
    Ok(Detection {
        changed_ids: first.changed_ids.union(&second.changed_ids).copied().collect(),
        flag_counts: first.flag_counts,
        m1: first.before_masks,
        m2: second.after_masks,
    })
}
