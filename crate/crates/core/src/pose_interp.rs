//! Camera pose merging and densification.
//!
//! Poses are world-to-camera: a world point `p` maps to `R(q) p + t` in the
//! camera frame (x right, y down, z forward). Between consecutive captured
//! poses of one epoch we insert `n` poses at `Δ_j = j / (n + 1)`, slerping
//! the rotation and lerping the translation. The gap between the last
//! before-pose and the first after-pose of the merged list is never filled.

use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::math::{cross, dot, mat_vec, normalize, scale, sub, transpose, Quat, Vec3};
use crate::scene::TimeStamp;

/// Below this `sin θ` slerp degenerates to normalized lerp.
pub const SLERP_PARALLEL_EPS: f64 = 1e-8;
pub const DEFAULT_N_INTERP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    Captured,
    Interpolated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
    pub source: PoseSource,
}

impl Pose {
    pub fn captured(rotation: Quat, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
            source: PoseSource::Captured,
        }
    }

    /// Camera at `eye` looking at `target`, with `down` giving the image-y direction.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Self {
        let forward = normalize(sub(target, eye));
        let right = normalize(cross(down, forward));
        let down = cross(forward, right);
        let r = [right, down, forward];
        let rotation = Quat::from_matrix(&r);
        let r = rotation.to_matrix();
        Pose::captured(rotation, scale(mat_vec(&r, eye), -1.0))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let rt = transpose(&self.rotation.to_matrix());
        scale(mat_vec(&rt, self.translation), -1.0)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let c = self.rotation.rotate(p);
        [c[0] + self.translation[0], c[1] + self.translation[1], c[2] + self.translation[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub poses: Vec<Pose>,
    pub epoch: TimeStamp,
    /// Poses inserted per gap; 0 for a captured-only sequence.
    pub n_interp: usize,
}

impl PoseSequence {
    pub fn captured(poses: Vec<Pose>, epoch: TimeStamp) -> Self {
        PoseSequence {
            poses,
            epoch,
            n_interp: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Positions of the captured poses within this sequence.
    pub fn captured_indices(&self) -> Vec<usize> {
        self.poses
            .iter()
            .enumerate()
            .filter(|(_, p)| p.source == PoseSource::Captured)
            .map(|(i, _)| i)
            .collect()
    }
}

fn checked_unit(q: Quat, which: &str) -> Result<Quat> {
    if !q.is_finite() {
        return Err(Error::Validation(format!("{which} quaternion is not finite")));
    }
    let n = q.norm();
    if n == 0.0 {
        return Err(Error::Validation(format!("{which} quaternion has zero norm")));
    }
    Ok(if (n - 1.0).abs() <= 1e-12 { q } else { q.scaled(1.0 / n) })
}

/// Spherical linear interpolation along the shortest arc.
pub fn slerp(q_from: Quat, q_to: Quat, delta: f64) -> Result<Quat> {
    let q0 = checked_unit(q_from, "start")?;
    let q1 = checked_unit(q_to, "end")?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Validation(format!("interpolation parameter {delta} outside [0, 1]")));
    }
    if delta == 0.0 {
        return Ok(q0);
    }
    if delta == 1.0 {
        return Ok(q1);
    }
    let mut d = q0.dot(q1);
    let q1 = if d < 0.0 {
        d = -d;
        -q1
    } else {
        q1
    };
    let theta = d.min(1.0).acos();
    let sin_theta = theta.sin();
    let q = if sin_theta < SLERP_PARALLEL_EPS {
        q0.scaled(1.0 - delta).plus(q1.scaled(delta))
    } else {
        let a = ((1.0 - delta) * theta).sin() / sin_theta;
        let b = (delta * theta).sin() / sin_theta;
        q0.scaled(a).plus(q1.scaled(b))
    };
    Ok(q.normalized().expect("interpolant of unit quaternions is nonzero"))
}

pub fn lerp_translation(t_from: Vec3, t_to: Vec3, delta: f64) -> Vec3 {
    std::array::from_fn(|k| (1.0 - delta) * t_from[k] + delta * t_to[k])
}

fn interpolate(a: &Pose, b: &Pose, delta: f64) -> Result<Pose> {
    Ok(Pose {
        rotation: slerp(a.rotation, b.rotation, delta)?,
        translation: lerp_translation(a.translation, b.translation, delta),
        source: PoseSource::Interpolated,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Densified {
    pub sequence: PoseSequence,
    /// Set when interpolation was requested but there was no gap to fill.
    pub warning: Option<String>,
}

/// Inserts `n` interpolated poses into every gap between consecutive poses.
pub fn densify(captured: &PoseSequence, n: usize) -> Result<Densified> {
    if captured.is_empty() {
        return Err(Error::Validation("cannot densify an empty pose sequence".into()));
    }
    if captured.len() == 1 {
        let warning = (n > 0).then(|| {
            let msg = format!("{} sequence has a single pose; nothing to interpolate", captured.epoch);
            warn!("{msg}");
            msg
        });
        return Ok(Densified {
            sequence: captured.clone(),
            warning,
        });
    }
    let mut poses = Vec::with_capacity(captured.len() + n * (captured.len() - 1));
    for pair in captured.poses.windows(2) {
        poses.push(pair[0]);
        for j in 1..=n {
            poses.push(interpolate(&pair[0], &pair[1], j as f64 / (n + 1) as f64)?);
        }
    }
    poses.push(*captured.poses.last().unwrap());
    Ok(Densified {
        sequence: PoseSequence {
            poses,
            epoch: captured.epoch,
            n_interp: n,
        },
        warning: None,
    })
}

/// The before- and after-epoch captures concatenated in capture order.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedPoses {
    pub poses: Vec<Pose>,
    pub epochs: Vec<TimeStamp>,
    /// Number of before-epoch poses; the gap `(split - 1, split)` crosses epochs.
    pub split: usize,
}

pub fn merge(before: &PoseSequence, after: &PoseSequence) -> MergedPoses {
    let mut poses = before.poses.clone();
    poses.extend_from_slice(&after.poses);
    let mut epochs = vec![before.epoch; before.len()];
    epochs.extend(std::iter::repeat_n(after.epoch, after.len()));
    MergedPoses {
        poses,
        epochs,
        split: before.len(),
    }
}

/// Result of densifying a merged sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifiedPair {
    pub before: PoseSequence,
    pub after: PoseSequence,
    /// Merged-list gaps `(i, i + 1)` that received interpolants.
    pub filled_gaps: Vec<(usize, usize)>,
}

/// Densifies the merged list, dropping the interpolants of the cross-epoch gap.
pub fn densify_merged(merged: &MergedPoses, n: usize) -> Result<DensifiedPair> {
    if merged.split == 0 || merged.split >= merged.poses.len() {
        return Err(Error::Validation("merged sequence needs poses from both epochs".into()));
    }
    let mut out: [Vec<Pose>; 2] = [Vec::new(), Vec::new()];
    let mut filled_gaps = Vec::new();
    for i in 0..merged.poses.len() {
        let side = usize::from(i >= merged.split);
        out[side].push(merged.poses[i]);
        let next = i + 1;
        if next >= merged.poses.len() || next == merged.split {
            continue;
        }
        filled_gaps.push((i, next));
        for j in 1..=n {
            out[side].push(interpolate(&merged.poses[i], &merged.poses[next], j as f64 / (n + 1) as f64)?);
        }
    }
    let [before, after] = out;
    Ok(DensifiedPair {
        before: PoseSequence {
            poses: before,
            epoch: merged.epochs[0],
            n_interp: n,
        },
        after: PoseSequence {
            poses: after,
            epoch: merged.epochs[merged.split],
            n_interp: n,
        },
        filled_gaps,
    })
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    q: [f64; 4],
    t: [f64; 3],
    epoch: TimeStamp,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    interpolated: bool,
}

pub fn poses_to_json(seqs: &[&PoseSequence]) -> Result<String> {
    let records: Vec<PoseRecord> = seqs
        .iter()
        .flat_map(|s| {
            s.poses.iter().map(|p| PoseRecord {
                q: p.rotation.to_array(),
                t: p.translation,
                epoch: s.epoch,
                interpolated: p.source == PoseSource::Interpolated,
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

/// Parses a pose file into one sequence per epoch, in file order.
pub fn poses_from_json(text: &str) -> Result<(PoseSequence, PoseSequence)> {
    let records: Vec<PoseRecord> = serde_json::from_str(text)?;
    let mut before = PoseSequence::captured(vec![], TimeStamp::Before);
    let mut after = PoseSequence::captured(vec![], TimeStamp::After);
    for (i, r) in records.into_iter().enumerate() {
        let rotation = checked_unit(Quat::from(r.q), "pose")
            .map_err(|e| Error::Validation(format!("pose record {i}: {e}")))?;
        let pose = Pose {
            rotation,
            translation: r.t,
            source: if r.interpolated {
                PoseSource::Interpolated
            } else {
                PoseSource::Captured
            },
        };
        match r.epoch {
            TimeStamp::Before => before.poses.push(pose),
            TimeStamp::After => after.poses.push(pose),
        }
    }
    for seq in [&mut before, &mut after] {
        let interp = seq.poses.iter().filter(|p| p.source == PoseSource::Interpolated).count();
        let gaps = seq.len().saturating_sub(interp).saturating_sub(1);
        seq.n_interp = interp.checked_div(gaps).unwrap_or(0);
    }
    Ok((before, after))
}

pub fn save_poses(path: impl AsRef<Path>, seqs: &[&PoseSequence]) -> Result<()> {
    let text = poses_to_json(seqs)?;
    write_atomic(path.as_ref(), |f| f.write_all(text.as_bytes()))
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<(PoseSequence, PoseSequence)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    poses_from_json(&text).map_err(|e| Error::file(path, e.to_string()))
}

/// Angle between the optical axes of two poses, radians.
pub fn viewing_angle(a: &Pose, b: &Pose) -> f64 {
    let axis = |p: &Pose| transpose(&p.rotation.to_matrix())[2];
    dot(axis(a), axis(b)).clamp(-1.0, 1.0).acos()
}
