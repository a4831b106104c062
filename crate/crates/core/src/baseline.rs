//! Naive change detector: select Gaussians whose after-epoch deformation
//! exceeds a threshold and render only those.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::Mask;
use crate::math::norm;
use crate::rasterizer::{render_view, Camera};
use crate::scene::{DeformationDelta, GaussianCloud, TimeStamp};

pub const ALPHA_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaThresholds {
    pub pos_thresh: f64,
    /// Radians.
    pub rot_thresh: f64,
    /// Log-scale units.
    pub scale_thresh: f64,
}

impl Default for DeltaThresholds {
    fn default() -> Self {
        DeltaThresholds {
            pos_thresh: 0.05,
            rot_thresh: 0.05,
            scale_thresh: 0.05,
        }
    }
}

impl DeltaThresholds {
    pub fn validate(&self) -> Result<()> {
        let problems: Vec<String> = [
            ("pos_thresh", self.pos_thresh),
            ("rot_thresh", self.rot_thresh),
            ("scale_thresh", self.scale_thresh),
        ]
        .iter()
        .filter(|(_, v)| !(*v >= 0.0 && v.is_finite()))
        .map(|(name, v)| format!("{name} {v} must be finite and non-negative"))
        .collect();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn selects(&self, d: &DeformationDelta) -> bool {
        norm(d.d_position) > self.pos_thresh
            || d.d_rotation.normalized().map_or(0.0, |q| q.angle()) > self.rot_thresh
            || norm(d.d_scale) > self.scale_thresh
    }
}

/// Indices of Gaussians whose after-epoch delta crosses any threshold.
pub fn filter_by_delta(cloud: &GaussianCloud, th: &DeltaThresholds) -> Result<BTreeSet<usize>> {
    let table = cloud.deltas.get(TimeStamp::After);
    if table.len() != cloud.len() {
        return Err(Error::Config(format!(
            "after delta table has {} entries for {} gaussians",
            table.len(),
            cloud.len()
        )));
    }
    Ok(table
        .iter()
        .enumerate()
        .filter(|(_, d)| th.selects(d))
        .map(|(i, _)| i)
        .collect())
}

/// Renders the selected subset and thresholds its alpha.
pub fn render_baseline_change_map(cloud: &GaussianCloud, selected: &BTreeSet<usize>, t: TimeStamp, cam: &Camera) -> Result<Mask> {
    let indices: Vec<usize> = selected.iter().copied().collect();
    if let Some(&bad) = indices.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::Validation(format!("selected gaussian {bad} out of range")));
    }
    let bundle = render_view(&cloud.subset(&indices), t, cam)?;
    Ok(bundle.alpha.map(|&a| a > ALPHA_THRESHOLD))
}

/// The `steps × steps` grid: position threshold on one axis, rotation and
/// scale thresholds (tied) on the other, both spaced geometrically.
pub fn threshold_grid(pos: (f64, f64), rot_scale: (f64, f64), steps: usize) -> Vec<DeltaThresholds> {
    let geo = |(lo, hi): (f64, f64), i: usize| {
        if steps <= 1 {
            lo
        } else {
            lo * (hi / lo).powf(i as f64 / (steps - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(steps * steps);
    for i in 0..steps {
        for j in 0..steps {
            let r = geo(rot_scale, j);
            out.push(DeltaThresholds {
                pos_thresh: geo(pos, i),
                rot_thresh: r,
                scale_thresh: r,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;
    use crate::scene::Gaussian;

    fn cloud(n: usize) -> GaussianCloud {
        let g = Gaussian {
            position: [0.0, 0.0, 3.0],
            scale: [0.2; 3],
            rotation: Quat::IDENTITY,
            opacity: 0.9,
            color: [1.0; 3],
            instance_id: 1,
            class_encoding: [0.0; 16],
        };
        GaussianCloud::new(vec![g; n])
    }

    #[test]
    fn zero_deltas_select_nothing() {
        assert!(filter_by_delta(&cloud(4), &DeltaThresholds::default()).unwrap().is_empty());
    }

    #[test]
    fn translation_crosses_threshold() {
        let mut c = cloud(3);
        c.deltas.after[1] = DeformationDelta::translation([0.3, 0.4, 0.0]);
        let th = DeltaThresholds {
            pos_thresh: 0.1,
            ..Default::default()
        };
        assert_eq!(filter_by_delta(&c, &th).unwrap(), BTreeSet::from([1]));
    }

    #[test]
    fn rotation_and_scale_criteria() {
        let mut c = cloud(3);
        c.deltas.after[0].d_rotation = Quat::from_axis_angle([0.0, 1.0, 0.0], 0.3);
        c.deltas.after[2].d_scale = [0.0, 0.2, 0.0];
        let th = DeltaThresholds {
            pos_thresh: 1.0,
            rot_thresh: 0.25,
            scale_thresh: 0.1,
        };
        assert_eq!(filter_by_delta(&c, &th).unwrap(), BTreeSet::from([0, 2]));
        let th = DeltaThresholds {
            rot_thresh: 0.35,
            ..th
        };
        assert_eq!(filter_by_delta(&c, &th).unwrap(), BTreeSet::from([2]));
    }

    #[test]
    fn empty_selection_renders_empty_mask() {
        let cam = Camera::new(
            crate::pose_interp::Pose::captured(Quat::IDENTITY, [0.0; 3]),
            crate::rasterizer::Intrinsics::centered(16, 12, 20.0),
        );
        let m = render_baseline_change_map(&cloud(2), &BTreeSet::new(), TimeStamp::Before, &cam).unwrap();
        assert_eq!(m.count(), 0);
        let m = render_baseline_change_map(&cloud(2), &BTreeSet::from([0, 1]), TimeStamp::Before, &cam).unwrap();
        assert!(m.count() > 0);
    }

    #[test]
    fn grid_shape() {
        let g = threshold_grid((0.01, 1.0), (0.01, 0.1), 5);
        assert_eq!(g.len(), 25);
        assert!((g[24].pos_thresh - 1.0).abs() < 1e-12);
        assert!((g[2].rot_thresh - 0.01 * 10f64.sqrt()).abs() < 1e-9);
    }
}
