//! Synthetic desk scenes with known instance labels and known changes.
//!
//! A scene is a backdrop of flat blobs behind a few compact instance
//! clusters. Instances change by moving: disappearance sends the cluster far
//! beyond the far plane in the after epoch, appearance does the same in the
//! before epoch. Opacity is never deformed.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitBall};
use serde::{Deserialize, Serialize};

use super::{DeformationDelta, Gaussian, GaussianCloud, TimeStamp, ENCODING_DIM};
use crate::error::{Error, Result};
use crate::math::{add, norm, sub, Quat, Vec3};

/// Where removed instances are parked: well past any sensible far plane.
pub const OFFSTAGE: Vec3 = [0.0, 0.0, 1.0e3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ChangeKind {
    Disappear,
    Appear,
    Translate { offset: Vec3 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub center: Vec3,
    /// Radius of the ball the member centers are drawn from.
    pub radius: f64,
    pub gaussians: usize,
    /// Typical per-axis standard deviation of a member.
    pub sigma: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    #[serde(default)]
    pub change: Option<ChangeKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdropSpec {
    pub z: f64,
    pub half_width: f64,
    pub half_height: f64,
    pub cols: usize,
    pub rows: usize,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub instances: Vec<InstanceSpec>,
    pub backdrop: BackdropSpec,
    /// Adds one elongated Gaussian that belongs to the first changed instance
    /// but stretches behind its nearest unchanged neighbour.
    #[serde(default)]
    pub shared_gaussian: bool,
    /// Std of small after-epoch deltas given to every unchanged Gaussian.
    #[serde(default)]
    pub jitter: f64,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.2, 0.15],
    [0.15, 0.6, 0.85],
    [0.25, 0.75, 0.3],
    [0.9, 0.75, 0.15],
    [0.6, 0.3, 0.8],
    [0.95, 0.5, 0.7],
];

impl SceneSpec {
    /// Four instances on a 2×2 layout in front of a backdrop, one disappearing.
    pub fn acceptance() -> Self {
        let centers = [[-0.9, -0.65, 0.0], [0.9, -0.65, 0.05], [-0.9, 0.65, -0.05], [0.9, 0.65, 0.0]];
        let instances = centers
            .iter()
            .enumerate()
            .map(|(i, &center)| InstanceSpec {
                center,
                radius: 0.33,
                gaussians: 25,
                sigma: 0.13,
                color: PALETTE[i],
                opacity: 0.9,
                change: (i == 0).then_some(ChangeKind::Disappear),
            })
            .collect();
        SceneSpec {
            instances,
            backdrop: BackdropSpec {
                z: 1.2,
                half_width: 3.2,
                half_height: 2.4,
                cols: 8,
                rows: 6,
                opacity: 0.95,
            },
            shared_gaussian: false,
            jitter: 0.0,
        }
    }

    /// The acceptance layout with nothing changed.
    pub fn no_change() -> Self {
        let mut spec = SceneSpec::acceptance();
        spec.instances.iter_mut().for_each(|i| i.change = None);
        spec
    }

    /// The acceptance layout plus a Gaussian shared between the changed
    /// instance and its neighbour, and small deltas on everything else.
    pub fn adversarial() -> Self {
        SceneSpec {
            shared_gaussian: true,
            jitter: 0.01,
            ..SceneSpec::acceptance()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.instances.is_empty() {
            problems.push("scene needs at least one instance".to_string());
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.gaussians == 0 {
                problems.push(format!("instance {i} has zero gaussians"));
            }
            if !(inst.radius >= 0.0 && inst.sigma > 0.0) {
                problems.push(format!("instance {i} needs radius >= 0 and sigma > 0"));
            }
            if !(0.0..=1.0).contains(&inst.opacity) || inst.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                problems.push(format!("instance {i} has opacity or color outside [0, 1]"));
            }
        }
        let b = &self.backdrop;
        if b.cols * b.rows == 0 {
            problems.push("backdrop needs at least one blob".to_string());
        }
        if !(b.half_width > 0.0 && b.half_height > 0.0) || !(0.0..=1.0).contains(&b.opacity) {
            problems.push("backdrop extents must be positive and opacity in [0, 1]".to_string());
        }
        if self.shared_gaussian {
            let changed = self.instances.iter().filter(|i| i.change.is_some()).count();
            if changed == 0 || changed == self.instances.len() {
                problems.push("shared gaussian needs a changed and an unchanged instance".to_string());
            }
        }
        if !(self.jitter >= 0.0) {
            problems.push("jitter must be non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Instance ids are 1-based in spec order; background is 0.
pub fn instance_id(index: usize) -> u32 {
    index as u32 + 1
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let q = Quat::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
        if let Some(u) = q.normalized() {
            return u;
        }
    }
}

fn change_deltas(change: ChangeKind) -> (DeformationDelta, DeformationDelta) {
    match change {
        ChangeKind::Disappear => (DeformationDelta::ZERO, DeformationDelta::translation(OFFSTAGE)),
        ChangeKind::Appear => (DeformationDelta::translation(OFFSTAGE), DeformationDelta::ZERO),
        ChangeKind::Translate { offset } => (DeformationDelta::ZERO, DeformationDelta::translation(offset)),
    }
}

/// Builds the scene and returns it with the set of changed instance ids.
pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<(GaussianCloud, BTreeSet<u32>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    let mut gaussians = Vec::new();
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut changed = BTreeSet::new();

    let b = &spec.backdrop;
    let (cell_w, cell_h) = (2.0 * b.half_width / b.cols as f64, 2.0 * b.half_height / b.rows as f64);
    for r in 0..b.rows {
        for c in 0..b.cols {
            let grey = 0.35 + 0.2 * rng.random::<f64>();
            gaussians.push(Gaussian {
                position: [
                    -b.half_width + (c as f64 + 0.5) * cell_w,
                    -b.half_height + (r as f64 + 0.5) * cell_h,
                    b.z,
                ],
                scale: [0.6 * cell_w, 0.6 * cell_h, 0.02],
                rotation: Quat::IDENTITY,
                opacity: b.opacity,
                color: [grey, grey * 0.95, grey * 0.9],
                instance_id: 0,
                class_encoding: [0.0; ENCODING_DIM],
            });
            before.push(DeformationDelta::ZERO);
            after.push(DeformationDelta::ZERO);
        }
    }

    for (i, inst) in spec.instances.iter().enumerate() {
        let id = instance_id(i);
        let (d_before, d_after) = inst.change.map(change_deltas).unwrap_or_default();
        if inst.change.is_some() {
            changed.insert(id);
        }
        for _ in 0..inst.gaussians {
            let offset: [f64; 3] = UnitBall.sample(&mut rng);
            let scale: [f64; 3] = std::array::from_fn(|_| inst.sigma * (0.15 * unit.sample(&mut rng)).exp());
            let color = inst.color.map(|c| (c + 0.03 * unit.sample(&mut rng)).clamp(0.0, 1.0));
            let opacity = (inst.opacity + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
            gaussians.push(Gaussian {
                position: add(inst.center, offset.map(|v| v * inst.radius)),
                scale,
                rotation: random_rotation(&mut rng),
                opacity,
                color,
                instance_id: id,
                class_encoding: [0.0; ENCODING_DIM],
            });
            before.push(d_before);
            after.push(d_after);
        }
    }

    if spec.shared_gaussian {
        let (a_idx, a) = spec
            .instances
            .iter()
            .enumerate()
            .find(|(_, i)| i.change.is_some())
            .expect("validated");
        let (_, nb) = spec
            .instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.change.is_none())
            .min_by(|(_, x), (_, y)| {
                norm(sub(x.center, a.center)).total_cmp(&norm(sub(y.center, a.center)))
            })
            .expect("validated");
        let ab = sub(nb.center, a.center);
        let span = (ab[0] * ab[0] + ab[1] * ab[1]).sqrt();
        let heading = ab[1].atan2(ab[0]);
        let (d_before, d_after) = a.change.map(change_deltas).unwrap();
        gaussians.push(Gaussian {
            position: [
                a.center[0] + 0.75 * ab[0],
                a.center[1] + 0.75 * ab[1],
                a.center[2].max(nb.center[2]) + nb.radius + 0.2,
            ],
            scale: [0.45 * span, nb.radius, 0.05],
            rotation: Quat::from_axis_angle([0.0, 0.0, 1.0], heading),
            opacity: 0.95,
            color: a.color.map(|c| 0.8 * c),
            instance_id: instance_id(a_idx),
            class_encoding: [0.0; ENCODING_DIM],
        });
        before.push(d_before);
        after.push(d_after);
    }

    if spec.jitter > 0.0 {
        let jitter = Normal::new(0.0, spec.jitter).unwrap();
        for (i, g) in gaussians.iter().enumerate() {
            if g.instance_id != 0 && changed.contains(&g.instance_id) {
                continue;
            }
            let axis = std::array::from_fn(|_| unit.sample(&mut rng));
            after[i] = DeformationDelta {
                d_position: std::array::from_fn(|_| jitter.sample(&mut rng)),
                d_rotation: Quat::from_axis_angle(axis, jitter.sample(&mut rng)),
                d_scale: std::array::from_fn(|_| jitter.sample(&mut rng)),
            };
        }
    }

    let n = gaussians.len();
    let mut cloud = GaussianCloud::new(gaussians);
    cloud.deltas.before = before;
    cloud.deltas.after = after;
    debug_assert_eq!(cloud.deltas.after.len(), n);
    cloud.validate()?;
    Ok((cloud, changed))
}

/// Index of the shared Gaussian in a scene built with `shared_gaussian`.
pub fn shared_gaussian_index(cloud: &GaussianCloud) -> usize {
    cloud.len() - 1
}

/// Indices of Gaussians belonging to changed instances.
pub fn changed_gaussians(cloud: &GaussianCloud, changed: &BTreeSet<u32>) -> BTreeSet<usize> {
    cloud
        .gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| changed.contains(&g.instance_id))
        .map(|(i, _)| i)
        .collect()
}

/// True when the Gaussian has a nonzero delta at either epoch.
pub fn is_deformed(cloud: &GaussianCloud, i: usize) -> bool {
    TimeStamp::ALL.iter().any(|&t| !cloud.deltas.get(t)[i].is_zero())
}
