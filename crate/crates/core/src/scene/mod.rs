//! Deformable Gaussian scene representation.
//!
//! A [`GaussianCloud`] holds one canonical set of Gaussians plus two
//! per-Gaussian deformation tables, one per capture epoch. Querying the
//! scene at an epoch means applying that epoch's table with [`deform`].

mod container;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{add, Quat, Vec3};
use crate::partition::ChangeHead;

pub use container::{load_cloud, read_cloud, save_cloud, save_cloud_json, write_cloud, CLOUD_MAGIC, CLOUD_VERSION};

/// Width of the per-Gaussian classification encoding.
pub const ENCODING_DIM: usize = 16;

pub type Encoding = [f64; ENCODING_DIM];

/// The two capture epochs the scene is queried at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeStamp {
    Before,
    After,
}

impl TimeStamp {
    pub const ALL: [TimeStamp; 2] = [TimeStamp::Before, TimeStamp::After];

    pub fn as_str(self) -> &'static str {
        match self {
            TimeStamp::Before => "before",
            TimeStamp::After => "after",
        }
    }

    pub fn other(self) -> TimeStamp {
        match self {
            TimeStamp::Before => TimeStamp::After,
            TimeStamp::After => TimeStamp::Before,
        }
    }
}

impl std::fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TimeStamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(TimeStamp::Before),
            "after" => Ok(TimeStamp::After),
            other => Err(Error::Validation(format!(
                "unknown epoch {other:?} (expected \"before\" or \"after\")"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vec3,
    /// Standard deviations along the local axes; strictly positive.
    pub scale: Vec3,
    pub rotation: Quat,
    pub opacity: f64,
    /// View-independent RGB.
    pub color: [f64; 3],
    /// Ground-truth instance label, 0 for background. Only synthetic scenes set it.
    pub instance_id: u32,
    pub class_encoding: Encoding,
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        let finite = self.position.iter().chain(&self.scale).chain(&self.color).all(|v| v.is_finite())
            && self.rotation.is_finite()
            && self.opacity.is_finite()
            && self.class_encoding.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite Gaussian attribute".into()));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "rotation norm {} is not unit",
                self.rotation.norm()
            )));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation(format!("non-positive scale {:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Validation(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation(format!("color {:?} outside [0, 1]", self.color)));
        }
        Ok(())
    }
}

/// Per-Gaussian offset applied at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationDelta {
    pub d_position: Vec3,
    /// Rotation increment, normalized before use and applied on the left.
    pub d_rotation: Quat,
    /// Additive offset in log-scale space.
    pub d_scale: Vec3,
}

impl Default for DeformationDelta {
    fn default() -> Self {
        DeformationDelta::ZERO
    }
}

impl DeformationDelta {
    pub const ZERO: DeformationDelta = DeformationDelta {
        d_position: [0.0; 3],
        d_rotation: Quat::IDENTITY,
        d_scale: [0.0; 3],
    };

    pub fn translation(d: Vec3) -> Self {
        DeformationDelta {
            d_position: d,
            ..DeformationDelta::ZERO
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == DeformationDelta::ZERO
    }

    /// Applies this delta to one Gaussian. The zero delta returns an exact copy.
    pub fn apply(&self, g: &Gaussian) -> Gaussian {
        if self.is_zero() {
            return g.clone();
        }
        let dq = self.d_rotation.normalized().unwrap_or(Quat::IDENTITY);
        let rotation = (dq * g.rotation).normalized().unwrap_or(g.rotation);
        Gaussian {
            position: add(g.position, self.d_position),
            scale: [
                g.scale[0] * self.d_scale[0].exp(),
                g.scale[1] * self.d_scale[1].exp(),
                g.scale[2] * self.d_scale[2].exp(),
            ],
            rotation,
            ..g.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionLabel {
    Unchanged,
    Changed,
    #[default]
    Unassigned,
}

impl PartitionLabel {
    pub fn to_u8(self) -> u8 {
        match self {
            PartitionLabel::Unchanged => 0,
            PartitionLabel::Changed => 1,
            PartitionLabel::Unassigned => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PartitionLabel::Unchanged),
            1 => Some(PartitionLabel::Changed),
            2 => Some(PartitionLabel::Unassigned),
            _ => None,
        }
    }
}

/// Both epochs' delta tables. A table shorter than the Gaussian list is
/// treated as missing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaTables {
    pub before: Vec<DeformationDelta>,
    pub after: Vec<DeformationDelta>,
}

impl DeltaTables {
    pub fn zeros(n: usize) -> Self {
        DeltaTables {
            before: vec![DeformationDelta::ZERO; n],
            after: vec![DeformationDelta::ZERO; n],
        }
    }

    pub fn get(&self, t: TimeStamp) -> &[DeformationDelta] {
        match t {
            TimeStamp::Before => &self.before,
            TimeStamp::After => &self.after,
        }
    }

    pub fn get_mut(&mut self, t: TimeStamp) -> &mut Vec<DeformationDelta> {
        match t {
            TimeStamp::Before => &mut self.before,
            TimeStamp::After => &mut self.after,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub deltas: DeltaTables,
    pub partition: Vec<PartitionLabel>,
    /// Trained change head, present once the cloud has been partitioned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<ChangeHead>,
}

impl GaussianCloud {
    /// Cloud with zero deltas and every Gaussian unassigned.
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let n = gaussians.len();
        GaussianCloud {
            gaussians,
            deltas: DeltaTables::zeros(n),
            partition: vec![PartitionLabel::Unassigned; n],
            head: None,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::Validation(format!("gaussian {i}: {e}")))?;
        }
        for t in TimeStamp::ALL {
            if self.deltas.get(t).len() != self.len() {
                return Err(Error::Validation(format!(
                    "{t} delta table has {} entries for {} gaussians",
                    self.deltas.get(t).len(),
                    self.len()
                )));
            }
        }
        if self.partition.len() != self.len() {
            return Err(Error::Validation(format!(
                "partition has {} labels for {} gaussians",
                self.partition.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn encodings(&self) -> Vec<Encoding> {
        self.gaussians.iter().map(|g| g.class_encoding).collect()
    }

    pub fn set_encodings(&mut self, encodings: &[Encoding]) {
        assert_eq!(encodings.len(), self.len());
        for (g, e) in self.gaussians.iter_mut().zip(encodings) {
            g.class_encoding = *e;
        }
    }

    /// Indices of Gaussians carrying the given instance label.
    pub fn instance_members(&self, id: u32) -> Vec<usize> {
        self.gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| g.instance_id == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sub-cloud holding only the listed Gaussians, in the given order.
    pub fn subset(&self, indices: &[usize]) -> GaussianCloud {
        let pick = |v: &[DeformationDelta]| indices.iter().map(|&i| v[i]).collect();
        GaussianCloud {
            gaussians: indices.iter().map(|&i| self.gaussians[i].clone()).collect(),
            deltas: DeltaTables {
                before: pick(&self.deltas.before),
                after: pick(&self.deltas.after),
            },
            partition: indices.iter().map(|&i| self.partition[i]).collect(),
            head: self.head.clone(),
        }
    }
}

/// The cloud as it appears at epoch `t`.
pub fn deform(cloud: &GaussianCloud, t: TimeStamp) -> Result<GaussianCloud> {
    let table = cloud.deltas.get(t);
    if table.len() != cloud.len() {
        return Err(Error::Config(format!(
            "no {t} delta table for {} gaussians (found {} entries)",
            cloud.len(),
            table.len()
        )));
    }
    let gaussians = cloud
        .gaussians
        .iter()
        .zip(table)
        .map(|(g, d)| d.apply(g))
        .collect();
    Ok(GaussianCloud {
        gaussians,
        ..cloud.clone()
    })
}
