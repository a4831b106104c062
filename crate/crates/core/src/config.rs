//! Pipeline configuration: a TOML file, `key=value` overrides and presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::DeltaThresholds;
use crate::error::{Error, Result};
use crate::partition::{Optimizer, TrainConfig};
use crate::rasterizer::Intrinsics;
use crate::scene::synthetic::SceneSpec;
use crate::scene::TimeStamp;
use crate::segmentation::{DetectConfig, DiffOptions, DEFAULT_MIN_PIXELS, DEFAULT_PERSIST_K};

pub const OUT_ENV: &str = "GSDIFF_OUT";
pub const PRESETS: [&str; 3] = ["acceptance", "adversarial", "no_change"];

/// Exactly one of `preset`, `cloud` or `spec`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub preset: Option<String>,
    pub cloud: Option<PathBuf>,
    pub spec: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 64,
            height: 64,
            focal: 70.0,
            near: 0.1,
            far: 100.0,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            near: self.near,
            far: self.far,
            ..Intrinsics::centered(self.width, self.height, self.focal)
        }
    }
}

/// Camera paths around the scene. Captures sweep an azimuth arc at a fixed
/// elevation (above for the before epoch, below for after); held-out views
/// sit between the two sweeps, closer in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub poses_per_epoch: usize,
    pub distance: f64,
    pub arc_deg: f64,
    pub elevation_deg: f64,
    pub eval_views: usize,
    pub eval_distance: f64,
    pub eval_arc_deg: f64,
    /// Captured poses for both epochs; replaces the generated sweeps.
    pub poses: Option<PathBuf>,
    /// Held-out poses; replaces the generated held-out views.
    pub eval_poses: Option<PathBuf>,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            poses_per_epoch: 20,
            distance: 4.0,
            arc_deg: 25.0,
            elevation_deg: 8.0,
            eval_views: 10,
            eval_distance: 3.7,
            eval_arc_deg: 20.0,
            poses: None,
            eval_poses: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationSource {
    #[default]
    Oracle,
    Ingest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub source: SegmentationSource,
    /// Directory holding `manifest.json` and the ID maps it lists.
    pub ingest_dir: Option<PathBuf>,
    pub min_pixels: usize,
    pub persist_k: usize,
    pub moved_iou: Option<f64>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            source: SegmentationSource::Oracle,
            ingest_dir: None,
            min_pixels: DEFAULT_MIN_PIXELS,
            persist_k: DEFAULT_PERSIST_K,
            moved_iou: None,
        }
    }
}

impl SegmentationConfig {
    pub fn detect(&self) -> DetectConfig {
        DetectConfig {
            min_pixels: self.min_pixels,
            persist_k: self.persist_k,
            diff: DiffOptions {
                moved_iou: self.moved_iou,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub pos_thresh: f64,
    pub rot_thresh: f64,
    pub scale_thresh: f64,
    pub grid_steps: usize,
    pub pos_range: [f64; 2],
    /// Shared by the rotation and scale thresholds.
    pub rot_scale_range: [f64; 2],
}

impl BaselineConfig {
    pub fn thresholds(&self) -> DeltaThresholds {
        DeltaThresholds {
            pos_thresh: self.pos_thresh,
            rot_thresh: self.rot_thresh,
            scale_thresh: self.scale_thresh,
        }
    }
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let t = DeltaThresholds::default();
        BaselineConfig {
            pos_thresh: t.pos_thresh,
            rot_thresh: t.rot_thresh,
            scale_thresh: t.scale_thresh,
            grid_steps: 5,
            pos_range: [0.002, 0.5],
            rot_scale_range: [0.002, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub n_interp: usize,
    /// Partition threshold on the changed-class probability.
    pub tau: f64,
    /// Epoch at which held-out views are rendered and scored.
    pub eval_epoch: TimeStamp,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub rig: RigConfig,
    pub segmentation: SegmentationConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            out_dir: PathBuf::from("gsdiff-out"),
            n_interp: crate::pose_interp::DEFAULT_N_INTERP,
            tau: 0.5,
            eval_epoch: TimeStamp::Before,
            scene: SceneConfig {
                preset: Some("acceptance".into()),
                ..SceneConfig::default()
            },
            camera: CameraConfig::default(),
            rig: RigConfig::default(),
            segmentation: SegmentationConfig::default(),
            train: TrainConfig {
                optimizer: Optimizer::Adam,
                ..TrainConfig::default()
            },
            baseline: BaselineConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside a TOML table, creating sub-tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// The default configuration with the named scene preset.
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = PipelineConfig {
            scene: SceneConfig {
                preset: Some(name.to_string()),
                ..SceneConfig::default()
            },
            ..PipelineConfig::default()
        };
        cfg.scene_spec()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides, then deserializes.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // A file naming a scene source replaces the default preset rather than adding to it.
        if let Some(scene) = table.get_mut("scene").and_then(|s| s.as_table_mut()) {
            if !scene.contains_key("preset") && (scene.contains_key("cloud") || scene.contains_key("spec")) {
                scene.insert("preset".into(), toml::Value::String(String::new()));
            }
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.scene.preset.as_deref() == Some("") {
            cfg.scene.preset = None;
        }
        Ok(cfg)
    }

    /// Reads the optional config file, applies overrides and `GSDIFF_OUT`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::file(p, e.to_string()))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_with(&text, overrides)?;
        if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            cfg.out_dir = PathBuf::from(out);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The generator spec, when the scene is synthetic.
    pub fn scene_spec(&self) -> Result<Option<SceneSpec>> {
        if let Some(spec) = &self.scene.spec {
            return Ok(Some(spec.clone()));
        }
        match self.scene.preset.as_deref() {
            None => Ok(None),
            Some("acceptance") => Ok(Some(SceneSpec::acceptance())),
            Some("adversarial") => Ok(Some(SceneSpec::adversarial())),
            Some("no_change") => Ok(Some(SceneSpec::no_change())),
            Some(other) => Err(Error::Config(format!(
                "unknown scene preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    /// Collects every problem before failing.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut nested = |r: Result<()>, what: &str| match r {
            Ok(()) => {}
            Err(Error::InvalidConfig(list)) => problems.extend(list.into_iter().map(|p| format!("{what}: {p}"))),
            Err(e) => problems.push(format!("{what}: {e}")),
        };
        nested(self.train.validate(), "train");
        nested(self.baseline.thresholds().validate(), "baseline");
        nested(self.camera.intrinsics().validate(), "camera");
        if let Some(spec) = &self.scene.spec {
            nested(spec.validate(), "scene.spec");
        }

        let sources = [self.scene.preset.is_some(), self.scene.cloud.is_some(), self.scene.spec.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if sources != 1 {
            problems.push(format!(
                "scene: exactly one of preset, cloud, spec must be set ({sources} given)"
            ));
        }
        if let Some(p) = &self.scene.preset {
            if !PRESETS.contains(&p.as_str()) {
                problems.push(format!("scene.preset {p:?} is not one of {PRESETS:?}"));
            }
        }
        for (what, path) in [
            ("scene.cloud", &self.scene.cloud),
            ("rig.poses", &self.rig.poses),
            ("rig.eval_poses", &self.rig.eval_poses),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    problems.push(format!("{what}: {} does not exist", p.display()));
                }
            }
        }
        match (self.segmentation.source, &self.segmentation.ingest_dir) {
            (SegmentationSource::Oracle, Some(_)) => {
                problems.push("segmentation: ingest_dir is set but source is oracle".into())
            }
            (SegmentationSource::Ingest, None) => {
                problems.push("segmentation: source is ingest but ingest_dir is missing".into())
            }
            (SegmentationSource::Ingest, Some(d)) if !d.join("manifest.json").is_file() => {
                problems.push(format!("segmentation: {} has no manifest.json", d.display()))
            }
            _ => {}
        }
        if self.segmentation.persist_k == 0 {
            problems.push("segmentation.persist_k must be >= 1".into());
        }
        if let Some(t) = self.segmentation.moved_iou {
            if !(0.0..=1.0).contains(&t) {
                problems.push(format!("segmentation.moved_iou {t} must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            problems.push(format!("tau {} must lie in [0, 1]", self.tau));
        }
        let rig = &self.rig;
        if rig.poses.is_none() && rig.poses_per_epoch == 0 {
            problems.push("rig.poses_per_epoch must be >= 1".into());
        }
        if rig.eval_poses.is_none() && rig.eval_views == 0 {
            problems.push("rig.eval_views must be >= 1".into());
        }
        if !(rig.distance > 0.0 && rig.eval_distance > 0.0) {
            problems.push("rig distances must be positive".into());
        }
        let b = &self.baseline;
        if b.grid_steps == 0 {
            problems.push("baseline.grid_steps must be >= 1".into());
        }
        for (what, r) in [("pos_range", b.pos_range), ("rot_scale_range", b.rot_scale_range)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                problems.push(format!("baseline.{what} {r:?} must satisfy 0 < lo <= hi"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}
