//! Run configuration: TOML with per-mode defaults and cross-field validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, NonFinitePolicy, OptimizerKind};
use crate::backbone::{BackboneConfig, FusionPlacement};
use crate::data::{Mode, ObjectSynthConfig, SceneSynthConfig, ViewConfig};
use crate::error::{Error, Result};
use crate::fusion::DEFAULT_VOXEL;
use crate::gaussians::DecodeConfig;
use crate::image_branch::FrozenExtractorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ObjectFeature,
    ScenePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Voxel edge for point fusion, in scene units.
    pub voxel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: FrozenExtractorConfig,
    pub adapt_hidden: usize,
    pub head_hidden: usize,
    pub decode: DecodeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor: FrozenExtractorConfig::default(),
            adapt_hidden: 64,
            head_hidden: 64,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Step,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub decay: f64,
    /// Epochs between decays.
    pub every: usize,
}

impl Schedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::Step => crate::autodiff::step_lr(epoch, base, self.decay, self.every),
            ScheduleKind::Constant => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops training after this many optimizer steps when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub checkpoint_every: u64,
    pub non_finite: NonFinitePolicy,
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            kind: self.kind,
            weight_decay: self.weight_decay,
            non_finite: self.non_finite,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub w_fg: f64,
    pub w_bg: f64,
    pub background: [f64; 3],
    pub fg_dilation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub object: ObjectSynthConfig,
    pub scene: SceneSynthConfig,
}

/// Training-time augmentation, off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Draw a random RGB channel permutation per sample and step, applied to
    /// reference and target images alike.
    pub channel_shuffle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub views: ViewConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        match mode {
            Mode::Object => Self::object_defaults(),
            Mode::Scene => Self::scene_defaults(),
        }
    }

    /// Adam 1e-4 with StepLR (×0.9 every 10 epochs), batch 32, 50 epochs,
    /// one reference and four render views, ω_fg = 4, ω_bg = 1.
    pub fn object_defaults() -> Self {
        Self {
            mode: Mode::Object,
            seed: 0,
            fusion: FusionConfig {
                mode: FusionMode::ObjectFeature,
                voxel: DEFAULT_VOXEL,
            },
            backbone: BackboneConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-4,
                schedule: Schedule {
                    kind: ScheduleKind::Step,
                    decay: 0.9,
                    every: 10,
                },
                weight_decay: 0.0,
                batch_size: 32,
                epochs: 50,
                max_steps: None,
                checkpoint_every: 100,
                non_finite: NonFinitePolicy::Fail,
            },
            loss: LossConfig {
                w_fg: 4.0,
                w_bg: 1.0,
                background: [1.0; 3],
                fg_dilation: 2,
            },
            views: ViewConfig::object(),
            augment: AugmentConfig::default(),
            data: DataConfig {
                n_samples: 8,
                object: ObjectSynthConfig::default(),
                scene: SceneSynthConfig::default(),
            },
            paths: PathsConfig {
                dataset: PathBuf::from("data/object"),
                output: PathBuf::from("runs/object"),
            },
        }
    }

    /// AdamW 1e-4 with weight decay 0.01 and a constant schedule, batch 8,
    /// 100 epochs, eight bins with one reference each and eight render views
    /// within four stream steps, point fusion at the first encoder stage.
    pub fn scene_defaults() -> Self {
        let mut c = Self::object_defaults();
        c.mode = Mode::Scene;
        c.fusion.mode = FusionMode::ScenePoint;
        c.backbone.placement = FusionPlacement::EncoderFirst;
        c.optimizer.kind = OptimizerKind::AdamW;
        c.optimizer.weight_decay = 0.01;
        c.optimizer.schedule.kind = ScheduleKind::Constant;
        c.optimizer.batch_size = 8;
        c.optimizer.epochs = 100;
        c.views = ViewConfig::scene();
        c.paths = PathsConfig {
            dataset: PathBuf::from("data/scene"),
            output: PathBuf::from("runs/scene"),
        };
        c
    }

    pub fn fusion_active(&self) -> bool {
        self.backbone.placement != FusionPlacement::None
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.model.extractor.validate()?;
        self.model.decode.validate()?;
        self.views.validate(self.mode)?;
        let placement = self.backbone.placement;
        match (self.fusion.mode, placement) {
            (FusionMode::ObjectFeature, FusionPlacement::EncoderFirst) => {
                return Err(Error::Config(
                    "object_feature fusion cannot use the encoder_first placement".into(),
                ))
            }
            (FusionMode::ScenePoint, p) if p != FusionPlacement::EncoderFirst && p != FusionPlacement::None => {
                return Err(Error::Config(format!(
                    "scene_point fusion needs the encoder_first placement, got {p:?}"
                )))
            }
            _ => {}
        }
        if placement == FusionPlacement::EncoderFirst && self.mode != Mode::Scene {
            return Err(Error::Config("point fusion needs depth maps, which only scene mode provides".into()));
        }
        if !(self.fusion.voxel > 0.0) {
            return Err(Error::Config(format!("fusion.voxel must be positive, got {}", self.fusion.voxel)));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if o.batch_size == 0 || o.epochs == 0 || o.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, epochs and checkpoint_every must be positive".into()));
        }
        if o.weight_decay < 0.0 || !(o.schedule.decay > 0.0) || o.schedule.every == 0 {
            return Err(Error::Config("invalid weight decay or schedule".into()));
        }
        let l = &self.loss;
        if l.w_fg < 0.0 || l.w_bg < 0.0 || l.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("loss weights must be non-negative and background in [0, 1]".into()));
        }
        if self.model.adapt_hidden == 0 || self.model.head_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.data.n_samples == 0 {
            return Err(Error::Config("data.n_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Parses a possibly partial TOML document over the defaults of its `mode`
    /// (object when absent), then validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mode = match overrides.get("mode") {
            None => Mode::Object,
            Some(v) => v
                .clone()
                .try_into::<Mode>()
                .map_err(|e| Error::Config(format!("mode: {e}")))?,
        };
        let mut base: toml::Table =
            toml::from_str(&Self::defaults(mode).to_toml_string()).expect("defaults parse");
        merge(&mut base, overrides);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        for mode in [Mode::Object, Mode::Scene] {
            let c = RunConfig::defaults(mode);
            c.validate().unwrap();
            let text = c.to_toml_string();
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        }
    }

    #[test]
    fn partial_toml_overrides_mode_defaults() {
        let c = RunConfig::from_toml_str("mode = \"scene\"\n[optimizer]\nbatch_size = 2\n").unwrap();
        assert_eq!(c.optimizer.batch_size, 2);
        assert_eq!(c.optimizer.kind, OptimizerKind::AdamW);
        assert_eq!(c.views.bins, 8);
        assert!(matches!(RunConfig::from_toml_str("[optimizer]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("mode = \"planet\"\n"), Err(Error::Config(_))));
    }

    #[test]
    fn cross_field_rules() {
        let mut c = RunConfig::object_defaults();
        c.backbone.placement = FusionPlacement::EncoderFirst;
        assert!(c.validate().is_err());
        let mut c = RunConfig::scene_defaults();
        c.backbone.placement = FusionPlacement::DecoderLast;
        assert!(c.validate().is_err());
        c.backbone.placement = FusionPlacement::None;
        c.validate().unwrap();
        let mut c = RunConfig::object_defaults();
        c.optimizer.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_schedule() {
        let s = RunConfig::object_defaults().optimizer.schedule;
        assert_eq!(s.lr(1e-4, 9), 1e-4);
        assert!((s.lr(1e-4, 10) - 0.9e-4).abs() < 1e-18);
        assert!((s.lr(1e-4, 25) - 0.81e-4).abs() < 1e-18);
        let c = RunConfig::scene_defaults().optimizer.schedule;
        assert_eq!(c.lr(1e-4, 99), 1e-4);
    }
}
