//! Flat `key = value` run configuration.
//!
//! Keys are namespaced (`pretrain.`, `aug.`, `sampler.`, `model.`,
//! `finetune.`, `eval.`) plus the global `seed`. Values are layered:
//! built-in defaults, then the config file, then `--ns.key value` flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gaitlab_core::augment::{KernelShape, SpatialAugConfig};
use gaitlab_core::encoder::{EncoderConfig, PoolCombine};
use gaitlab_core::loss::TauMode;
use gaitlab_core::pretrain::PretrainConfig;
use gaitlab_core::transfer::{TransferConfig, TransferDataset};
use gaitlab_core::view::{SamplerConfig, ViewTrainConfig};
use gaitlab_core::{Error, Result};
use serde::Serialize;

/// Settings for view classification and the dumb-sequence sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSettings {
    pub sampler: SamplerConfig,
    /// Frames per classified window.
    pub window: usize,
    pub train: ViewTrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Pixel size of one heatmap cell.
    pub heatmap_cell_px: u32,
    /// Condition whose matrix `heatmap` draws; empty picks the first.
    pub heatmap_condition: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub model: EncoderConfig,
    pub aug: SpatialAugConfig,
    pub sampler: SamplerSettings,
    pub finetune: TransferConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_transfer_preset(TransferDataset::CasiaB)
    }
}

impl RunConfig {
    /// Defaults with the batch layout and schedules of `dataset` for the
    /// supervised phases.
    pub fn with_transfer_preset(dataset: TransferDataset) -> Self {
        let pretrain = PretrainConfig::default();
        Self {
            seed: 0,
            model: pretrain.model.clone(),
            aug: pretrain.aug.clone(),
            sampler: SamplerSettings {
                sampler: pretrain.sampler.clone(),
                window: 16,
                train: ViewTrainConfig::default(),
            },
            pretrain,
            finetune: TransferConfig::preset(dataset),
            eval: EvalSettings {
                heatmap_cell_px: 24,
                heatmap_condition: String::new(),
            },
        }
    }

    /// Pre-training configuration with the shared model, augmentation,
    /// sampler and seed settings folded in.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            model: self.model.clone(),
            aug: self.aug.clone(),
            sampler: self.sampler.sampler.clone(),
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            model: self.model.clone(),
            seed: self.seed,
            ..self.finetune.clone()
        }
    }

    pub fn view_train_config(&self) -> ViewTrainConfig {
        ViewTrainConfig {
            seed: self.seed,
            ..self.sampler.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_config().validate()?;
        self.transfer_config().validate()?;
        if self.sampler.window == 0 {
            return Err(Error::ParamOutOfRange {
                name: "sampler.window",
                value: "0".into(),
                range: ">= 1",
            });
        }
        if self.eval.heatmap_cell_px == 0 {
            return Err(Error::ParamOutOfRange {
                name: "eval.heatmap_cell_px",
                value: "0".into(),
                range: ">= 1",
            });
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        let entry = ENTRIES.iter().find(|e| e.key == key).ok_or_else(|| Error::UnknownKey {
            key: key.to_string(),
            line,
        })?;
        (entry.set)(self, value.trim()).map_err(|reason| Error::TypeError {
            key: key.to_string(),
            value: value.to_string(),
            line,
            reason,
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        ENTRIES.iter().find(|e| e.key == key).map(|e| (e.get)(self))
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::TypeError {
                key: line.to_string(),
                value: String::new(),
                line: Some(i + 1),
                reason: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value, Some(i + 1))?;
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for e in ENTRIES {
            let _ = writeln!(out, "{} = {}", e.key, (e.get)(self));
        }
        out
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        ENTRIES.iter().map(|e| e.key)
    }
}

/// Layers `path` (if any) and then `overrides` over `base`, and checks
/// value ranges.
pub fn load_config(base: RunConfig, path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(p) = path {
        cfg.apply_text(&fs::read_to_string(p)?)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v, None)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(u32, u64, usize, f64, bool, String);

fn render_enum<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_string)).unwrap_or_default()
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                render_enum(self)
            }
        }
    )*};
}
enum_value!(TauMode, PoolCombine, KernelShape);

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(T::parse).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

impl Value for [usize; 4] {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v = Vec::<usize>::parse(s)?;
        v.try_into().map_err(|v: Vec<usize>| format!("expected 4 values, got {}", v.len()))
    }
    fn render(&self) -> String {
        self.to_vec().render()
    }
}

struct Entry {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! entries {
    ($($key:literal => $($field:ident).+ : $t:ty),* $(,)?) => {
        &[$(Entry {
            key: $key,
            get: |c| Value::render(&c.$($field).+),
            set: |c, v| {
                c.$($field).+ = <$t as Value>::parse(v)?;
                Ok(())
            },
        }),*]
    };
}

const ENTRIES: &[Entry] = entries![
    "seed" => seed: u64,
    "pretrain.batch_size" => pretrain.batch_size: usize,
    "pretrain.clip_len" => pretrain.clip_len: usize,
    "pretrain.tau" => pretrain.tau: f64,
    "pretrain.tau_mode" => pretrain.tau_mode: TauMode,
    "pretrain.lr" => pretrain.lr: f64,
    "pretrain.momentum" => pretrain.momentum: f64,
    "pretrain.weight_decay" => pretrain.weight_decay: f64,
    "pretrain.milestones" => pretrain.schedule.milestones: Vec<u64>,
    "pretrain.total_steps" => pretrain.schedule.total_steps: u64,
    "pretrain.lr_decay" => pretrain.schedule.gamma: f64,
    "pretrain.spatial" => pretrain.spatial: bool,
    "pretrain.intra_seq" => pretrain.intra_seq: bool,
    "pretrain.sampling" => pretrain.sampling: bool,
    "pretrain.negatives" => pretrain.negatives: bool,
    "pretrain.subset_frac" => pretrain.subset_frac: f64,
    "pretrain.checkpoint_every" => pretrain.checkpoint_every: u64,
    "aug.p_flip" => aug.p_flip: f64,
    "aug.p_affine" => aug.p_affine: f64,
    "aug.p_perspective" => aug.p_perspective: f64,
    "aug.p_dilation" => aug.p_dilation: f64,
    "aug.rot_deg" => aug.rotation_deg: f64,
    "aug.shear" => aug.shear: f64,
    "aug.persp_px" => aug.perspective_px: f64,
    "aug.dilate_sizes" => aug.dilation_sizes: Vec<usize>,
    "aug.dilate_shapes" => aug.dilation_shapes: Vec<KernelShape>,
    "aug.band_frac_min" => aug.band_frac_min: f64,
    "aug.band_frac_max" => aug.band_frac_max: f64,
    "sampler.dumb_prob" => sampler.sampler.dumb_prob: f64,
    "sampler.dumb_threshold" => sampler.sampler.dumb_threshold: f64,
    "sampler.window" => sampler.window: usize,
    "sampler.epochs" => sampler.train.epochs: usize,
    "sampler.batch_size" => sampler.train.batch_size: usize,
    "sampler.lr" => sampler.train.lr: f64,
    "sampler.momentum" => sampler.train.momentum: f64,
    "sampler.weight_decay" => sampler.train.weight_decay: f64,
    "sampler.label_smoothing" => sampler.train.label_smoothing: f64,
    "model.stem_channels" => model.stem_channels: usize,
    "model.block_channels" => model.block_channels: [usize; 4],
    "model.block_strides" => model.block_strides: [usize; 4],
    "model.parts" => model.parts: usize,
    "model.embed_dim" => model.embed_dim: usize,
    "model.pool_combine" => model.pool_combine: PoolCombine,
    "model.input_height" => model.input_height: usize,
    "model.input_width" => model.input_width: usize,
    "finetune.p" => finetune.p: usize,
    "finetune.k" => finetune.k: usize,
    "finetune.clip_len" => finetune.clip_len: usize,
    "finetune.margin" => finetune.margin: f64,
    "finetune.backbone_lr" => finetune.backbone_lr: f64,
    "finetune.projection_lr" => finetune.projection_lr: f64,
    "finetune.head_lr" => finetune.head_lr: f64,
    "finetune.scratch_lr" => finetune.scratch_lr: f64,
    "finetune.momentum" => finetune.momentum: f64,
    "finetune.weight_decay" => finetune.weight_decay: f64,
    "finetune.scratch_weight_decay" => finetune.scratch_weight_decay: f64,
    "finetune.freeze_bn" => finetune.freeze_bn: bool,
    "finetune.milestones" => finetune.schedule.milestones: Vec<u64>,
    "finetune.total_steps" => finetune.schedule.total_steps: u64,
    "finetune.scratch_milestones" => finetune.scratch_schedule.milestones: Vec<u64>,
    "finetune.scratch_total_steps" => finetune.scratch_schedule.total_steps: u64,
    "finetune.lr_decay" => finetune.schedule.gamma: f64,
    "finetune.subject_frac" => finetune.subject_fraction: f64,
    "finetune.head_dim" => finetune.head_dim: usize,
    "finetune.checkpoint_every" => finetune.checkpoint_every: u64,
    "eval.heatmap_cell_px" => eval.heatmap_cell_px: u32,
    "eval.heatmap_condition" => eval.heatmap_condition: String,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = load_config(RunConfig::default(), None, &[]).unwrap();
        assert_eq!(cfg.pretrain.schedule.total_steps, 150_000);
        assert_eq!(cfg.get("pretrain.milestones").unwrap(), "80000,120000");
        let mut empty = RunConfig::default();
        empty.apply_text("# nothing\n\n").unwrap();
        assert_eq!(empty, RunConfig::default());
    }

    #[test]
    fn precedence_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "pretrain.lr = 0.05  # file value\nmodel.block_channels = 8,16,32,32\n").unwrap();
        let cfg = load_config(RunConfig::default(), Some(&path), &[]).unwrap();
        assert_eq!(cfg.pretrain.lr, 0.05);
        assert_eq!(cfg.pretrain_config().model.block_channels, [8, 16, 32, 32]);
        let cfg = load_config(RunConfig::default(), Some(&path), &[("pretrain.lr".into(), "0.01".into())]).unwrap();
        assert_eq!(cfg.pretrain.lr, 0.01);

        fs::write(&path, "seed = 1\npretrain.bogus = 3\n").unwrap();
        let err = load_config(RunConfig::default(), Some(&path), &[]).unwrap_err();
        assert!(matches!(err, Error::UnknownKey { line: Some(2), .. }), "{err}");
        fs::write(&path, "pretrain.batch_size = many\n").unwrap();
        let err = load_config(RunConfig::default(), Some(&path), &[]).unwrap_err();
        assert!(matches!(err, Error::TypeError { line: Some(1), .. }));
        assert!(err.to_string().contains("pretrain.batch_size"));
        fs::write(&path, "pretrain.tau = -1\n").unwrap();
        assert!(matches!(
            load_config(RunConfig::default(), Some(&path), &[]),
            Err(Error::ParamOutOfRange { name: "pretrain.tau", .. })
        ));
    }

    #[test]
    fn resolved_text_replays_exactly() {
        let mut cfg = RunConfig::with_transfer_preset(TransferDataset::Gait3d);
        cfg.set("aug.dilate_shapes", "cross,ellipse", None).unwrap();
        cfg.set("pretrain.tau_mode", "multiply", None).unwrap();
        cfg.set("pretrain.lr", "0.123456789012345", None).unwrap();
        let mut replay = RunConfig::default();
        replay.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(replay, cfg);
        assert_eq!(replay.finetune.scratch_schedule.milestones, vec![20_000, 40_000, 50_000]);
    }
}
