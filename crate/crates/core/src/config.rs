//! Run configuration: a TOML file with sections `[model]`, `[geometry]`,
//! `[losses]`, `[schedule]` (+ `[schedule.warmup|joint|finetune]`), `[data]`
//! and `[prune]`. Unknown keys are rejected. Values can be overridden with
//! dotted paths such as `losses.k=5`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationSpec, SyntheticConceptSpec};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, GeometryConfig};
use crate::losses::{ClassAssignment, LossWeights};
use crate::model::NetSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentMode {
    /// `prototypes_per_class` prototypes owned by each class.
    ClassSpecific,
    /// `num_prototypes` shared prototypes; class `c` uses the
    /// `prototypes_per_class` consecutive ones starting at `c·m/C`.
    Shared,
    /// m×C 0/1 matrix read from `assignment_file`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_channels: Vec<usize>,
    /// (height, width).
    pub input_size: [usize; 2],
    pub prototype_dim: usize,
    pub geometry: Geometry,
    pub radius_init: f64,
    pub assignment: AssignmentMode,
    pub prototypes_per_class: usize,
    pub num_prototypes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignment_file: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: vec![8, 16, 32],
            input_size: [64, 64],
            prototype_dim: 16,
            geometry: Geometry::Log,
            radius_init: 1.0,
            assignment: AssignmentMode::ClassSpecific,
            prototypes_per_class: 10,
            num_prototypes: 0,
            assignment_file: None,
        }
    }
}

/// Learning rates and duration of one training stage. A learning rate of 0
/// freezes the group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_addon: f64,
    pub lr_centers: f64,
    pub lr_radii: f64,
    pub lr_last_layer: f64,
    /// Multiply learning rates by `lr_gamma` every `lr_step_epochs` (0 = never).
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    /// L1 penalty on incorrect-class last-layer connections.
    pub l1: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 0,
            lr_backbone: 0.0,
            lr_addon: 0.0,
            lr_centers: 0.0,
            lr_radii: 0.0,
            lr_last_layer: 0.0,
            lr_step_epochs: 0,
            lr_gamma: 1.0,
            l1: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Decoupled weight decay on backbone and add-on parameters.
    pub weight_decay: f64,
    pub warmup: StageConfig,
    pub joint: StageConfig,
    pub finetune: StageConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            seed: 0,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            warmup: StageConfig {
                epochs: 5,
                lr_addon: 3e-3,
                lr_centers: 3e-3,
                lr_radii: 0.5e-4,
                ..StageConfig::default()
            },
            joint: StageConfig {
                epochs: 10,
                lr_backbone: 1e-4,
                lr_addon: 3e-3,
                lr_centers: 3e-3,
                lr_last_layer: 1e-4,
                ..StageConfig::default()
            },
            finetune: StageConfig {
                epochs: 20,
                lr_last_layer: 1e-4,
                l1: 1e-4,
                ..StageConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Render [`SyntheticConceptSpec`] in memory.
    Synthetic,
    /// Read `root/<split>/<class>/<image>`.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_table: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment_dir: Option<PathBuf>,
    pub augment: AugmentationSpec,
    pub synthetic: SyntheticConceptSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            root: None,
            crop_table: None,
            augment_dir: None,
            augment: AugmentationSpec::default(),
            synthetic: SyntheticConceptSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub enabled: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { enabled: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub geometry: GeometryConfig,
    pub losses: LossWeights,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub prune: PruneConfig,
}

/// Every accepted key: (dotted path, description, example value).
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("model.backbone_channels", "output channels of each stride-2 conv block", "[8, 16, 32]"),
    ("model.input_size", "input [height, width] in pixels", "[64, 64]"),
    ("model.prototype_dim", "latent dimension D of prototype centers", "16"),
    ("model.geometry", "\"log\" (squared distance) or \"cosine\"", "\"log\""),
    ("model.radius_init", "initial radius (squared-distance scale for log, radians for cosine)", "1.0"),
    ("model.assignment", "\"class-specific\", \"shared\" or \"file\"", "\"class-specific\""),
    ("model.prototypes_per_class", "prototypes per class (slots per class when shared)", "10"),
    ("model.num_prototypes", "total prototypes in shared mode", "20"),
    ("model.assignment_file", "m×C 0/1 matrix, one row per line, for file mode", "\"assign.txt\""),
    ("geometry.epsilon", "stability constant of the log activation", "1e-4"),
    ("geometry.min_radius", "floor on every effective radius", "1e-6"),
    ("losses.ce", "cross-entropy weight", "1.0"),
    ("losses.clstk", "top-k cluster loss weight", "0.8"),
    ("losses.sep", "separation loss weight (negative pushes wrong classes away)", "-0.08"),
    ("losses.rad", "radius loss weight", "0.01"),
    ("losses.k", "number of own-class balls in the cluster loss", "10"),
    ("schedule.seed", "seed for initialization and data order", "0"),
    ("schedule.batch_size", "images per optimizer step", "32"),
    ("schedule.beta1", "Adam first-moment decay", "0.9"),
    ("schedule.beta2", "Adam second-moment decay", "0.999"),
    ("schedule.adam_epsilon", "Adam denominator constant", "1e-8"),
    ("schedule.weight_decay", "decoupled weight decay on backbone and add-on", "0.0"),
    ("schedule.warmup.epochs", "warmup epochs", "5"),
    ("schedule.warmup.lr_backbone", "warmup backbone learning rate (must be 0)", "0.0"),
    ("schedule.warmup.lr_addon", "warmup add-on learning rate", "3e-3"),
    ("schedule.warmup.lr_centers", "warmup center learning rate", "3e-3"),
    ("schedule.warmup.lr_radii", "warmup radius learning rate", "5e-5"),
    ("schedule.warmup.lr_last_layer", "warmup last-layer learning rate", "0.0"),
    ("schedule.warmup.lr_step_epochs", "warmup step-decay period in epochs (0 = off)", "0"),
    ("schedule.warmup.lr_gamma", "warmup step-decay factor", "0.1"),
    ("schedule.warmup.l1", "warmup L1 weight on incorrect-class connections", "0.0"),
    ("schedule.joint.epochs", "joint epochs", "10"),
    ("schedule.joint.lr_backbone", "joint backbone learning rate", "1e-4"),
    ("schedule.joint.lr_addon", "joint add-on learning rate", "3e-3"),
    ("schedule.joint.lr_centers", "joint center learning rate", "3e-3"),
    ("schedule.joint.lr_radii", "joint radius learning rate", "0.0"),
    ("schedule.joint.lr_last_layer", "joint last-layer learning rate", "1e-4"),
    ("schedule.joint.lr_step_epochs", "joint step-decay period in epochs (0 = off)", "5"),
    ("schedule.joint.lr_gamma", "joint step-decay factor", "0.1"),
    ("schedule.joint.l1", "joint L1 weight on incorrect-class connections", "0.0"),
    ("schedule.finetune.epochs", "finetune epochs", "20"),
    ("schedule.finetune.lr_backbone", "finetune backbone learning rate (must be 0)", "0.0"),
    ("schedule.finetune.lr_addon", "finetune add-on learning rate (must be 0)", "0.0"),
    ("schedule.finetune.lr_centers", "finetune center learning rate (must be 0)", "0.0"),
    ("schedule.finetune.lr_radii", "finetune radius learning rate (must be 0)", "0.0"),
    ("schedule.finetune.lr_last_layer", "finetune last-layer learning rate", "1e-4"),
    ("schedule.finetune.lr_step_epochs", "finetune step-decay period in epochs (0 = off)", "0"),
    ("schedule.finetune.lr_gamma", "finetune step-decay factor", "0.1"),
    ("schedule.finetune.l1", "finetune L1 weight on incorrect-class connections", "1e-4"),
    ("data.source", "\"synthetic\" or \"directory\"", "\"synthetic\""),
    ("data.root", "dataset root with train/ and test/ class folders", "\"data\""),
    ("data.crop_table", "optional `path x1 y1 x2 y2` crop table", "\"crops.txt\""),
    ("data.augment_dir", "where augmented copies are written (default <root>/augmented)", "\"aug\""),
    ("data.augment.rotation_deg", "rotation range ± degrees", "15.0"),
    ("data.augment.shear_deg", "shear range ± degrees", "10.0"),
    ("data.augment.skew_deg", "perspective skew range ± degrees", "10.0"),
    ("data.augment.flip", "random horizontal flips", "true"),
    ("data.augment.copies", "augmented copies per training image", "4"),
    ("data.synthetic.classes", "list of {name, shape, color}; names ascending", "[{name = \"a\", shape = \"circle\", color = [255, 0, 0]}, {name = \"b\", shape = \"cross\", color = [0, 0, 255]}]"),
    ("data.synthetic.image_size", "rendered image side in pixels", "64"),
    ("data.synthetic.train_per_class", "training images per class", "200"),
    ("data.synthetic.test_per_class", "test images per class", "100"),
    ("data.synthetic.noise_level", "pixel noise amplitude as a fraction of 255", "0.1"),
    ("data.synthetic.seed", "render seed", "0"),
    ("prune.enabled", "drop balls that contain no training patch", "true"),
];

/// Built-in presets, addressable by name.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "synthetic-small",
        include_str!("../presets/synthetic-small.toml"),
    ),
    (
        "protopnet-concepts-cub",
        include_str!("../presets/protopnet-concepts-cub.toml"),
    ),
    (
        "protopool-concepts-cub",
        include_str!("../presets/protopool-concepts-cub.toml"),
    ),
    (
        "tesnet-concepts-cub",
        include_str!("../presets/tesnet-concepts-cub.toml"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a raw TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if !CONFIG_KEYS.iter().any(|(k, _, _)| *k == key) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(
        parts[parts.len() - 1].to_string(),
        parse_value(value.trim()),
    );
    Ok(())
}

impl Config {
    /// Parses TOML text and applies overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a file, or a built-in preset when `source` is a bare preset name.
    /// Relative paths inside a file are resolved against its directory.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        let path = Path::new(source);
        if path.is_file() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut cfg = Self::from_toml(&text, overrides)?;
            if let Some(dir) = path.parent() {
                cfg.resolve_paths(dir);
            }
            return Ok(cfg);
        }
        let stem = source
            .strip_suffix(".toml")
            .or_else(|| source.strip_suffix(".cfg"))
            .unwrap_or(source);
        match preset(stem) {
            Some(text) if !source.contains(std::path::MAIN_SEPARATOR) => {
                Self::from_toml(text, overrides)
            }
            _ => Err(Error::ConfigNotFound(path.to_path_buf())),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.root,
            &mut self.data.crop_table,
            &mut self.data.augment_dir,
            &mut self.model.assignment_file,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.losses.validate()?;
        self.data.augment.validate()?;
        let m = &self.model;
        if m.backbone_channels.is_empty() || m.backbone_channels.contains(&0) {
            return Err(Error::Config(
                "model.backbone_channels must be nonempty and positive".into(),
            ));
        }
        if m.prototype_dim == 0 {
            return Err(Error::Config("model.prototype_dim must be positive".into()));
        }
        if m.input_size.contains(&0) {
            return Err(Error::Config("model.input_size must be positive".into()));
        }
        if !(m.radius_init > 0.0 && m.radius_init.is_finite()) {
            return Err(Error::Config("model.radius_init must be positive".into()));
        }
        match m.assignment {
            AssignmentMode::ClassSpecific if m.prototypes_per_class == 0 => {
                return Err(Error::Config(
                    "model.prototypes_per_class must be positive".into(),
                ))
            }
            AssignmentMode::Shared if m.num_prototypes == 0 || m.prototypes_per_class == 0 => {
                return Err(Error::Config(
                    "shared assignment needs model.num_prototypes and model.prototypes_per_class"
                        .into(),
                ))
            }
            AssignmentMode::Shared if m.prototypes_per_class > m.num_prototypes => {
                return Err(Error::Config(
                    "model.prototypes_per_class exceeds model.num_prototypes".into(),
                ))
            }
            AssignmentMode::File if m.assignment_file.is_none() => {
                return Err(Error::Config(
                    "file assignment needs model.assignment_file".into(),
                ))
            }
            _ => {}
        }
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&s.beta1)
            || !(0.0..1.0).contains(&s.beta2)
            || !(s.adam_epsilon > 0.0)
        {
            return Err(Error::Config("Adam hyperparameters out of range".into()));
        }
        if !(s.weight_decay >= 0.0) {
            return Err(Error::Config(
                "schedule.weight_decay must be non-negative".into(),
            ));
        }
        for (name, st) in [
            ("warmup", &s.warmup),
            ("joint", &s.joint),
            ("finetune", &s.finetune),
        ] {
            for v in [
                st.lr_backbone,
                st.lr_addon,
                st.lr_centers,
                st.lr_radii,
                st.lr_last_layer,
                st.l1,
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!(
                        "schedule.{name}: learning rates and l1 must be finite and non-negative"
                    )));
                }
            }
            if !(st.lr_gamma > 0.0 && st.lr_gamma.is_finite()) {
                return Err(Error::Config(format!(
                    "schedule.{name}.lr_gamma must be positive"
                )));
            }
        }
        if self.data.source == DataSource::Directory && self.data.root.is_none() {
            return Err(Error::Config(
                "data.source = \"directory\" needs data.root".into(),
            ));
        }
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }

    /// Class assignment for `num_classes` classes.
    pub fn assignment(&self, num_classes: usize) -> Result<ClassAssignment> {
        let m = &self.model;
        match m.assignment {
            AssignmentMode::ClassSpecific => Ok(ClassAssignment::class_specific(
                m.prototypes_per_class,
                num_classes,
            )),
            AssignmentMode::Shared => {
                let total = m.num_prototypes;
                let mut rows = vec![vec![false; num_classes]; total];
                for c in 0..num_classes {
                    let start = c * total / num_classes;
                    for s in 0..m.prototypes_per_class {
                        rows[(start + s) % total][c] = true;
                    }
                }
                ClassAssignment::from_rows(&rows)
            }
            AssignmentMode::File => {
                let path = m.assignment_file.as_ref().expect("validated");
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let rows = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(|l| {
                        l.split_whitespace()
                            .map(|v| match v {
                                "0" => Ok(false),
                                "1" => Ok(true),
                                _ => {
                                    Err(Error::Config(format!("assignment entry `{v}` is not 0/1")))
                                }
                            })
                            .collect::<Result<Vec<bool>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                if rows.first().map(Vec::len) != Some(num_classes) {
                    return Err(Error::Config(format!(
                        "assignment file must have {num_classes} columns"
                    )));
                }
                ClassAssignment::from_rows(&rows)
            }
        }
    }

    pub fn net_spec(&self, num_classes: usize) -> Result<NetSpec> {
        Ok(NetSpec {
            backbone_channels: self.model.backbone_channels.clone(),
            input_size: (self.model.input_size[0], self.model.input_size[1]),
            prototype_dim: self.model.prototype_dim,
            geometry: self.model.geometry,
            geometry_config: self.geometry,
            radius_init: self.model.radius_init,
            assignment: self.assignment(num_classes)?,
        })
    }
}
