use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_cifar_binary, load_idx, make_synthetic, CifarVariant, Dataset, Split, SyntheticSpec};
use crate::distill::{DistillConfig, Method};
use crate::error::{Error, Result};
use crate::nn::{default_pool_positions, Architecture, DiscriminatorSpec, StudentSpec, TeacherSpec};
use crate::tensor::{LrSchedule, SgdConfig};

/// Where the images come from. The kind and any file paths are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Cifar10 {
        dir: PathBuf,
    },
    Cifar100 {
        dir: PathBuf,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetConfig {
    /// Loads `(train, test)`, both normalized with train statistics.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Synthetic(spec) => make_synthetic(spec),
            DatasetConfig::Cifar10 { dir } => load_cifar_binary(dir, CifarVariant::Cifar10),
            DatasetConfig::Cifar100 { dir } => load_cifar_binary(dir, CifarVariant::Cifar100),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                test.split = Split::Test;
                let classes = train.num_classes.max(test.num_classes);
                train.num_classes = classes;
                test.num_classes = classes;
                let stats = train.channel_stats();
                train.normalize_with(&stats)?;
                test.normalize_with(&stats)?;
                Ok((train, test))
            }
        }
    }

    /// `([C, H, W], num_classes)` without loading any pixels where possible.
    pub fn geometry(&self) -> Result<([usize; 3], usize)> {
        match self {
            DatasetConfig::Synthetic(s) => Ok(([s.channels, s.image_size, s.image_size], s.num_classes)),
            DatasetConfig::Cifar10 { .. } => Ok(([3, 32, 32], 10)),
            DatasetConfig::Cifar100 { .. } => Ok(([3, 32, 32], 100)),
            DatasetConfig::Idx { .. } => {
                let (train, test) = self.load()?;
                Ok((train.image_shape(), train.num_classes.max(test.num_classes)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub init_channels: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            num_blocks: 2,
            layers_per_block: 3,
            growth: 12,
            init_channels: 16,
        }
    }
}

/// Student feature extractor. Unless `channels` is given, the network is
/// `depth − 1` convs of `width` channels followed by one conv producing as
/// many channels as the teacher's feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub depth: usize,
    pub width: usize,
    /// Explicit per-conv widths; overrides `depth` and `width`.
    pub channels: Option<Vec<usize>>,
    /// 1-based convs followed by a 2×2 max-pool; derived when unset.
    pub pool_after: Option<Vec<usize>>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            depth: 2,
            width: 8,
            channels: None,
            pool_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        let spec = DiscriminatorSpec::new([1, 1, 1]);
        DiscriminatorConfig {
            channels: spec.channels,
            slope: spec.slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Student epochs.
    pub epochs: u64,
    pub teacher_epochs: u64,
    pub batch_size: usize,
    pub teacher_opt: SgdConfig,
    /// Applied per epoch to every optimizer.
    pub lr_schedule: LrSchedule,
    /// Pad/crop/flip on training batches.
    pub augment: bool,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let opt = SgdConfig {
            lr: 0.05,
            ..SgdConfig::default()
        };
        ScheduleConfig {
            epochs: 15,
            teacher_epochs: 15,
            batch_size: 64,
            teacher_opt: opt,
            lr_schedule: LrSchedule::Cosine,
            augment: false,
            seed: 0,
        }
    }
}

/// One experiment, as read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default = "default_distill")]
    pub distill: DistillConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// KDFM learning rates calibrated on the synthetic task, with one epoch of
/// warmup at batch 64.
fn default_distill() -> DistillConfig {
    let opt = |lr| SgdConfig {
        lr,
        warmup_steps: WARMUP_STEPS,
        ..SgdConfig::default()
    };
    DistillConfig {
        opt_g: opt(0.5),
        opt_d: opt(0.01),
        opt_c: opt(10.0),
        ..DistillConfig::default()
    }
}

const WARMUP_STEPS: u64 = 25;

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// A config with every default and the given dataset.
    pub fn with_dataset(dataset: DatasetConfig) -> Self {
        ExperimentConfig {
            dataset,
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            distill: default_distill(),
            schedule: ScheduleConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file and applies `key=value` overrides, where `key`
    /// is a dotted path and `value` is JSON (bare words are taken as
    /// strings).
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    /// Applies `key=value` overrides to an already parsed config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON form, ignoring
    /// `output_dir` so the same experiment hashes the same wherever it is
    /// written.
    pub fn hash(&self) -> u64 {
        let mut v = serde_json::to_value(self).expect("config always serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        let text = v.to_string();
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    pub fn teacher_spec(&self) -> Result<TeacherSpec> {
        let (input, num_classes) = self.dataset.geometry()?;
        Ok(TeacherSpec {
            input,
            num_blocks: self.teacher.num_blocks,
            layers_per_block: self.teacher.layers_per_block,
            growth: self.teacher.growth,
            init_channels: self.teacher.init_channels,
            num_classes,
        })
    }

    pub fn student_spec(&self) -> Result<StudentSpec> {
        let teacher = self.teacher_spec()?;
        let feature = teacher.feature_shape();
        let channels = match &self.student.channels {
            Some(c) => c.clone(),
            None => {
                if self.student.depth == 0 || self.student.width == 0 {
                    return Err(Error::config("student depth and width must be positive"));
                }
                let mut c = vec![self.student.width; self.student.depth - 1];
                c.push(feature[0]);
                c
            }
        };
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::config(format!("bad student channels {channels:?}")));
        }
        let pool_after = match &self.student.pool_after {
            Some(p) => p.clone(),
            None => default_pool_positions(channels.len(), teacher.input[1], feature[1])?,
        };
        Ok(StudentSpec {
            input: teacher.input,
            channels,
            pool_after,
        })
    }

    pub fn discriminator_spec(&self, feature: [usize; 3]) -> DiscriminatorSpec {
        DiscriminatorSpec {
            feature,
            channels: self.discriminator.channels.clone(),
            slope: self.discriminator.slope,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.schedule.teacher_opt.validate()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::config("schedule.batch_size must be positive"));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if s.num_classes < 2 || s.samples_per_class < 2 || s.image_size == 0 || s.channels == 0 {
                return Err(Error::config(format!("bad synthetic dataset {s:?}")));
            }
        }
        let t = self.teacher_spec()?;
        if t.num_blocks == 0 || t.layers_per_block == 0 || t.growth == 0 || t.init_channels == 0 {
            return Err(Error::config(format!("bad teacher {:?}", self.teacher)));
        }
        let teacher = Architecture::Teacher(t.clone()).build::<f32>()?;
        let s = self.student_spec()?;
        let student = Architecture::Student(s).build::<f32>()?;
        if self.distill.method == Method::Kdfm {
            let sf = student.output_shape()?;
            let tf = teacher.output_shape()?;
            if sf != tf {
                return Err(Error::config(format!(
                    "kdfm needs equal feature maps: student produces {sf:?} but teacher produces {tf:?}"
                )));
            }
            if self.distill.adversarial {
                Architecture::Discriminator(self.discriminator_spec(t.feature_shape())).build::<f32>()?;
            }
        }
        Ok(())
    }
}

/// Sets the value at a dotted path, creating objects along the way.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::usage(format!("override {assignment:?} is not key=value")))?;
    if key.is_empty() {
        return Err(Error::usage(format!("override {assignment:?} has an empty key")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::usage(format!(
                "override {key}: {} is not an object",
                parts[..i].join(".")
            )));
        }
        let map = node.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
