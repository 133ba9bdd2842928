//! Run configuration: one TOML file covering data, model, training and
//! ablation settings. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniquery::scene::SceneSpec;
use uniquery::segmenter::ModelConfig;
use uniquery::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub eval_count: usize,
    /// Scene seeds are `train_seed..train_seed + train_count`.
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 500,
            eval_count: 100,
            train_seed: 0,
            eval_seed: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Inter,
    Equi,
    Both,
    AugOnly,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::Inter, Arm::Equi, Arm::Both, Arm::AugOnly];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Inter => "inter",
            Arm::Equi => "equi",
            Arm::Both => "both",
            Arm::AugOnly => "aug_only",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Inter => "+inter",
            Arm::Equi => "+equi",
            Arm::Both => "+inter +equi",
            Arm::AugOnly => "aug-only",
        }
    }

    /// Switch the loss terms of `cfg` to this arm.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let (inter, equi, aug_only) = match self {
            Arm::Baseline => (false, false, false),
            Arm::Inter => (true, false, false),
            Arm::Equi => (false, true, false),
            Arm::Both => (true, true, false),
            Arm::AugOnly => (false, true, true),
        };
        cfg.inter = inter;
        cfg.equi = equi;
        cfg.aug_only = aug_only;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            arms: vec![Arm::Baseline, Arm::Inter, Arm::Equi, Arm::Both],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.eval_dir, &mut cfg.paths.out_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> uniquery::Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let bad = |m: String| Err(uniquery::Error::Config(m));
        if self.scene.class_count != self.model.class_count {
            return bad(format!(
                "scene.class_count {} differs from model.class_count {}",
                self.scene.class_count, self.model.class_count
            ));
        }
        if self.scene.instances_per_scene[1] > self.model.num_queries {
            return bad(format!(
                "up to {} instances per scene but only {} queries",
                self.scene.instances_per_scene[1], self.model.num_queries
            ));
        }
        if self.scene.image_size % 16 != 0 {
            return bad(format!("scene.image_size {} must be a multiple of 16", self.scene.image_size));
        }
        if self.data.train_count == 0 {
            return bad("data.train_count must be >= 1".into());
        }
        let train = self.data.train_seed..self.data.train_seed + self.data.train_count as u64;
        let eval = self.data.eval_seed..self.data.eval_seed + self.data.eval_count as u64;
        if train.start < eval.end && eval.start < train.end {
            return bad("train and eval scene seed ranges overlap".into());
        }
        if self.ablation.arms.is_empty() || self.ablation.seeds.is_empty() {
            return bad("ablation needs at least one arm and one seed".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
