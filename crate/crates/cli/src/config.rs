//! Flat JSON settings per subcommand. A config file must list every key of
//! its command; flags then override individual values.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use skiptune::bench::{generate_task_with, PretrainConfig, SyntheticTask, TrainConfig, BASE_LR, DEFAULT_TEST_SHOTS};
use skiptune::encoders::EncoderConfig;

/// Loads `path` if given, otherwise the defaults.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSettings {
    pub task_seed: u64,
    pub classes: usize,
    pub shots: usize,
    pub test_shots: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self {
            task_seed: 0,
            classes: 16,
            shots: 16,
            test_shots: DEFAULT_TEST_SHOTS,
        }
    }
}

impl TaskSettings {
    pub fn generate(&self) -> Result<SyntheticTask> {
        Ok(generate_task_with(
            self.task_seed,
            self.classes,
            self.shots,
            self.test_shots,
        )?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_proj: usize,
    pub image_grid: usize,
    pub patch: usize,
    pub channels: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub init_seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub template: String,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let m = EncoderConfig::default();
        let p = PretrainConfig::default();
        Self {
            layers: m.layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            d_proj: m.d_proj,
            image_grid: m.image_grid,
            patch: m.patch,
            channels: m.channels,
            vocab: m.vocab,
            max_text_len: m.max_text_len,
            init_seed: 0,
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            seed: p.seed,
            template: p.template,
        }
    }
}

impl PretrainSettings {
    pub fn model(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            d_proj: self.d_proj,
            image_grid: self.image_grid,
            patch: self.patch,
            channels: self.channels,
            vocab: self.vocab,
            max_text_len: self.max_text_len,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            template: self.template.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSettings {
    pub omega: usize,
    pub template: String,
    pub task_seed: u64,
    pub classes: usize,
    pub shots: usize,
    pub test_shots: usize,
}

impl Default for CacheSettings {
    fn default() -> Self {
        let t = TaskSettings::default();
        Self {
            omega: 6,
            template: "[CLS]".into(),
            task_seed: t.task_seed,
            classes: t.classes,
            shots: t.shots,
            test_shots: t.test_shots,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSettings {
    pub lr: f64,
    pub lr_multiplier: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub omega: usize,
    pub r: f64,
    pub lambda: f64,
    pub lskip: bool,
    pub cskip: bool,
    pub topk: bool,
    pub freeze_shallow: bool,
    pub seed: u64,
    pub template: String,
    pub task_seed: u64,
    pub classes: usize,
    pub shots: usize,
    pub test_shots: usize,
}

impl Default for TuneSettings {
    fn default() -> Self {
        let c = TrainConfig::default();
        let t = TaskSettings::default();
        Self {
            lr: BASE_LR,
            lr_multiplier: c.lr_multiplier,
            batch_size: c.batch_size,
            epochs: c.epochs,
            omega: c.omega,
            r: c.r,
            lambda: c.lambda,
            lskip: c.lskip,
            cskip: c.cskip,
            topk: c.topk,
            freeze_shallow: c.freeze_shallow,
            seed: c.seed,
            template: c.template,
            task_seed: t.task_seed,
            classes: t.classes,
            shots: t.shots,
            test_shots: t.test_shots,
        }
    }
}

impl TuneSettings {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_multiplier: self.lr_multiplier,
            batch_size: self.batch_size,
            epochs: self.epochs,
            omega: self.omega,
            r: self.r,
            lambda: self.lambda,
            lskip: self.lskip,
            cskip: self.cskip,
            topk: self.topk,
            freeze_shallow: self.freeze_shallow,
            seed: self.seed,
            template: self.template.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSettings {
    pub samples: usize,
    pub bins: usize,
    pub seed: u64,
    pub template: String,
    pub cost_omegas: Vec<usize>,
    pub cost_fractions: Vec<f64>,
    pub task_seed: u64,
    pub classes: usize,
    pub shots: usize,
    pub test_shots: usize,
}

impl Default for DiagnoseSettings {
    fn default() -> Self {
        let t = TaskSettings::default();
        Self {
            samples: 100,
            bins: 4,
            seed: 0,
            template: "[CLS]".into(),
            cost_omegas: vec![0, 3, 6, 9],
            cost_fractions: vec![0.25, 0.5, 1.0],
            task_seed: t.task_seed,
            classes: t.classes,
            shots: t.shots,
            test_shots: t.test_shots,
        }
    }
}

macro_rules! task_of {
    ($t:ty) => {
        impl $t {
            pub fn task(&self) -> TaskSettings {
                TaskSettings {
                    task_seed: self.task_seed,
                    classes: self.classes,
                    shots: self.shots,
                    test_shots: self.test_shots,
                }
            }
        }
    };
}

task_of!(CacheSettings);
task_of!(TuneSettings);
task_of!(DiagnoseSettings);
