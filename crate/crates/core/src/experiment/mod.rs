//! Experiment orchestration: public pretraining, noise calibration, private
//! fine-tuning over sparsity settings and seeds, and metrics files.
//!
//! Everything is driven by an [`ExperimentConfig`], a versioned JSON
//! document. Runs are deterministic functions of the config and the seed.

mod commands;
mod metrics;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, BlobSpec, Dataset};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelSpec};
use crate::sparsify::{Criterion, PruningRate, SparsityMode};

pub use commands::{
    cmd_calibrate, cmd_eval, cmd_pretrain, cmd_report, cmd_sweep, cmd_train, CalibrationReport, EvalReport,
    PretrainReport, TrainReport,
};
pub use metrics::{aggregate, gnuplot_script, read_metrics, write_csv, AggregateRow, MetricsRow, METRICS_HEADER};
pub use train::{
    evaluate, pretrain, train_run, PretrainOutcome, RunInputs, RunResult, Schedule,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Stream ids derived from a run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SAMPLER: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const REINIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { files: Vec<PathBuf> },
    Blobs(BlobSpec),
}

impl DataSource {
    /// The standard MNIST file names inside `dir`.
    pub fn mnist(dir: &Path, train: bool) -> Self {
        let prefix = if train { "train" } else { "t10k" };
        DataSource::Idx {
            images: dir.join(format!("{prefix}-images-idx3-ubyte")),
            labels: dir.join(format!("{prefix}-labels-idx1-ubyte")),
        }
    }

    pub fn load(&self) -> Result<Dataset<f64>> {
        match self {
            DataSource::Idx { images, labels } => data::load_idx(images, labels),
            DataSource::Cifar { files } => {
                let parts = files
                    .iter()
                    .map(|f| data::load_cifar_binary(f))
                    .collect::<Result<Vec<_>>>()?;
                Dataset::concat(&parts)
            }
            DataSource::Blobs(spec) => data::synthetic_blobs(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicData {
    /// Separate public corpus. When absent the public set is carved out of
    /// the private source and the remainder becomes the private set.
    #[serde(default)]
    pub source: Option<DataSource>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

impl Default for PublicData {
    fn default() -> Self {
        PublicData {
            source: None,
            fraction: default_fraction(),
        }
    }
}

fn default_fraction() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    /// Fixed learning rate; when absent the best of `lr_grid` is chosen on
    /// a held-out part of the public data.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    /// Share of the public data held out for choosing the learning rate.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: default_pretrain_epochs(),
            batch_size: default_pretrain_batch(),
            lr: None,
            lr_grid: default_lr_grid(),
            holdout: default_holdout(),
        }
    }
}

fn default_pretrain_epochs() -> usize {
    8
}
fn default_pretrain_batch() -> usize {
    32
}
fn default_lr_grid() -> Vec<f64> {
    vec![0.03, 0.1, 0.3]
}
fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Target epsilon; the noise multiplier is calibrated to meet it.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Explicit noise multiplier, instead of a target epsilon.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_dp_lr")]
    pub learning_rate: f64,
    /// Expected batch size; the sampling rate is `batch_size / N`.
    #[serde(default = "default_dp_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dp_epochs")]
    pub epochs: usize,
    /// Steps between evaluations; defaults to one epoch.
    #[serde(default)]
    pub eval_every: Option<u64>,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            epsilon: None,
            sigma: None,
            delta: default_delta(),
            clip_norm: default_clip(),
            learning_rate: default_dp_lr(),
            batch_size: default_dp_batch(),
            epochs: default_dp_epochs(),
            eval_every: None,
        }
    }
}

fn default_delta() -> f64 {
    crate::accountant::DEFAULT_DELTA
}
fn default_clip() -> f64 {
    1.0
}
fn default_dp_lr() -> f64 {
    2.0
}
fn default_dp_batch() -> usize {
    256
}
fn default_dp_epochs() -> usize {
    4
}

/// One sparsification setting: how indices are chosen and how often.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub mode: SparsityMode,
    pub criterion: Criterion,
}

impl Setting {
    pub fn all() -> Vec<Setting> {
        let mut out = Vec::new();
        for mode in [SparsityMode::Freezing, SparsityMode::Selection] {
            for criterion in [Criterion::Random, Criterion::Magnitude] {
                out.push(Setting { mode, criterion });
            }
        }
        out
    }

    /// e.g. `random_freezing`.
    pub fn name(&self) -> String {
        format!("{}_{}", self.criterion.as_str(), self.mode.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    #[serde(default = "default_mode")]
    pub mode: SparsityMode,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub prune_all_params: bool,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig {
            mode: default_mode(),
            criterion: default_criterion(),
            p: 0.0,
            prune_all_params: false,
        }
    }
}

fn default_mode() -> SparsityMode {
    SparsityMode::Freezing
}
fn default_criterion() -> Criterion {
    Criterion::Random
}

impl SparsityConfig {
    pub fn setting(&self) -> Setting {
        Setting {
            mode: self.mode,
            criterion: self.criterion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
    #[serde(default = "Setting::all")]
    pub settings: Vec<Setting>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            p_grid: default_p_grid(),
            settings: Setting::all(),
        }
    }
}

fn default_p_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9]
}

/// When to replace the pretrained classifier layer before private training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitPolicy {
    /// Only when the private data has a different number of classes.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    pub private: DataSource,
    pub test: DataSource,
    #[serde(default)]
    pub public: PublicData,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub reinit_last_layer: ReinitPolicy,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Pretrained checkpoint shared by all seeds. When absent each seed
    /// uses `<output_dir>/pretrain/seed<seed>.dpss`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_model() -> ModelSpec {
    ModelSpec::mnist_cnn(10)
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the data sources.
    pub fn new(private: DataSource, test: DataSource) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            model: default_model(),
            private,
            test,
            public: PublicData::default(),
            pretrain: PretrainConfig::default(),
            dp: DpConfig::default(),
            sparsity: SparsityConfig::default(),
            sweep: SweepConfig::default(),
            seeds: default_seeds(),
            reinit_last_layer: ReinitPolicy::Auto,
            output_dir: default_output(),
            checkpoint: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides to a JSON config document before
    /// parsing. Values are JSON when they parse as JSON, strings otherwise.
    pub fn from_json_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if !matches!(self.model.layers.last(), Some(LayerSpec::Linear { .. })) {
            return Err(Error::config("model must end with an fc layer"));
        }
        if !(self.public.fraction > 0.0 && self.public.fraction <= 1.0) {
            return Err(Error::config(format!(
                "public fraction must lie in (0, 1], got {}",
                self.public.fraction
            )));
        }
        if self.public.source.is_none() && self.public.fraction >= 1.0 {
            return Err(Error::config("carving all private data as public leaves nothing to train on"));
        }
        let pt = &self.pretrain;
        if pt.epochs == 0 || pt.batch_size == 0 {
            return Err(Error::config("pretrain epochs and batch size must be positive"));
        }
        match pt.lr {
            Some(lr) => positive("pretrain.lr", lr)?,
            None if pt.lr_grid.is_empty() => return Err(Error::config("pretrain needs lr or a nonempty lr_grid")),
            None => {
                for &lr in &pt.lr_grid {
                    positive("pretrain.lr_grid entry", lr)?;
                }
            }
        }
        if !(pt.holdout > 0.0 && pt.holdout < 1.0) {
            return Err(Error::config(format!("pretrain.holdout must lie in (0, 1), got {}", pt.holdout)));
        }
        let dp = &self.dp;
        match (dp.epsilon, dp.sigma) {
            (Some(e), None) => positive("dp.epsilon", e)?,
            (None, Some(s)) if s >= 0.0 && s.is_finite() => {}
            (None, Some(s)) => return Err(Error::config(format!("dp.sigma must be nonnegative, got {s}"))),
            _ => return Err(Error::config("set exactly one of dp.epsilon and dp.sigma")),
        }
        if !(dp.delta > 0.0 && dp.delta < 1.0) {
            return Err(Error::config(format!("dp.delta must lie in (0, 1), got {}", dp.delta)));
        }
        positive("dp.clip_norm", dp.clip_norm)?;
        positive("dp.learning_rate", dp.learning_rate)?;
        if dp.batch_size == 0 || dp.epochs == 0 || dp.eval_every == Some(0) {
            return Err(Error::config("dp batch size, epochs and eval_every must be positive"));
        }
        PruningRate::new(self.sparsity.p)?;
        for &p in &self.sweep.p_grid {
            PruningRate::new(p)?;
        }
        if self.sweep.p_grid.is_empty() || self.sweep.settings.is_empty() {
            return Err(Error::config("sweep needs at least one p and one setting"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        Ok(())
    }

    pub fn checkpoint_for(&self, seed: u64) -> PathBuf {
        match &self.checkpoint {
            Some(p) => p.clone(),
            None => self.output_dir.join("pretrain").join(format!("seed{seed}.dpss")),
        }
    }
}

fn set_path(doc: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::config(format!("empty override key {key:?}")))
}

/// The model spec with its final fc layer resized to `classes`.
pub fn spec_with_classes(spec: &ModelSpec, classes: usize) -> ModelSpec {
    let mut spec = spec.clone();
    if let Some(last) = spec.layers.last_mut() {
        *last = LayerSpec::fc(classes);
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(stream: u64) -> DataSource {
        DataSource::Blobs(BlobSpec {
            classes: 2,
            item_dims: vec![1, 4, 4],
            per_class: 10,
            spread: 0.1,
            seed: 1,
            sample_stream: stream,
        })
    }

    fn base() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(blobs(1), blobs(2));
        c.dp.epsilon = Some(2.0);
        c
    }

    #[test]
    fn json_round_trip() {
        let c = base();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn minimal_document_gets_defaults() {
        let text = r#"{
            "schema_version": 1,
            "private": {"kind": "idx", "images": "a", "labels": "b"},
            "test": {"kind": "idx", "images": "c", "labels": "d"},
            "dp": {"epsilon": 2}
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(c.public.fraction, 0.05);
        assert_eq!(c.seeds.len(), 5);
        assert_eq!(c.dp.clip_norm, 1.0);
        assert_eq!(c.sweep.settings.len(), 4);
        assert_eq!(c.model, ModelSpec::mnist_cnn(10));
    }

    #[test]
    fn overrides_replace_file_values() {
        let c = ExperimentConfig::from_json_with_overrides(
            &base().to_json(),
            &[
                ("dp.epsilon".into(), "null".into()),
                ("dp.sigma".into(), "1.5".into()),
                ("sparsity.mode".into(), "selection".into()),
                ("output_dir".into(), "elsewhere".into()),
            ],
        )
        .unwrap();
        assert_eq!(c.dp.sigma, Some(1.5));
        assert_eq!(c.sparsity.mode, SparsityMode::Selection);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn validation_errors_are_config_errors() {
        let mut both = base();
        both.dp.sigma = Some(1.0);
        let mut neither = base();
        neither.dp.epsilon = None;
        let mut no_seeds = base();
        no_seeds.seeds.clear();
        let mut bad_p = base();
        bad_p.sparsity.p = 1.0;
        let mut version = base();
        version.schema_version = 7;
        for c in [both, neither, no_seeds, bad_p, version] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"schema_version": 1, "bogus": 3}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn setting_names() {
        let names: Vec<String> = Setting::all().iter().map(Setting::name).collect();
        assert_eq!(names, ["random_freezing", "magnitude_freezing", "random_selection", "magnitude_selection"]);
    }
}
