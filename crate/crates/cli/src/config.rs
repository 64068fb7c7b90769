//! Run configuration: a TOML file with dataset, model, training and
//! evaluation sections. Every field has a default, so a minimal config only
//! names its dataset and horizon.

use cats_core::constructors::{bank_preset, ConstructorSpec};
use cats_core::data::synthetic::{gen_multi, gen_multix, gen_shifting_toy, DatasetManifest};
use cats_core::data::{load_csv, SeriesFrame};
use cats_core::error::{CatsError, Result};
use cats_core::model::ModelConfig;
use cats_core::predictors::PredictorKind;
use cats_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DEFAULT_GEN_ROWS: usize = 2400;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetCfg,
    #[serde(default)]
    pub model: ModelCfg,
    #[serde(default)]
    pub train: TrainCfg,
    #[serde(default)]
    pub eval: EvalCfg,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    /// CSV file path; alternative to `generator`.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// One of "multi", "multix", "shifting-toy".
    #[serde(default)]
    pub generator: Option<String>,
    /// Name used in reports; defaults to the generator or file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub date_column: Option<String>,
    #[serde(default = "default_rows")]
    pub rows: usize,
    /// Dataset seed; defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Series count for the lag-chain generator.
    #[serde(default = "default_multix_count")]
    pub multix_count: usize,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_ar")]
    pub ar_coefficient: f64,
}

fn default_rows() -> usize {
    DEFAULT_GEN_ROWS
}
fn default_multix_count() -> usize {
    20
}
fn default_noise_scale() -> f64 {
    0.1
}
fn default_ar() -> f64 {
    1.0
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg {
            csv: None,
            generator: None,
            name: None,
            date_column: None,
            rows: default_rows(),
            seed: None,
            multix_count: default_multix_count(),
            noise_scale: default_noise_scale(),
            ar_coefficient: default_ar(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    #[serde(default = "default_predictor")]
    pub predictor: PredictorKind,
    /// Bank preset name; ignored when an explicit `bank` list is given.
    #[serde(default = "default_bank_name")]
    pub bank_preset: String,
    #[serde(default)]
    pub bank: Option<Vec<ConstructorSpec>>,
    #[serde(default = "yes")]
    pub channel_sparsity: bool,
    #[serde(default = "yes")]
    pub temporal_sparsity: bool,
    #[serde(default = "yes")]
    pub shortcut: bool,
    #[serde(default = "yes")]
    pub demean: bool,
    #[serde(default)]
    pub per_channel_aggregation: bool,
    #[serde(default = "default_beta")]
    pub beta_cont: f64,
    /// 0 means the channel-regime default (4 small / 8 large).
    #[serde(default)]
    pub mlp_ratio: usize,
    /// Negative means the regime default (0.75 small / 0.5 large).
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_predictor() -> PredictorKind {
    PredictorKind::TwoLayer
}
fn default_bank_name() -> String {
    "default".into()
}
fn yes() -> bool {
    true
}
fn default_beta() -> f64 {
    1.0
}
fn default_dropout() -> f64 {
    -1.0
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            predictor: default_predictor(),
            bank_preset: default_bank_name(),
            bank: None,
            channel_sparsity: true,
            temporal_sparsity: true,
            shortcut: true,
            demean: true,
            per_channel_aggregation: false,
            beta_cont: default_beta(),
            mlp_ratio: 0,
            dropout: default_dropout(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_p_drop")]
    pub p_drop: f64,
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    #[serde(default = "one")]
    pub train_stride: usize,
    #[serde(default = "one")]
    pub val_stride: usize,
}

fn default_lr() -> f64 {
    5e-5
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_p_drop() -> f64 {
    0.5
}
fn default_input_len() -> usize {
    720
}
fn one() -> usize {
    1
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: default_lr(),
            epochs: default_epochs(),
            patience: default_patience(),
            batch: default_batch(),
            p_drop: default_p_drop(),
            input_len: default_input_len(),
            train_stride: 1,
            val_stride: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalCfg {
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_eval_batch")]
    pub batch: usize,
}

fn default_horizons() -> Vec<usize> {
    vec![96]
}
fn default_eval_batch() -> usize {
    64
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            horizons: default_horizons(),
            batch: default_eval_batch(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML config, returning it together with the raw bytes for
    /// verbatim echoing into the run directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CatsError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CatsError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.csv, &self.dataset.generator) {
            (None, None) => {
                return Err(CatsError::Config(
                    "dataset needs either `csv` or `generator`".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(CatsError::Config(
                    "dataset `csv` and `generator` are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        if let Some(gen) = &self.dataset.generator {
            if !["multi", "multix", "shifting-toy"].contains(&gen.as_str()) {
                return Err(CatsError::Config(format!("unknown generator {gen:?}")));
            }
        }
        if self.eval.horizons.is_empty() {
            return Err(CatsError::Config("eval.horizons must not be empty".into()));
        }
        Ok(())
    }

    /// The named ablations flip exactly one aspect of the default pipeline.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "no-continuity" => self.model.beta_cont = 0.0,
            "no-channel-sparsity" => self.model.channel_sparsity = false,
            "no-temporal-sparsity" => self.model.temporal_sparsity = false,
            "no-sparsity" => {
                self.model.channel_sparsity = false;
                self.model.temporal_sparsity = false;
            }
            "pure-linear" => self.model.bank_preset = "pure-linear".into(),
            "pure-conv" => self.model.bank_preset = "pure-conv".into(),
            "no-shortcut" => self.model.shortcut = false,
            other => {
                return Err(CatsError::Config(format!("unknown ablation {other:?}")));
            }
        }
        Ok(())
    }

    /// Load or generate the dataset named by the config.
    pub fn resolve_frame(&self) -> Result<(SeriesFrame, Option<DatasetManifest>, String)> {
        let seed = self.dataset.seed.unwrap_or(self.seed);
        if let Some(csv) = &self.dataset.csv {
            let frame = load_csv(csv, self.dataset.date_column.as_deref())?;
            let name = self.dataset.name.clone().unwrap_or_else(|| {
                csv.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into())
            });
            // Pick up the sidecar manifest when present.
            let manifest_path = csv.with_extension("manifest.json");
            let manifest = manifest_path
                .exists()
                .then(|| DatasetManifest::load(&manifest_path))
                .transpose()?;
            return Ok((frame, manifest, name));
        }
        let gen = self.dataset.generator.as_deref().unwrap();
        let (frame, manifest) = match gen {
            "multi" => gen_multi(self.dataset.rows, seed)?,
            "multix" => gen_multix(
                self.dataset.multix_count,
                self.dataset.rows,
                720,
                self.dataset.noise_scale,
                self.dataset.ar_coefficient,
                seed,
            )?,
            "shifting-toy" => gen_shifting_toy(self.dataset.rows, seed)?,
            _ => unreachable!("validated"),
        };
        let name = self.dataset.name.clone().unwrap_or_else(|| {
            if gen == "multix" {
                format!("multi{}", self.dataset.multix_count)
            } else {
                gen.to_string()
            }
        });
        Ok((frame, Some(manifest), name))
    }

    /// Assemble the core model configuration for the given shape.
    pub fn model_config(&self, channels: usize, horizon: usize) -> Result<ModelConfig> {
        let small = channels < 16;
        let bank = match &self.model.bank {
            Some(list) => list.clone(),
            None => bank_preset(&self.model.bank_preset, channels)?,
        };
        Ok(ModelConfig {
            channels,
            input_len: self.train.input_len,
            horizon,
            bank,
            predictor: self.model.predictor,
            mlp_ratio: if self.model.mlp_ratio == 0 {
                if small {
                    4
                } else {
                    8
                }
            } else {
                self.model.mlp_ratio
            },
            dropout: if self.model.dropout < 0.0 {
                if small {
                    0.75
                } else {
                    0.5
                }
            } else {
                self.model.dropout
            },
            use_channel_sparsity: self.model.channel_sparsity,
            use_temporal_sparsity: self.model.temporal_sparsity,
            use_shortcut: self.model.shortcut,
            use_demean: self.model.demean,
            per_channel_aggregation: self.model.per_channel_aggregation,
            beta_cont: self.model.beta_cont,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            patience: self.train.patience,
            batch: self.train.batch,
            seed: self.seed,
            p_drop: self.train.p_drop,
            train_stride: self.train.train_stride,
            val_stride: self.train.val_stride,
            ..TrainConfig::default()
        }
    }

    /// Model label used in result rows.
    pub fn model_label(&self) -> String {
        let kind = match self.model.predictor {
            PredictorKind::TwoLayer => "2l",
            PredictorKind::IndLin => "indlin",
            PredictorKind::Mean => "mean",
            PredictorKind::DLinear => "dlinear",
        };
        format!("cats-{kind}")
    }
}
