//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/context"
//! t_eval = [0, 1, 2, 3]
//!
//! [backbone]
//! kind = "mlp"
//! d_x = 88
//! d_h = 64
//! d_y = 9
//! layers = 4
//!
//! [projector]
//! kind = "low_rank"
//! d_z = 16
//! rank = 4
//!
//! [[adapters]]
//! variant = "tied_film"
//!
//! [train]
//! t_unroll = 1
//! epochs = 30
//!
//! [dataset]
//! kind = "context"
//! n_train = 2000
//! n_eval = 500
//! len = 8
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::data::{self, context, gen_blobs, listops, Dataset};
use crate::error::{CflError, Result};
use crate::feedback::{AdapterSpec, ProjectorSpec};
use crate::model::ModelSpec;
use crate::refine::Mode;
use crate::training::{LossKind, LossWeights, OptimizerSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    pub t_eval: Vec<usize>,
    pub backbone: BackboneSpec,
    pub projector: ProjectorSpec,
    /// The CFL variants trained next to the `T = 0` baseline. Empty runs the
    /// baseline alone.
    #[serde(default)]
    pub adapters: Vec<AdapterSpec>,
    pub train: TrainSection,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub latency: LatencySection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub t_unroll: usize,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    #[serde(default = "default_true")]
    pub freeze_projector_basis: bool,
    #[serde(default = "default_true")]
    pub freeze_merged_base: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_latency_t")]
    pub t_list: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        Self {
            enabled: true,
            t_list: default_latency_t(),
            reps: default_reps(),
            warmup: default_warmup(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n_train: usize,
        n_eval: usize,
        d: usize,
        #[serde(default = "default_sep")]
        sep: f64,
    },
    Context {
        n_train: usize,
        n_eval: usize,
        len: usize,
    },
    Listops {
        n_train: usize,
        n_eval: usize,
        max_depth: usize,
        max_len: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        n_eval: usize,
    },
}

fn default_batch() -> usize {
    32
}
fn default_true() -> bool {
    true
}
fn default_latency_t() -> Vec<usize> {
    vec![0, 1, 2, 3, 4]
}
fn default_reps() -> usize {
    30
}
fn default_warmup() -> usize {
    3
}
fn default_sep() -> f64 {
    4.0
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CflError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CflError::Config(e.to_string()))
    }

    /// The model for one adapter variant; the baseline uses the first
    /// variant (or the default one) with `F = ∅`.
    pub fn model_spec(&self, adapter: Option<&AdapterSpec>) -> ModelSpec {
        let spec = ModelSpec {
            backbone: self.backbone.clone(),
            projector: self.projector.clone(),
            adapter: adapter
                .or(self.adapters.first())
                .cloned()
                .unwrap_or_else(|| AdapterSpec::new(crate::feedback::AdapterVariant::TiedFilm)),
            seed: self.seed,
        };
        if adapter.is_some() {
            spec
        } else {
            spec.without_feedback()
        }
    }

    pub fn train_config(&self, t_unroll: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            t_unroll,
            mode: self.mode,
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: self.seed,
            freeze_projector_basis: t.freeze_projector_basis,
            freeze_merged_base: t.freeze_merged_base,
            loss: t.loss,
            loss_weights: if t_unroll == t.t_unroll { t.loss_weights.clone() } else { None },
            t_eval: if t_unroll == 0 { vec![0] } else { self.t_eval.clone() },
        }
    }

    /// Checks every cross-field constraint without allocating a model or a
    /// dataset.
    pub fn validate(&self) -> Result<()> {
        if self.t_eval.is_empty() {
            return Err(CflError::Config("t_eval must list at least one T".into()));
        }
        self.model_spec(None).validate()?;
        for a in &self.adapters {
            self.model_spec(Some(a)).validate()?;
        }
        self.train_config(self.train.t_unroll).validate()?;
        if self.latency.enabled && (self.latency.reps < 30 || self.latency.t_list.is_empty()) {
            return Err(CflError::Config("latency sweep needs reps >= 30 and a non-empty t_list".into()));
        }
        let dims = self.backbone.dims();
        let mlp = matches!(self.backbone, BackboneSpec::Mlp(_));
        let need = |ok: bool, msg: String| if ok { Ok(()) } else { Err(CflError::Config(msg)) };
        match &self.dataset {
            DatasetSpec::Blobs { n_train, d, .. } => {
                need(*n_train > 0, "n_train must be positive".into())?;
                need(mlp && dims.d_in == *d, format!("blobs of width {d} need an MLP with d_x = {d}"))?;
                need(dims.d_y >= 2, "blobs have 2 classes; d_y must be at least 2".into())
            }
            DatasetSpec::Context { n_train, len, .. } => {
                need(*n_train > 0, "n_train must be positive".into())?;
                need(*len >= 4, "context task needs len >= 4".into())?;
                need(dims.d_y >= context::VALUES, format!("context task needs d_y >= {}", context::VALUES))?;
                match &self.backbone {
                    BackboneSpec::Mlp(m) => need(
                        m.d_x == len * context::VOCAB,
                        format!("one-hot context input needs d_x = {}", len * context::VOCAB),
                    ),
                    BackboneSpec::Transformer(t) => need(
                        t.vocab >= context::VOCAB && t.max_len >= *len,
                        format!("context task needs vocab >= {} and max_len >= {len}", context::VOCAB),
                    ),
                }
            }
            DatasetSpec::Listops { n_train, max_depth, max_len, .. } => {
                need(*n_train > 0, "n_train must be positive".into())?;
                need(*max_depth >= 1 && (4..=512).contains(max_len), "listops bounds out of range".into())?;
                need(dims.d_y >= listops::CLASSES, format!("listops needs d_y >= {}", listops::CLASSES))?;
                match &self.backbone {
                    BackboneSpec::Transformer(t) => need(
                        t.vocab >= listops::VOCAB && t.max_len >= *max_len,
                        format!("listops needs vocab >= {} and max_len >= {max_len}", listops::VOCAB),
                    ),
                    BackboneSpec::Mlp(_) => need(false, "listops sequences vary in length; use a transformer".into()),
                }
            }
            DatasetSpec::Idx { .. } => need(mlp, "IDX images need an MLP backbone".into()),
        }
    }

    /// Generates or loads the dataset and splits off the evaluation part.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let seed = self.seed;
        let (all, n_eval) = match &self.dataset {
            DatasetSpec::Blobs { n_train, n_eval, d, sep } => (gen_blobs(seed, n_train + n_eval, *d, *sep)?, *n_eval),
            DatasetSpec::Context { n_train, n_eval, len } => {
                let d = context::gen_context_task(seed, n_train + n_eval, *len)?;
                let d = if matches!(self.backbone, BackboneSpec::Mlp(_)) { d.one_hot(context::VOCAB)? } else { d };
                (d, *n_eval)
            }
            DatasetSpec::Listops {
                n_train,
                n_eval,
                max_depth,
                max_len,
            } => (listops::gen_listops_mini(seed, n_train + n_eval, *max_depth, *max_len)?, *n_eval),
            DatasetSpec::Idx { images, labels, n_eval } => (data::idx::load_idx_images(images, labels)?, *n_eval),
        };
        if n_eval >= all.len() {
            return Err(CflError::Config(format!("n_eval = {n_eval} leaves no training data")));
        }
        let d_in = self.backbone.dims().d_in;
        if let data::Inputs::Dense(x) = &all.inputs {
            if x.shape()[1] != d_in {
                return Err(CflError::Config(format!("inputs have width {}, backbone expects {d_in}", x.shape()[1])));
            }
        }
        if all.classes > self.backbone.dims().d_y {
            return Err(CflError::Config(format!("{} classes exceed d_y", all.classes)));
        }
        all.split_at(all.len() - n_eval)
    }
}
