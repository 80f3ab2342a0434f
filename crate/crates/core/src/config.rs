//! Run configuration: one JSON document describing model, loss, optimizer,
//! data and output location. Unknown keys are rejected, and every field is
//! checked before any data is read or any weight is initialized.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossMode};
use crate::network::{self, HeadSpec, LayerSpec, Model, Network, PlacementConfig};
use crate::rng::RngState;
use crate::trainer::{Schedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub schedule: Schedule,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 1 gives bit-identical runs.
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX image/label pairs. Relative paths resolve against the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
        #[serde(default)]
        mean_subtract: bool,
    },
    Synthetic { train: SynthSpec, val: SynthSpec },
}

fn default_checkpoint() -> String {
    "checkpoint.cldl".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight initialization and epoch shuffles.
    pub seed: u64,
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub body: Vec<LayerSpec>,
    /// One entry per head, or a single entry used for every head.
    pub heads: Vec<HeadSpec>,
    pub placement: PlacementConfig,
    pub loss: LossConfig,
    pub trainer: TrainerSection,
    pub data: DataSource,
    pub output_dir: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
    /// Seeds used by `compare`; empty means just `seed`.
    #[serde(default)]
    pub compare_seeds: Vec<u64>,
}

/// JSON schema of [`RunConfig`].
pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

impl RunConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data and output paths are resolved
    /// against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DataSource::Idx { train_images, train_labels, val_images, val_labels, .. } = &mut self.data {
            for p in [train_images, train_labels, val_images, val_labels] {
                fix(p);
            }
        }
    }

    pub fn head_count(&self) -> usize {
        self.placement.heads
    }

    /// Head specs expanded to one per head.
    pub fn head_specs(&self) -> Vec<HeadSpec> {
        if self.heads.len() == 1 {
            vec![self.heads[0].clone(); self.head_count()]
        } else {
            self.heads.clone()
        }
    }

    pub fn weight_layer_count(&self) -> usize {
        self.body.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn attach_points(&self) -> Result<Vec<usize>> {
        network::place_heads(self.weight_layer_count(), &self.placement)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.trainer.schedule,
            momentum: self.trainer.momentum,
            batch_size: self.trainer.batch_size,
            epochs: self.trainer.epochs,
            seed: self.seed,
            threads: self.trainer.threads,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(&self.checkpoint)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("at `{name}`: {}", strip_config(e)));
        if self.classes < 2 {
            return Err(Error::Config(format!("at `classes`: need at least 2, got {}", self.classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config("at `input_shape`: extents must be positive".into()));
        }
        if self.body.iter().all(|l| !l.is_weighted()) {
            return Err(Error::Config("at `body`: needs at least one dense or conv layer".into()));
        }
        let m = self.head_count();
        if m == 0 {
            return Err(Error::Config("at `placement.heads`: need at least one head".into()));
        }
        if self.heads.len() != 1 && self.heads.len() != m {
            return Err(Error::Config(format!(
                "at `heads`: {} entries for {m} heads (give 1 or {m})",
                self.heads.len()
            )));
        }
        self.attach_points().map_err(|e| field("placement", e))?;
        self.loss.validate(m).map_err(|e| field("loss", e))?;
        self.train_config().validate().map_err(|e| field("trainer", e))?;
        if let DataSource::Synthetic { train, val } = &self.data {
            train.validate().map_err(|e| field("data.train", e))?;
            val.validate().map_err(|e| field("data.val", e))?;
            if train.tiers.len() != self.classes || val.tiers.len() != self.classes {
                return Err(Error::Config(format!(
                    "at `data`: synthetic tiers must list {} classes",
                    self.classes
                )));
            }
            if self.input_shape != [2] {
                return Err(Error::Config("at `input_shape`: synthetic data is [2]".into()));
            }
        }
        if self.checkpoint.is_empty() {
            return Err(Error::Config("at `checkpoint`: empty file name".into()));
        }
        Ok(())
    }

    /// Builds and initializes the model from `seed`.
    pub fn build_model(&self) -> Result<Model> {
        self.build_model_with(self.seed, &self.head_specs(), &self.attach_points()?)
    }

    pub fn build_model_with(&self, seed: u64, heads: &[HeadSpec], attach: &[usize]) -> Result<Model> {
        let mut rng = RngState::new(seed);
        Model::build(&self.body, &self.input_shape, heads, attach, self.classes, &mut rng)
    }

    /// Checks shapes through the body without allocating weights.
    pub fn check_body(&self) -> Result<()> {
        Network::build(&self.body, &self.input_shape, &mut RngState::new(0)).map(|_| ())
    }

    /// Training and validation sets, preprocessed as configured and reshaped
    /// to `input_shape`.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let (train, val) = match &self.data {
            DataSource::Idx { train_images, train_labels, val_images, val_labels, mean_subtract } => {
                let mut train = data::load_idx(train_images, train_labels, Split::Train)?;
                let mut val = data::load_idx(val_images, val_labels, Split::Val)?;
                if *mean_subtract {
                    data::preprocess_mean_subtract(&mut train, &mut [&mut val])?;
                }
                (train, val)
            }
            DataSource::Synthetic { train, val } => (
                data::generate_synthetic(train, Split::Train)?,
                data::generate_synthetic(val, Split::Val)?,
            ),
        };
        let fit = |ds: LabeledDataset| -> Result<LabeledDataset> {
            if ds.classes() > self.classes {
                return Err(Error::Consistency(format!(
                    "data has labels up to {} but config says {} classes",
                    ds.classes(),
                    self.classes
                )));
            }
            ds.with_classes(self.classes)?.reshaped(&self.input_shape)
        };
        Ok((fit(train)?, fit(val)?))
    }

    /// The same run with a different loss mode. `single` keeps only the top
    /// head with weight 1.
    pub fn for_mode(&self, mode: LossMode) -> RunConfig {
        let mut cfg = self.clone();
        let m = self.head_count();
        if mode == LossMode::Single {
            let top = self.head_specs().pop().expect("at least one head");
            cfg.heads = vec![top];
            cfg.placement = PlacementConfig {
                heads: 1,
                gamma: self.placement.gamma,
                indices: Some(vec![self.weight_layer_count()]),
            };
            cfg.loss.lambda = vec![1.0];
        } else {
            cfg.heads = self.head_specs();
            cfg.loss.lambda = self.loss.lambda.clone();
            debug_assert_eq!(cfg.loss.lambda.len(), m);
        }
        cfg.loss.mode = mode;
        cfg
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SYNTH: &str = r#"{
        "seed": 3,
        "input_shape": [2],
        "classes": 4,
        "body": [
            {"kind": "dense", "units": 8}, {"kind": "relu"},
            {"kind": "dense", "units": 8}, {"kind": "relu"},
            {"kind": "dense", "units": 4}
        ],
        "heads": [{"kind": "linear"}, {"kind": "linear"}, {"kind": "softmax"}],
        "placement": {"heads": 3, "gamma": 0.8},
        "loss": {"mode": "cldl", "lambda": [0.3, 0.3, 1.0], "alpha": 0.0001},
        "trainer": {"schedule": {"kind": "constant", "rate": 0.05}, "momentum": 0.9, "batch_size": 16, "epochs": 2},
        "data": {"kind": "synthetic",
                 "train": {"tiers": ["linear", "linear", "xor-like", "xor-like"], "samples_per_class": 20, "noise": 0.05, "seed": 1},
                 "val": {"tiers": ["linear", "linear", "xor-like", "xor-like"], "samples_per_class": 10, "noise": 0.05, "seed": 2}},
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_json(SYNTH).unwrap();
        assert_eq!(cfg.attach_points().unwrap(), vec![1, 2, 3]);
        assert_eq!(cfg.checkpoint, "checkpoint.cldl");
        assert_eq!(cfg.trainer.threads, 1);
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = SYNTH.replace("\"momentum\": 0.9", "\"momentum\": 0.9, \"nesterov\": true");
        let msg = RunConfig::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("trainer") && msg.contains("nesterov"), "{msg}");
    }

    #[test]
    fn semantic_errors_are_field_level() {
        let bad = SYNTH.replace("[0.3, 0.3, 1.0]", "[0.3, 1.0]");
        let msg = RunConfig::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("`loss`"), "{msg}");
        let bad = SYNTH.replace("\"heads\": 3, \"gamma\": 0.8", "\"heads\": 5, \"gamma\": 0.8");
        let msg = RunConfig::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("`placement`") || msg.contains("`heads`"), "{msg}");
        let bad = SYNTH.replace("\"rate\": 0.05", "\"rate\": -1");
        assert!(RunConfig::from_json(&bad).unwrap_err().to_string().contains("`trainer`"));
    }

    #[test]
    fn single_mode_keeps_top_head_only() {
        let cfg = RunConfig::from_json(SYNTH).unwrap();
        let s = cfg.for_mode(LossMode::Single);
        s.validate().unwrap();
        assert_eq!(s.attach_points().unwrap(), vec![3]);
        assert_eq!(s.head_specs(), vec![HeadSpec::Softmax]);
        let d = cfg.for_mode(LossMode::DsnStar);
        assert_eq!(d.loss.lambda, cfg.loss.lambda);
        assert_eq!(d.body, cfg.body);
    }

    #[test]
    fn builds_model_and_data() {
        let cfg = RunConfig::from_json(SYNTH).unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.head_count(), 3);
        let (train, val) = cfg.load_data().unwrap();
        assert_eq!((train.len(), val.len()), (80, 40));
        assert_eq!(train.sample_shape(), &[2]);
    }

    #[test]
    fn published_schema_is_current() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/run-config.schema.json");
        let published: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).expect("schema file")).unwrap();
        assert_eq!(published, schema(), "regenerate with `cldl schema > docs/run-config.schema.json`");
    }
}
