//! Run configuration: defaults, flat `key = value` files with `#` comments,
//! overrides, and canonical (sorted-key) JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::encoder::{Encoder, EncoderConfig};
use crate::entity::{EntityModel, EntityModelConfig};
use crate::error::{Error, Result};
use crate::labels::{LabelSet, RelationLabelSet};
use crate::relation::{FeatureMode, MarkerVocabulary, RelationModel, RelationModelConfig};
use crate::train::{TrainConfig, TrainingSource};

pub const ENCODER_PREFIX: &str = "encoder";
pub const ENTITY_PREFIX: &str = "entity";
pub const RELATION_PREFIX: &str = "relation";

/// Every tunable of a run. Field names are the config-file keys and, in
/// kebab case, the command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub dropout: f64,

    pub max_span_len: usize,
    pub width_emb_dim: usize,
    pub ffnn_hidden: usize,

    pub feature_mode: FeatureMode,
    pub type_emb_dim: usize,
    pub eloss_hidden: usize,

    pub epochs_entity: usize,
    pub epochs_relation: usize,
    pub batch_entity: usize,
    pub batch_relation: usize,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub lr_relation: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub shared_encoder: bool,
    pub entity_aux_relation_loss: bool,
    pub relation_training_source: TrainingSource,
    /// 0 disables clipping.
    pub max_grad_norm: f64,
    pub jackknife_k: usize,
    pub prune_lambda: f64,

    /// Context window in tokens; 0 means the bare sentence.
    pub window: usize,
    pub token_budget: usize,

    /// Empty lists are filled from the training corpus.
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
    pub symmetric_relations: Vec<String>,

    pub train_path: Option<String>,
    pub dev_path: Option<String>,
    pub test_path: Option<String>,
    pub entity_checkpoint: Option<String>,
    pub relation_checkpoint: Option<String>,
    pub output: Option<String>,
    pub history: Option<String>,
}

/// Desk-scale defaults: a small encoder trained from scratch at 1e-3, sized
/// for the synthetic corpus on one CPU.
impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EntityModelConfig::default();
        RunConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            max_position: 512,
            dropout: 0.1,
            max_span_len: e.max_span_len,
            width_emb_dim: 32,
            ffnn_hidden: 64,
            feature_mode: FeatureMode::TypedMarkers,
            type_emb_dim: 32,
            eloss_hidden: 32,
            epochs_entity: 20,
            epochs_relation: 20,
            batch_entity: 4,
            batch_relation: 4,
            lr_encoder: 1e-3,
            lr_heads: 1e-3,
            lr_relation: 1e-3,
            warmup_ratio: t.warmup_ratio,
            seed: t.seed,
            shared_encoder: t.shared_encoder,
            entity_aux_relation_loss: t.entity_aux_relation_loss,
            relation_training_source: t.relation_training_source,
            max_grad_norm: 0.0,
            jackknife_k: t.jackknife_k,
            prune_lambda: t.prune_lambda,
            window: 100,
            token_budget: 250,
            entity_types: Vec::new(),
            relation_types: Vec::new(),
            symmetric_relations: Vec::new(),
            train_path: None,
            dev_path: None,
            test_path: None,
            entity_checkpoint: None,
            relation_checkpoint: None,
            output: None,
            history: None,
        }
    }
}

/// Parses one textual value into the JSON type of the default `template`.
fn parse_value(key: &str, raw: &str, template: &Value) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("`{key}` expects {what}, got `{raw}`"));
    let raw = raw.trim();
    Ok(match template {
        Value::Bool(_) => match raw {
            "true" | "1" | "yes" => Value::Bool(true),
            "false" | "0" | "no" => Value::Bool(false),
            _ => return Err(bad("a boolean")),
        },
        Value::Number(n) if n.is_u64() => {
            if key == "window" && raw == "bare" {
                Value::from(0u64)
            } else {
                Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?)
            }
        }
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.to_string()))
                .collect(),
        ),
        Value::String(_) | Value::Null => {
            if raw.is_empty() {
                Value::Null
            } else {
                Value::String(raw.to_string())
            }
        }
        Value::Object(_) => return Err(bad("a scalar")),
    })
}

impl RunConfig {
    /// Config keys in canonical order.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()).expect("config serializes") {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("config is an object"),
        }
    }

    /// Applies `(key, value)` overrides in order; later ones win.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<RunConfig> {
        let defaults = match serde_json::to_value(RunConfig::default()).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        };
        let mut current = match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        };
        for (key, raw) in pairs {
            let key = key.trim().replace('-', "_");
            let template = defaults
                .get(&key)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            let value = parse_value(&key, raw, template)?;
            current.insert(key, value);
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(current)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the flat `key = value` format on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        RunConfig::default().with_overrides(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Sorted-key JSON; identical configs give identical strings.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.encoder_config(1).validate()?;
        if self.max_span_len == 0 || self.width_emb_dim == 0 || self.ffnn_hidden == 0 {
            return Err(Error::Config("entity model extents must be positive".into()));
        }
        if self.type_emb_dim == 0 || self.eloss_hidden == 0 {
            return Err(Error::Config("relation model extents must be positive".into()));
        }
        if self.token_budget == 0 {
            return Err(Error::Config("token_budget must be positive".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> Option<usize> {
        (self.window > 0).then_some(self.window)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_entity: self.epochs_entity,
            epochs_relation: self.epochs_relation,
            batch_entity: self.batch_entity,
            batch_relation: self.batch_relation,
            lr_encoder: self.lr_encoder,
            lr_heads: self.lr_heads,
            lr_relation: self.lr_relation,
            warmup_ratio: self.warmup_ratio,
            seed: self.seed,
            shared_encoder: self.shared_encoder,
            entity_aux_relation_loss: self.entity_aux_relation_loss,
            relation_training_source: self.relation_training_source,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
            jackknife_k: self.jackknife_k,
            prune_lambda: self.prune_lambda,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_position: self.max_position,
            dropout: self.dropout,
        }
    }

    /// Markers follow the text vocabulary; null-type markers exist only when
    /// training on pruned spans with typed markers.
    pub fn marker_vocabulary(&self, text_vocab: usize, num_entity_types: usize) -> MarkerVocabulary {
        let include_null = self.relation_training_source == TrainingSource::PrunedTyped;
        MarkerVocabulary::new(text_vocab, num_entity_types, include_null)
    }

    /// Feature mode implied by the training source (pruned sources fix the
    /// marker encoding).
    pub fn effective_mode(&self) -> FeatureMode {
        match self.relation_training_source {
            TrainingSource::PrunedTyped => FeatureMode::TypedMarkers,
            TrainingSource::PrunedUntyped => FeatureMode::Markers,
            TrainingSource::PrunedUntypedEloss => FeatureMode::MarkersEloss,
            _ => self.feature_mode,
        }
    }

    /// Entity and relation models for a text vocabulary of `text_vocab`
    /// tokens. Both encoders cover text and marker ids so they can be shared.
    pub fn build_models(
        &self,
        text_vocab: usize,
        entity_labels: &LabelSet,
        relation_labels: &RelationLabelSet,
    ) -> Result<(EntityModel, RelationModel)> {
        let markers = self.marker_vocabulary(text_vocab, entity_labels.len());
        let encoder = Encoder::new(self.encoder_config(markers.end()), ENCODER_PREFIX)?;
        let mut entity = EntityModel::new(
            encoder.clone(),
            EntityModelConfig {
                max_span_len: self.max_span_len,
                width_emb_dim: self.width_emb_dim,
                ffnn_hidden: self.ffnn_hidden,
            },
            entity_labels.clone(),
            ENTITY_PREFIX,
        )?;
        if self.entity_aux_relation_loss {
            entity = entity.with_aux_relation(relation_labels.labels.num_classes());
        }
        let relation = RelationModel::new(
            encoder,
            RelationModelConfig {
                max_span_len: self.max_span_len,
                width_emb_dim: self.width_emb_dim,
                type_emb_dim: self.type_emb_dim,
                eloss_hidden: self.eloss_hidden,
            },
            self.effective_mode(),
            entity_labels.clone(),
            relation_labels.clone(),
            markers,
            RELATION_PREFIX,
        )?;
        Ok((entity, relation))
    }
}

/// Object with the keys of `cfg`, for callers that need raw access.
pub fn config_map(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is an object"),
    }
}
