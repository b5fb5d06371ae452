//! Optimization: Adam with a linear warmup/decay schedule, deterministic
//! shuffling, and the entity, relation and shared-encoder training loops.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{jackknife_folds, Entity, Relation};
use crate::entity::{entity_loss, enumerate_spans, gold_span_labels, predict_entities, top_lambda_spans, argmax, EntityModel, SentenceInput, Span};
use crate::error::{Error, Result};
use crate::eval::{score_sentences, SentenceAnnotations};
use crate::labels::{LabelSet, NULL_LABEL};
use crate::pipeline::PreparedSentence;
use crate::relation::{gold_candidates, ordered_pairs, pair_targets, relation_loss, RelationCandidate, RelationModel, TypedSpan};
use crate::tensor::{Gradients, Graph, ParameterStore, Var};

/// Learning-rate multiple of `base_lr`: linear ramp from 0 over the first
/// `warmup_ratio * total_steps` steps, then linear decay to 0.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_ratio * total;
    if step < warmup {
        base_lr * step / warmup
    } else if total > warmup {
        base_lr * (total - step) / (total - warmup)
    } else {
        base_lr
    }
}

/// Adam without weight decay; state is kept per parameter index.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, t)| t.data().len()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// Updates every parameter that has a gradient; `lr[i]` is the rate for
    /// parameter index `i`.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: &[f64]) {
        for (idx, g) in grads.param_grads() {
            self.steps[idx] += 1;
            let t = self.steps[idx] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let p = store.by_index_mut(idx).1.data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr[idx] * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Candidate construction for relation training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSource {
    /// Gold spans and gold types.
    Gold,
    /// Entities predicted on each held-out fold by a model trained on the rest.
    Jackknife,
    /// Top-scoring spans with typed markers (null type included).
    PrunedTyped,
    /// Top-scoring spans with untyped markers.
    PrunedUntyped,
    /// Untyped markers plus the auxiliary entity-type loss.
    PrunedUntypedEloss,
}

impl TrainingSource {
    pub const ALL: [TrainingSource; 5] = [
        TrainingSource::Gold,
        TrainingSource::Jackknife,
        TrainingSource::PrunedTyped,
        TrainingSource::PrunedUntyped,
        TrainingSource::PrunedUntypedEloss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingSource::Gold => "gold",
            TrainingSource::Jackknife => "jackknife",
            TrainingSource::PrunedTyped => "pruned_typed",
            TrainingSource::PrunedUntyped => "pruned_untyped",
            TrainingSource::PrunedUntypedEloss => "pruned_untyped_eloss",
        }
    }

    pub fn is_pruned(self) -> bool {
        matches!(
            self,
            TrainingSource::PrunedTyped | TrainingSource::PrunedUntyped | TrainingSource::PrunedUntypedEloss
        )
    }
}

impl fmt::Display for TrainingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainingSource::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown relation training source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_entity: usize,
    pub epochs_relation: usize,
    pub batch_entity: usize,
    pub batch_relation: usize,
    /// Entity-model encoder rate.
    pub lr_encoder: f64,
    /// Entity-model head rate.
    pub lr_heads: f64,
    /// Single rate for the whole relation model.
    pub lr_relation: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub shared_encoder: bool,
    pub entity_aux_relation_loss: bool,
    pub relation_training_source: TrainingSource,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub jackknife_k: usize,
    pub prune_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_entity: 100,
            epochs_relation: 10,
            batch_entity: 16,
            batch_relation: 32,
            lr_encoder: 1e-5,
            lr_heads: 5e-4,
            lr_relation: 2e-5,
            warmup_ratio: 0.1,
            seed: 42,
            shared_encoder: false,
            entity_aux_relation_loss: false,
            relation_training_source: TrainingSource::Gold,
            max_grad_norm: None,
            jackknife_k: 10,
            prune_lambda: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_heads", self.lr_heads),
            ("lr_relation", self.lr_relation),
            ("prune_lambda", self.prune_lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!("warmup_ratio must lie in (0, 1), got {}", self.warmup_ratio)));
        }
        if self.batch_entity == 0 || self.batch_relation == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {n}")));
            }
        }
        if self.jackknife_k < 2 {
            return Err(Error::Config("jackknife_k must be at least 2".into()));
        }
        Ok(())
    }
}

/// One JSON-lines history record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ent_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relplus_f1: Option<f64>,
}

impl HistoryRecord {
    fn train(epoch: usize, loss: f64) -> Self {
        HistoryRecord {
            epoch,
            split: "train".into(),
            loss,
            ent_f1: None,
            rel_f1: None,
            relplus_f1: None,
        }
    }
}

pub fn history_jsonl(history: &[HistoryRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev score (last epoch when
    /// there is no dev set).
    pub store: ParameterStore,
    pub history: Vec<HistoryRecord>,
    pub best_epoch: usize,
}

/// Dev-set evaluation result; `score` drives model selection.
struct DevResult {
    record: HistoryRecord,
    score: f64,
}

fn divergence(what: &str, epoch: usize, step: usize) -> Error {
    Error::Divergence(format!("non-finite {what} at epoch {epoch}, step {step}"))
}

/// Shared optimization loop.
///
/// Per-example gradients of a batch are computed in parallel and summed in
/// batch order, so results do not depend on thread scheduling.
fn optimize<E, L, D>(
    mut store: ParameterStore,
    examples: &[E],
    epochs: usize,
    batch_size: usize,
    base_lr: &[f64],
    cfg: &TrainConfig,
    dropout: bool,
    loss_fn: L,
    mut dev_fn: Option<D>,
) -> Result<TrainOutcome>
where
    E: Sync,
    L: Fn(&mut Graph<'_>, &E) -> Result<Var> + Sync,
    D: FnMut(&ParameterStore, usize) -> Result<DevResult>,
{
    let steps_per_epoch = examples.len().div_ceil(batch_size);
    let total = steps_per_epoch * epochs;
    let mut adam = Adam::new(&store);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let initial: Result<Vec<f64>> = examples
        .par_iter()
        .map(|e| {
            let mut g = Graph::inference(&store);
            let l = loss_fn(&mut g, e)?;
            Ok(g.value(l)[0])
        })
        .collect();
    let initial: f64 = initial?.iter().sum();
    if !initial.is_finite() {
        return Err(divergence("loss", 0, 0));
    }
    history.push(HistoryRecord::train(0, initial));

    let (mut best, mut best_score, mut best_epoch) = (None, f64::NEG_INFINITY, 0);
    let mut step = 0;
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let per_example: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new(&store);
                    if dropout {
                        g = g.with_dropout_seed(cfg.seed ^ ((step as u64) << 20) ^ i as u64);
                    }
                    let l = loss_fn(&mut g, &examples[i])?;
                    let value = g.value(l)[0];
                    Ok((value, g.backward(l)?.into_params()))
                })
                .collect();
            let mut total_grad: Option<Gradients> = None;
            for r in per_example {
                let (value, grads) = r?;
                epoch_loss += value;
                match total_grad.as_mut() {
                    None => total_grad = Some(grads),
                    Some(t) => t.merge(&grads),
                }
            }
            let mut grads = total_grad.expect("batches are non-empty");
            let norm = grads.squared_norm().sqrt();
            if !epoch_loss.is_finite() || !norm.is_finite() {
                return Err(divergence("loss", epoch, step));
            }
            if let Some(max) = cfg.max_grad_norm {
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            let factor = lr_schedule(step, total, 1.0, cfg.warmup_ratio);
            let lr: Vec<f64> = base_lr.iter().map(|b| b * factor).collect();
            adam.step(&mut store, &grads, &lr);
            step += 1;
        }
        history.push(HistoryRecord::train(epoch, epoch_loss));
        log::info!("epoch {epoch}: train loss {epoch_loss:.4}");
        if let Some(dev) = dev_fn.as_mut() {
            let res = dev(&store, epoch)?;
            log::info!("epoch {epoch}: dev score {:.4}", res.score);
            history.push(res.record);
            if res.score > best_score {
                best_score = res.score;
                best_epoch = epoch;
                best = Some(store.clone());
            }
        }
    }
    let (store, best_epoch) = match best {
        Some(s) => (s, best_epoch),
        None => (store, epochs),
    };
    Ok(TrainOutcome {
        store,
        history,
        best_epoch,
    })
}

fn seeded_store<F>(cfg: &TrainConfig, init: F) -> Result<ParameterStore>
where
    F: FnOnce(&mut ParameterStore, &mut ChaCha8Rng) -> Result<()>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    init(&mut store, &mut rng)?;
    Ok(store)
}

fn encoder_rates(store: &ParameterStore, encoder_prefix: &str, encoder_lr: f64, other_lr: f64) -> Vec<f64> {
    let prefix = format!("{encoder_prefix}.");
    store
        .names()
        .map(|n| if n.starts_with(&prefix) { encoder_lr } else { other_lr })
        .collect()
}

// ---------------------------------------------------------------------------
// Entity model

#[derive(Debug, Clone, PartialEq)]
pub struct EntityExample {
    pub input: SentenceInput,
    pub spans: Vec<Span>,
    pub targets: Vec<usize>,
    /// Ordered gold-entity pairs as indices into `spans`, for the auxiliary
    /// relation loss.
    pub aux_pairs: Vec<(usize, usize)>,
    pub aux_targets: Vec<usize>,
}

/// Every enumerated span with its gold class; auxiliary pairs are filled
/// when `relation_labels` is given.
pub fn entity_examples(
    sentences: &[PreparedSentence],
    labels: &LabelSet,
    max_span_len: usize,
    relation_labels: Option<&LabelSet>,
) -> Result<Vec<EntityExample>> {
    sentences
        .iter()
        .map(|p| {
            let spans = enumerate_spans(p.input.target_len, max_span_len);
            let gold: Vec<(Span, usize)> = p
                .gold_entities(labels)?
                .into_iter()
                .map(|t| (t.span, t.label))
                .collect();
            let targets = gold_span_labels(&spans, &gold);
            let (mut aux_pairs, mut aux_targets) = (Vec::new(), Vec::new());
            if let Some(rl) = relation_labels {
                let (pairs, labels) = gold_candidates(&p.sentence, labels, rl)?;
                for (c, l) in pairs.iter().zip(labels) {
                    let i = spans.iter().position(|s| *s == c.subject.span);
                    let j = spans.iter().position(|s| *s == c.object.span);
                    if let (Some(i), Some(j)) = (i, j) {
                        aux_pairs.push((i, j));
                        aux_targets.push(l);
                    }
                }
            }
            Ok(EntityExample {
                input: p.input.clone(),
                spans,
                targets,
                aux_pairs,
                aux_targets,
            })
        })
        .collect()
}

/// Summed span cross-entropy plus, when the model has an auxiliary head, the
/// pair relation loss.
pub fn entity_example_loss(model: &EntityModel, g: &mut Graph<'_>, ex: &EntityExample) -> Result<Var> {
    if ex.spans.is_empty() {
        return g.add_scalars(&[]);
    }
    let hidden = model.encode(g, &ex.input)?;
    let reprs = model.span_reprs(g, hidden, &ex.input, &ex.spans)?;
    let logits = model.classify(g, reprs)?;
    let le = entity_loss(g, logits, &ex.targets)?;
    if model.aux_relation_classes.is_some() && !ex.aux_pairs.is_empty() {
        let lr = model.aux_relation_loss(g, reprs, &ex.aux_pairs, &ex.aux_targets)?;
        g.add_scalars(&[le, lr])
    } else {
        Ok(le)
    }
}

/// Predicted entities per sentence with the summed loss over `examples`.
pub fn entity_predictions(
    model: &EntityModel,
    store: &ParameterStore,
    examples: &[EntityExample],
) -> Result<(Vec<Vec<(Span, usize)>>, f64)> {
    let classes = model.labels.num_classes();
    let per: Vec<Result<(Vec<(Span, usize)>, f64)>> = examples
        .par_iter()
        .map(|ex| {
            if ex.spans.is_empty() {
                return Ok((Vec::new(), 0.0));
            }
            let mut g = Graph::inference(store);
            let (logits, _) = model.forward(&mut g, &ex.input, &ex.spans)?;
            let loss = entity_loss(&mut g, logits, &ex.targets)?;
            Ok((predict_entities(g.value(logits), classes, &ex.spans), g.value(loss)[0]))
        })
        .collect();
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for r in per {
        let (p, l) = r?;
        preds.push(p);
        loss += l;
    }
    Ok((preds, loss))
}

fn to_entities(labels: &LabelSet, spans: &[(Span, usize)]) -> Vec<Entity> {
    spans
        .iter()
        .map(|&(span, c)| Entity {
            span,
            label: labels.name(c).expect("non-null class").to_string(),
        })
        .collect()
}

fn gold_annotations(sentences: &[PreparedSentence]) -> Vec<SentenceAnnotations> {
    sentences
        .iter()
        .map(|p| SentenceAnnotations {
            entities: p.sentence.entities.clone(),
            relations: p.sentence.relations.clone(),
        })
        .collect()
}

fn entity_dev<'a>(
    model: &'a EntityModel,
    dev: &[PreparedSentence],
) -> Result<impl FnMut(&ParameterStore, usize) -> Result<DevResult> + 'a> {
    let examples = entity_examples(dev, &model.labels, model.config.max_span_len, None)?;
    let gold = gold_annotations(dev);
    Ok(move |store: &ParameterStore, epoch: usize| {
        let (preds, loss) = entity_predictions(model, store, &examples)?;
        let pred: Vec<SentenceAnnotations> = preds
            .iter()
            .map(|p| SentenceAnnotations {
                entities: to_entities(&model.labels, p),
                relations: Vec::new(),
            })
            .collect();
        let m = score_sentences(&pred, &gold, &Default::default())?;
        Ok(DevResult {
            record: HistoryRecord {
                epoch,
                split: "dev".into(),
                loss,
                ent_f1: Some(m.ent.f1),
                rel_f1: None,
                relplus_f1: None,
            },
            score: m.ent.f1,
        })
    })
}

/// Trains a fresh entity model (encoder at `lr_encoder`, heads at
/// `lr_heads`), keeping the best dev-F1 epoch.
pub fn train_entity(
    model: &EntityModel,
    train: &[PreparedSentence],
    dev: Option<&[PreparedSentence]>,
    relation_labels: Option<&LabelSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.entity_aux_relation_loss && model.aux_relation_classes.is_none() {
        return Err(Error::Config("entity_aux_relation_loss needs a model with an auxiliary relation head".into()));
    }
    let aux_labels = if cfg.entity_aux_relation_loss { relation_labels } else { None };
    let examples = entity_examples(train, &model.labels, model.config.max_span_len, aux_labels)?;
    let store = seeded_store(cfg, |s, rng| model.init_params(s, rng, true))?;
    let lr = encoder_rates(&store, &model.encoder.prefix, cfg.lr_encoder, cfg.lr_heads);
    let dev_fn = dev.map(|d| entity_dev(model, d)).transpose()?;
    optimize(
        store,
        &examples,
        cfg.epochs_entity,
        cfg.batch_entity,
        &lr,
        cfg,
        model.encoder.config.dropout > 0.0,
        |g, ex| entity_example_loss(model, g, ex),
        dev_fn,
    )
}

// ---------------------------------------------------------------------------
// Relation model

#[derive(Debug, Clone, PartialEq)]
pub struct RelationExample {
    pub input: SentenceInput,
    pub candidates: Vec<RelationCandidate>,
    pub targets: Vec<usize>,
}

/// Ordered pairs of gold entities labelled with gold relations; sentences
/// with fewer than two entities are skipped.
pub fn gold_relation_examples(
    sentences: &[PreparedSentence],
    entity_labels: &LabelSet,
    relation_labels: &LabelSet,
) -> Result<Vec<RelationExample>> {
    let mut out = Vec::new();
    for p in sentences {
        let (candidates, targets) = gold_candidates(&p.sentence, entity_labels, relation_labels)?;
        if !candidates.is_empty() {
            out.push(RelationExample {
                input: p.input.clone(),
                candidates,
                targets,
            });
        }
    }
    Ok(out)
}

/// Ordered pairs of the given typed spans labelled by gold relations
/// (matched on span boundaries).
pub fn candidate_examples(
    sentences: &[PreparedSentence],
    spans: &[Vec<TypedSpan>],
    relation_labels: &LabelSet,
) -> Result<Vec<RelationExample>> {
    let mut out = Vec::new();
    for (p, ents) in sentences.iter().zip(spans) {
        let candidates = ordered_pairs(ents);
        if candidates.is_empty() {
            continue;
        }
        let targets = pair_targets(&p.sentence, &candidates, relation_labels)?;
        out.push(RelationExample {
            input: p.input.clone(),
            candidates,
            targets,
        });
    }
    Ok(out)
}

/// Top `ceil(λn)` spans per sentence. With `gold_types` each span carries its
/// gold class (null when not a gold mention), otherwise its predicted class.
pub fn pruned_spans(
    entity: &EntityModel,
    store: &ParameterStore,
    sentences: &[PreparedSentence],
    lambda: f64,
    gold_types: bool,
) -> Result<Vec<Vec<TypedSpan>>> {
    let classes = entity.labels.num_classes();
    sentences
        .par_iter()
        .map(|p| {
            let spans = enumerate_spans(p.input.target_len, entity.config.max_span_len);
            if spans.is_empty() {
                return Ok(Vec::new());
            }
            let mut g = Graph::inference(store);
            let (logits, _) = entity.forward(&mut g, &p.input, &spans)?;
            let logits = g.value(logits);
            let gold: Vec<(Span, usize)> = p
                .gold_entities(&entity.labels)?
                .into_iter()
                .map(|t| (t.span, t.label))
                .collect();
            let kept = top_lambda_spans(logits, classes, &spans, lambda, p.input.target_len);
            Ok(kept
                .into_iter()
                .map(|span| {
                    let label = if gold_types {
                        gold_span_labels(&[span], &gold)[0]
                    } else {
                        let row = spans.iter().position(|s| *s == span).expect("span from list");
                        argmax(&logits[row * classes..(row + 1) * classes])
                    };
                    TypedSpan { span, label }
                })
                .collect())
        })
        .collect()
}

/// Entities predicted for every sentence, each fold's held-out documents by
/// a model trained on the remaining documents.
pub fn jackknife_entities(
    entity: &EntityModel,
    sentences: &[PreparedSentence],
    cfg: &TrainConfig,
) -> Result<Vec<Vec<TypedSpan>>> {
    let num_docs = sentences.iter().map(|p| p.doc + 1).max().unwrap_or(0);
    let folds = jackknife_folds(num_docs, cfg.jackknife_k)?;
    let mut out = vec![Vec::new(); sentences.len()];
    for (f, fold) in folds.iter().enumerate() {
        let is_holdout = |p: &PreparedSentence| fold.holdout.binary_search(&p.doc).is_ok();
        let train: Vec<PreparedSentence> = sentences.iter().filter(|p| !is_holdout(p)).cloned().collect();
        let held: Vec<usize> = (0..sentences.len()).filter(|&i| is_holdout(&sentences[i])).collect();
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed.wrapping_add(f as u64 + 1);
        log::info!("jackknife fold {}/{}", f + 1, folds.len());
        let trained = train_entity(entity, &train, None, None, &fold_cfg)?;
        let held_sents: Vec<PreparedSentence> = held.iter().map(|&i| sentences[i].clone()).collect();
        let examples = entity_examples(&held_sents, &entity.labels, entity.config.max_span_len, None)?;
        let (preds, _) = entity_predictions(entity, &trained.store, &examples)?;
        for (&i, p) in held.iter().zip(preds) {
            out[i] = p.into_iter().map(|(span, label)| TypedSpan { span, label }).collect();
        }
    }
    Ok(out)
}

/// Relation training examples for the configured source. Every source
/// except `gold` needs a trained entity model.
pub fn relation_examples(
    model: &RelationModel,
    train: &[PreparedSentence],
    entity: Option<(&EntityModel, &ParameterStore)>,
    cfg: &TrainConfig,
) -> Result<Vec<RelationExample>> {
    let rl = &model.relation_labels.labels;
    let need_entity = || {
        entity.ok_or_else(|| {
            Error::Config(format!(
                "relation_training_source `{}` needs a trained entity model",
                cfg.relation_training_source
            ))
        })
    };
    match cfg.relation_training_source {
        TrainingSource::Gold => gold_relation_examples(train, &model.entity_labels, rl),
        TrainingSource::Jackknife => {
            let (em, _) = need_entity()?;
            let spans = jackknife_entities(em, train, cfg)?;
            candidate_examples(train, &spans, rl)
        }
        TrainingSource::PrunedTyped | TrainingSource::PrunedUntyped | TrainingSource::PrunedUntypedEloss => {
            let (em, store) = need_entity()?;
            let gold_types = cfg.relation_training_source == TrainingSource::PrunedUntypedEloss;
            let spans = pruned_spans(em, store, train, cfg.prune_lambda, gold_types)?;
            candidate_examples(train, &spans, rl)
        }
    }
}

fn relation_example_loss(model: &RelationModel, g: &mut Graph<'_>, ex: &RelationExample) -> Result<Var> {
    let out = model.forward(g, &ex.input, &ex.candidates)?;
    relation_loss(g, &out, &ex.targets, &ex.candidates)
}

/// Relations predicted for each example plus the summed loss.
fn relation_predictions(
    model: &RelationModel,
    store: &ParameterStore,
    examples: &[RelationExample],
) -> Result<(Vec<Vec<(RelationCandidate, usize)>>, f64)> {
    let classes = model.num_classes();
    let per: Vec<Result<(Vec<(RelationCandidate, usize)>, f64)>> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::inference(store);
            let out = model.forward(&mut g, &ex.input, &ex.candidates)?;
            let loss = relation_loss(&mut g, &out, &ex.targets, &ex.candidates)?;
            let preds = ex
                .candidates
                .iter()
                .zip(g.value(out.logits).chunks(classes))
                .filter_map(|(c, row)| {
                    let l = argmax(row);
                    (l != NULL_LABEL).then_some((*c, l))
                })
                .collect();
            Ok((preds, g.value(loss)[0]))
        })
        .collect();
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for r in per {
        let (p, l) = r?;
        preds.push(p);
        loss += l;
    }
    Ok((preds, loss))
}

/// Rel and Rel+ of a relation model on `sentences` given gold entities.
pub fn evaluate_relation_gold(
    model: &RelationModel,
    store: &ParameterStore,
    sentences: &[PreparedSentence],
) -> Result<(crate::eval::MetricsReport, f64)> {
    let rl = &model.relation_labels.labels;
    let mut examples = Vec::new();
    let mut owner = Vec::new();
    for (i, p) in sentences.iter().enumerate() {
        let (candidates, targets) = gold_candidates(&p.sentence, &model.entity_labels, rl)?;
        if !candidates.is_empty() {
            examples.push(RelationExample {
                input: p.input.clone(),
                candidates,
                targets,
            });
            owner.push(i);
        }
    }
    let (preds, loss) = relation_predictions(model, store, &examples)?;
    let gold = gold_annotations(sentences);
    let mut pred: Vec<SentenceAnnotations> = sentences
        .iter()
        .map(|p| SentenceAnnotations {
            entities: p.sentence.entities.clone(),
            relations: Vec::new(),
        })
        .collect();
    for (&i, ps) in owner.iter().zip(preds) {
        pred[i].relations = ps
            .into_iter()
            .map(|(c, l)| Relation {
                subject: c.subject.span,
                object: c.object.span,
                label: rl.name(l).expect("non-null class").to_string(),
            })
            .collect();
    }
    let symmetric = model.relation_labels.symmetric_names();
    Ok((score_sentences(&pred, &gold, &symmetric)?, loss))
}

/// Trains a relation model on pre-built examples at the single rate
/// `lr_relation`, keeping the best dev Rel F1 epoch (gold dev entities).
pub fn train_relation_on(
    model: &RelationModel,
    examples: &[RelationExample],
    dev: Option<&[PreparedSentence]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let store = seeded_store(cfg, |s, rng| model.init_params(s, rng, true))?;
    let lr = vec![cfg.lr_relation; store.len()];
    let dev_fn = dev.map(|d| {
        move |store: &ParameterStore, epoch: usize| {
            let (m, loss) = evaluate_relation_gold(model, store, d)?;
            Ok(DevResult {
                record: HistoryRecord {
                    epoch,
                    split: "dev".into(),
                    loss,
                    ent_f1: None,
                    rel_f1: Some(m.rel.f1),
                    relplus_f1: Some(m.relplus.f1),
                },
                score: m.rel.f1,
            })
        }
    });
    optimize(
        store,
        examples,
        cfg.epochs_relation,
        cfg.batch_relation,
        &lr,
        cfg,
        model.encoder.config.dropout > 0.0,
        |g, ex| relation_example_loss(model, g, ex),
        dev_fn,
    )
}

/// Builds examples for `cfg.relation_training_source` and trains.
pub fn train_relation(
    model: &RelationModel,
    train: &[PreparedSentence],
    dev: Option<&[PreparedSentence]>,
    entity: Option<(&EntityModel, &ParameterStore)>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let examples = relation_examples(model, train, entity, cfg)?;
    train_relation_on(model, &examples, dev, cfg)
}

// ---------------------------------------------------------------------------
// Shared encoder

struct JointExample {
    entity: EntityExample,
    relation: Option<RelationExample>,
}

/// Entity and relation models over one encoder, trained on `L_e + L_r`.
///
/// Both models must use the same encoder prefix and configuration. The
/// encoder trains at `lr_encoder`, the entity head at `lr_heads` and the
/// relation head at `lr_relation`.
pub fn train_joint_shared(
    entity: &EntityModel,
    relation: &RelationModel,
    train: &[PreparedSentence],
    dev: Option<&[PreparedSentence]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if entity.encoder != relation.encoder {
        return Err(Error::Config("shared training needs identical encoders".into()));
    }
    let rl = &relation.relation_labels.labels;
    let ent = entity_examples(train, &entity.labels, entity.config.max_span_len, None)?;
    let examples: Vec<JointExample> = ent
        .into_iter()
        .zip(train)
        .map(|(e, p)| {
            let (candidates, targets) = gold_candidates(&p.sentence, &relation.entity_labels, rl)?;
            Ok(JointExample {
                entity: e,
                relation: (!candidates.is_empty()).then(|| RelationExample {
                    input: p.input.clone(),
                    candidates,
                    targets,
                }),
            })
        })
        .collect::<Result<_>>()?;
    let store = seeded_store(cfg, |s, rng| {
        entity.init_params(s, rng, true)?;
        relation.init_params(s, rng, false)
    })?;
    let enc = format!("{}.", entity.encoder.prefix);
    let ent_prefix = format!("{}.", entity.prefix);
    let lr: Vec<f64> = store
        .names()
        .map(|n| {
            if n.starts_with(&enc) {
                cfg.lr_encoder
            } else if n.starts_with(&ent_prefix) {
                cfg.lr_heads
            } else {
                cfg.lr_relation
            }
        })
        .collect();
    let mut dev_fn = None;
    if let Some(d) = dev {
        let mut ent_dev = entity_dev(entity, d)?;
        dev_fn = Some(move |store: &ParameterStore, epoch: usize| {
            let e = ent_dev(store, epoch)?;
            let (m, rel_loss) = evaluate_relation_gold(relation, store, d)?;
            let ent_f1 = e.record.ent_f1.unwrap_or(0.0);
            Ok(DevResult {
                record: HistoryRecord {
                    epoch,
                    split: "dev".into(),
                    loss: e.record.loss + rel_loss,
                    ent_f1: Some(ent_f1),
                    rel_f1: Some(m.rel.f1),
                    relplus_f1: Some(m.relplus.f1),
                },
                score: ent_f1 + m.rel.f1,
            })
        });
    }
    optimize(
        store,
        &examples,
        cfg.epochs_entity,
        cfg.batch_entity,
        &lr,
        cfg,
        entity.encoder.config.dropout > 0.0,
        |g, ex: &JointExample| {
            let le = entity_example_loss(entity, g, &ex.entity)?;
            match &ex.relation {
                Some(r) => {
                    let lr = relation_example_loss(relation, g, r)?;
                    g.add_scalars(&[le, lr])
                }
                None => Ok(le),
            }
        },
        dev_fn,
    )
}
