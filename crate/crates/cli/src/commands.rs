use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ArgMatches;
use serde_json::{json, Value};
use spanrel::checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
use spanrel::config::RunConfig;
use spanrel::corpus::{generate_synthetic, load_corpus, write_corpus, AnnotatedDocument, GrammarConfig, LoadOptions, Vocabulary};
use spanrel::entity::EntityModel;
use spanrel::equivalence::{run_equivalence_suite, EquivalenceConfig};
use spanrel::eval::{compare_predictions, evaluate_documents};
use spanrel::labels::{LabelSet, RelationLabelSet};
use spanrel::pipeline::{prepare_documents, CandidateSource, Predictor};
use spanrel::relation::approx::benchmark_speed;
use spanrel::relation::{InferenceMode, RelationModel};
use spanrel::tensor::ParameterStore;
use spanrel::train::{history_jsonl, train_entity, train_joint_shared, train_relation, TrainOutcome, TrainingSource};
use spanrel::{Error, Result};

use crate::resolve_config;

pub fn dispatch(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(RunConfig::default(), m)?;
    if m.get_flag("show-config") && !needs_checkpoint_base(name) {
        println!("{}", cfg.canonical_json());
        return Ok(());
    }
    match name {
        "gen-data" => gen_data(&cfg, m),
        "train-entity" => cmd_train_entity(&cfg),
        "train-relation" => cmd_train_relation(&cfg),
        "predict" => cmd_predict(m),
        "evaluate" => cmd_evaluate(&cfg, m),
        "check-equivalence" => cmd_check_equivalence(&cfg, m),
        "bench" => cmd_bench(m),
        "sweep-window" => cmd_sweep_window(&cfg, m),
        other => Err(Error::Usage(format!("unknown subcommand `{other}`"))),
    }
}

/// Commands whose config starts from a checkpoint's stored config.
fn needs_checkpoint_base(name: &str) -> bool {
    matches!(name, "predict" | "bench")
}

fn emit(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn required<'a>(value: &'a Option<String>, key: &str) -> Result<&'a str> {
    value
        .as_deref()
        .ok_or_else(|| Error::Usage(format!("`{key}` is required (--{})", key.replace('_', "-"))))
}

fn load_docs(path: &str, cfg: &RunConfig) -> Result<Vec<AnnotatedDocument>> {
    let opts = LoadOptions {
        max_span_len: cfg.max_span_len,
        entity_types: (!cfg.entity_types.is_empty()).then(|| cfg.entity_types.clone()),
        relation_types: (!cfg.relation_types.is_empty()).then(|| cfg.relation_types.clone()),
    };
    let corpus = load_corpus(path, &opts).map_err(|e| match e {
        Error::Io(io) => Error::data(format!("cannot read {path}: {io}")),
        other => other,
    })?;
    if corpus.dropped_entities > 0 {
        log::warn!(
            "{path}: dropped {} entities wider than {} tokens and {} relations on them",
            corpus.dropped_entities,
            cfg.max_span_len,
            corpus.dropped_relations
        );
    }
    Ok(corpus.documents)
}

/// Type names from the config, else every type seen in `docs`.
fn label_sets(cfg: &RunConfig, docs: &[AnnotatedDocument]) -> Result<(LabelSet, RelationLabelSet)> {
    let corpus = spanrel::corpus::Corpus {
        documents: docs.to_vec(),
        ..Default::default()
    };
    let (ents, rels) = corpus.label_names();
    let ents = if cfg.entity_types.is_empty() { ents } else { cfg.entity_types.clone() };
    let rels = if cfg.relation_types.is_empty() { rels } else { cfg.relation_types.clone() };
    let rl = RelationLabelSet::new(LabelSet::new(rels)?).with_symmetric(&cfg.symmetric_relations)?;
    Ok((LabelSet::new(ents)?, rl))
}

fn build_vocab(train: &[AnnotatedDocument]) -> Vocabulary {
    Vocabulary::build(train.iter().flat_map(|d| d.sentences.iter().flatten()))
}

fn write_history(cfg: &RunConfig, out: &TrainOutcome) -> Result<()> {
    if let Some(path) = &cfg.history {
        fs::write(path, history_jsonl(&out.history))?;
    }
    Ok(())
}

fn last_dev(out: &TrainOutcome) -> Value {
    out.history
        .iter()
        .filter(|h| h.split == "dev" && h.epoch == out.best_epoch)
        .last()
        .map(|h| serde_json::to_value(h).expect("history serializes"))
        .unwrap_or(Value::Null)
}

fn gen_data(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let dir = PathBuf::from(m.get_one::<String>("out-dir").expect("required"));
    let docs = *m.get_one::<usize>("docs").expect("default");
    let dev = *m.get_one::<usize>("dev-docs").expect("default");
    let test = *m.get_one::<usize>("test-docs").expect("default");
    if dev + test >= docs {
        return Err(Error::Usage(format!("{dev} dev + {test} test documents leave none of {docs} for training")));
    }
    let mut grammar = GrammarConfig::default();
    if !cfg.entity_types.is_empty() {
        grammar.entity_types = cfg.entity_types.clone();
    }
    if !cfg.relation_types.is_empty() {
        grammar.relation_types = cfg.relation_types.clone();
    }
    let all = generate_synthetic(cfg.seed, docs, &grammar)?;
    fs::create_dir_all(&dir)?;
    let n_train = docs - dev - test;
    let parts = [("train", &all[..n_train]), ("dev", &all[n_train..n_train + dev]), ("test", &all[n_train + dev..])];
    let mut report = serde_json::Map::new();
    for (name, docs) in parts {
        if docs.is_empty() {
            continue;
        }
        let path = dir.join(format!("{name}.jsonl"));
        write_corpus(&path, docs)?;
        report.insert(name.into(), json!({ "path": path, "documents": docs.len() }));
    }
    emit(&Value::Object(report));
    Ok(())
}

struct TrainData {
    vocab: Vocabulary,
    entity_labels: LabelSet,
    relation_labels: RelationLabelSet,
    train: Vec<AnnotatedDocument>,
    dev: Option<Vec<AnnotatedDocument>>,
}

fn train_data(cfg: &RunConfig, from: Option<&CheckpointMeta>) -> Result<TrainData> {
    let train = load_docs(required(&cfg.train_path, "train_path")?, cfg)?;
    let dev = cfg.dev_path.as_deref().map(|p| load_docs(p, cfg)).transpose()?;
    let (vocab, entity_labels, relation_labels) = match from {
        Some(meta) => {
            let (e, r) = meta.labels()?;
            (meta.vocab.clone(), e, r)
        }
        None => {
            let all: Vec<AnnotatedDocument> = train.iter().chain(dev.iter().flatten()).cloned().collect();
            let (e, r) = label_sets(cfg, &all)?;
            (build_vocab(&train), e, r)
        }
    };
    Ok(TrainData {
        vocab,
        entity_labels,
        relation_labels,
        train,
        dev,
    })
}

fn meta(kind: ModelKind, cfg: &RunConfig, data: &TrainData) -> CheckpointMeta {
    CheckpointMeta {
        kind,
        config: cfg.clone(),
        vocab: data.vocab.clone(),
        entity_types: data.entity_labels.names().to_vec(),
        relation_types: data.relation_labels.labels.names().to_vec(),
        symmetric_relations: {
            let mut s: Vec<String> = data.relation_labels.symmetric_names().into_iter().collect();
            s.sort();
            s
        },
    }
}

/// Trains the entity model (or both models over a shared encoder).
fn train_entity_checkpoint(cfg: &RunConfig, data: &TrainData) -> Result<(Checkpoint, TrainOutcome)> {
    let (entity, relation) = cfg.build_models(data.vocab.len(), &data.entity_labels, &data.relation_labels)?;
    let train = prepare_documents(&data.train, &data.vocab, cfg.window());
    let dev = data.dev.as_ref().map(|d| prepare_documents(d, &data.vocab, cfg.window()));
    let tc = cfg.train_config();
    let (kind, out) = if cfg.shared_encoder {
        (ModelKind::Joint, train_joint_shared(&entity, &relation, &train, dev.as_deref(), &tc)?)
    } else {
        let aux = cfg.entity_aux_relation_loss.then_some(&data.relation_labels.labels);
        (ModelKind::Entity, train_entity(&entity, &train, dev.as_deref(), aux, &tc)?)
    };
    let ckpt = Checkpoint {
        meta: meta(kind, cfg, data),
        store: out.store.clone(),
    };
    Ok((ckpt, out))
}

fn train_relation_checkpoint(cfg: &RunConfig, data: &TrainData, entity: Option<&Checkpoint>) -> Result<(Checkpoint, TrainOutcome)> {
    let (_, relation) = cfg.build_models(data.vocab.len(), &data.entity_labels, &data.relation_labels)?;
    let entity_model = entity.map(|c| c.meta.models()).transpose()?.map(|(e, _)| e);
    let entity_pair: Option<(&EntityModel, &ParameterStore)> = entity_model.as_ref().zip(entity.map(|c| &c.store));
    let train = prepare_documents(&data.train, &data.vocab, cfg.window());
    let dev = data.dev.as_ref().map(|d| prepare_documents(d, &data.vocab, cfg.window()));
    let out = train_relation(&relation, &train, dev.as_deref(), entity_pair, &cfg.train_config())?;
    let ckpt = Checkpoint {
        meta: meta(ModelKind::Relation, cfg, data),
        store: out.store.clone(),
    };
    Ok((ckpt, out))
}

fn summary(ckpt: &Checkpoint, out: &TrainOutcome, path: &str) -> Value {
    json!({
        "checkpoint": path,
        "kind": ckpt.meta.kind,
        "parameters": ckpt.store.num_scalars(),
        "epochs": out.history.iter().map(|h| h.epoch).max(),
        "best_epoch": out.best_epoch,
        "best_dev": last_dev(out),
    })
}

fn cmd_train_entity(cfg: &RunConfig) -> Result<()> {
    let output = required(&cfg.output, "output")?;
    let data = train_data(cfg, None)?;
    let (ckpt, out) = train_entity_checkpoint(cfg, &data)?;
    ckpt.save(output)?;
    write_history(cfg, &out)?;
    emit(&summary(&ckpt, &out, output));
    Ok(())
}

fn cmd_train_relation(cfg: &RunConfig) -> Result<()> {
    let output = required(&cfg.output, "output")?;
    let entity = cfg.entity_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if entity.is_none() && cfg.relation_training_source != TrainingSource::Gold {
        return Err(Error::Usage(format!(
            "relation_training_source `{}` needs --entity-checkpoint",
            cfg.relation_training_source
        )));
    }
    let data = train_data(cfg, entity.as_ref().map(|c| &c.meta))?;
    let (ckpt, out) = train_relation_checkpoint(cfg, &data, entity.as_ref())?;
    ckpt.save(output)?;
    write_history(cfg, &out)?;
    emit(&summary(&ckpt, &out, output));
    Ok(())
}

/// Loads entity and relation checkpoints; a joint checkpoint serves both.
fn load_pipeline(cfg: &RunConfig) -> Result<(Checkpoint, Checkpoint)> {
    let entity = Checkpoint::load(required(&cfg.entity_checkpoint, "entity_checkpoint")?)?;
    let relation = match (&cfg.relation_checkpoint, entity.meta.kind) {
        (Some(p), _) => Checkpoint::load(p)?,
        (None, ModelKind::Joint) => entity.clone(),
        (None, _) => return Err(Error::Usage("`relation_checkpoint` is required (--relation-checkpoint)".into())),
    };
    if entity.meta.kind == ModelKind::Relation {
        return Err(Error::Config("entity_checkpoint holds a relation model".into()));
    }
    if relation.meta.kind == ModelKind::Entity {
        return Err(Error::Config("relation_checkpoint holds an entity model".into()));
    }
    if entity.meta.vocab != relation.meta.vocab || entity.meta.entity_types != relation.meta.entity_types {
        return Err(Error::Config(
            "entity and relation checkpoints were trained with different vocabularies or entity types".into(),
        ));
    }
    Ok((entity, relation))
}

fn inference_mode(name: &str, cfg: &RunConfig) -> InferenceMode {
    match name {
        "approx" => InferenceMode::Approx {
            token_budget: cfg.token_budget,
        },
        _ => InferenceMode::Full,
    }
}

fn candidate_source(cfg: &RunConfig) -> CandidateSource {
    match cfg.relation_training_source {
        TrainingSource::PrunedTyped | TrainingSource::PrunedUntyped | TrainingSource::PrunedUntypedEloss => {
            CandidateSource::Pruned { lambda: cfg.prune_lambda }
        }
        _ => CandidateSource::Entities,
    }
}

/// Entity and relation models of a pipeline with their stores.
struct Pipeline {
    entity: EntityModel,
    entity_store: ParameterStore,
    relation: RelationModel,
    relation_store: ParameterStore,
    vocab: Vocabulary,
    symmetric: std::collections::HashSet<String>,
}

impl Pipeline {
    fn from_checkpoints(entity: Checkpoint, relation: Checkpoint) -> Result<Pipeline> {
        let (em, _) = entity.meta.models()?;
        let (_, rm) = relation.meta.models()?;
        let symmetric = rm.relation_labels.symmetric_names();
        Ok(Pipeline {
            entity: em,
            entity_store: entity.store,
            relation: rm,
            relation_store: relation.store,
            vocab: entity.meta.vocab,
            symmetric,
        })
    }

    fn predictor(&self, mode: InferenceMode, candidates: CandidateSource) -> Predictor<'_> {
        Predictor {
            entity: &self.entity,
            entity_store: &self.entity_store,
            relation: &self.relation,
            relation_store: &self.relation_store,
            mode,
            candidates,
        }
    }
}

fn cmd_predict(m: &ArgMatches) -> Result<()> {
    let user = resolve_config(RunConfig::default(), m)?;
    let (entity, relation) = load_pipeline(&user)?;
    // Stored config first, then the caller's file and flags.
    let cfg = resolve_config(relation.meta.config.clone(), m)?;
    if m.get_flag("show-config") {
        println!("{}", cfg.canonical_json());
        return Ok(());
    }
    relation.check_config(&cfg)?;
    let input = required(&cfg.test_path, "test_path")?;
    let output = required(&cfg.output, "output")?;
    let mode_name = m.get_one::<String>("mode").expect("default");
    let docs = load_docs(input, &cfg)?;
    let pipeline = Pipeline::from_checkpoints(entity, relation)?;
    let start = Instant::now();
    let run = pipeline
        .predictor(inference_mode(mode_name, &cfg), candidate_source(&cfg))
        .predict_documents(&docs, &pipeline.vocab, cfg.window())?;
    let wall_ms = start.elapsed().as_secs_f64() * 1000.0;
    write_corpus(output, &run.documents)?;
    let metrics = evaluate_documents(&run.documents, &docs, &pipeline.symmetric)?;
    emit(&json!({
        "mode": mode_name,
        "output": output,
        "documents": run.documents.len(),
        "pairs": run.pairs,
        "encoder_passes": run.encoder_passes,
        "wall_ms": wall_ms,
        "metrics": metrics,
    }));
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let pred = load_docs(m.get_one::<String>("pred").expect("required"), cfg)?;
    let symmetric = cfg.symmetric_relations.iter().cloned().collect();
    let report = match (m.get_one::<String>("compare"), m.get_one::<String>("gold")) {
        (Some(other), _) => {
            let other = load_docs(other, cfg)?;
            let r = compare_predictions(&pred, &other, &symmetric)?;
            json!({ "agreement": r })
        }
        (None, Some(gold)) => serde_json::to_value(evaluate_documents(&pred, &load_docs(gold, cfg)?, &symmetric)?).expect("report serializes"),
        (None, None) => serde_json::to_value(evaluate_documents(&pred, &pred, &symmetric)?).expect("report serializes"),
    };
    emit(&report);
    Ok(())
}

fn cmd_check_equivalence(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let ec = EquivalenceConfig {
        cases: *m.get_one::<usize>("cases").expect("default"),
        max_window: *m.get_one::<usize>("max-window").expect("default"),
        max_pairs: *m.get_one::<usize>("max-pairs").expect("default"),
        seed: cfg.seed,
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
    };
    let start = Instant::now();
    let report = run_equivalence_suite(&ec)?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["wall_ms"] = json!(start.elapsed().as_secs_f64() * 1000.0);
    emit(&v);
    report.into_result().map(|_| ())
}

fn cmd_bench(m: &ArgMatches) -> Result<()> {
    let user = resolve_config(RunConfig::default(), m)?;
    let ckpt = Checkpoint::load(required(&user.relation_checkpoint, "relation_checkpoint")?)?;
    let cfg = resolve_config(ckpt.meta.config.clone(), m)?;
    if m.get_flag("show-config") {
        println!("{}", cfg.canonical_json());
        return Ok(());
    }
    ckpt.check_config(&cfg)?;
    let (_, relation) = ckpt.meta.models()?;
    let input = cfg
        .test_path
        .as_deref()
        .or(cfg.dev_path.as_deref())
        .ok_or_else(|| Error::Usage("bench needs --test-path or --dev-path".into()))?;
    let docs = load_docs(input, &cfg)?;
    let sentences: Vec<_> = prepare_documents(&docs, &ckpt.meta.vocab, cfg.window())
        .into_iter()
        .map(|p| Ok((p.gold_entities(&relation.entity_labels)?, p.input)))
        .map(|r: Result<_>| r.map(|(e, i)| (i, e)))
        .collect::<Result<_>>()?;
    let runs = *m.get_one::<usize>("runs").expect("default");
    let full = benchmark_speed(&relation, &ckpt.store, &sentences, InferenceMode::Full, runs)?;
    let approx = benchmark_speed(
        &relation,
        &ckpt.store,
        &sentences,
        InferenceMode::Approx {
            token_budget: cfg.token_budget,
        },
        runs,
    )?;
    emit(&json!({
        "sentences": sentences.len(),
        "full": full,
        "approx": approx,
        "speedup": approx.sentences_per_sec / full.sentences_per_sec,
        "pass_reduction": full.encoder_passes as f64 / approx.encoder_passes.max(1) as f64,
    }));
    Ok(())
}

fn parse_windows(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "bare" => Ok(0),
            n => n.parse().map_err(|_| Error::Usage(format!("bad window `{n}`"))),
        })
        .collect()
}

fn cmd_sweep_window(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let windows = parse_windows(m.get_one::<String>("windows").expect("default"))?;
    let data = train_data(cfg, None)?;
    let dev_docs = data
        .dev
        .clone()
        .ok_or_else(|| Error::Usage("sweep-window needs --dev-path".into()))?;
    let mut rows = Vec::new();
    for w in windows {
        let wcfg = cfg.with_overrides([("window", w.to_string().as_str())])?;
        log::info!("window {}", if w == 0 { "bare".to_string() } else { w.to_string() });
        let (ent, _) = train_entity_checkpoint(&wcfg, &data)?;
        let rel = if ent.meta.kind == ModelKind::Joint {
            ent.clone()
        } else {
            train_relation_checkpoint(&wcfg, &data, Some(&ent))?.0
        };
        let pipeline = Pipeline::from_checkpoints(ent, rel)?;
        let run = pipeline
            .predictor(InferenceMode::Full, candidate_source(&wcfg))
            .predict_documents(&dev_docs, &pipeline.vocab, wcfg.window())?;
        let r = evaluate_documents(&run.documents, &dev_docs, &pipeline.symmetric)?;
        rows.push(json!({
            "window": if w == 0 { json!("bare") } else { json!(w) },
            "ent_f1": r.ent.f1,
            "rel_f1": r.rel.f1,
            "relplus_f1": r.relplus.f1,
        }));
        if let Some(dir) = &wcfg.output {
            fs::create_dir_all(dir)?;
            write_corpus(Path::new(dir).join(format!("dev_w{w}.jsonl")), &run.documents)?;
        }
    }
    emit(&json!({ "columns": ["window", "ent_f1", "rel_f1", "relplus_f1"], "rows": rows }));
    Ok(())
}
