//! Checks shared by the focused test files and the acceptance runner. Each
//! returns `Ok(detail)` or `Err(detail)` so callers can either assert or
//! print a verdict line.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanrel::checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
use spanrel::config::RunConfig;
use spanrel::corpus::{
    generate_synthetic, load_corpus, parse_corpus, serialize_corpus, write_corpus, AnnotatedDocument, GrammarConfig, LoadOptions,
    Vocabulary,
};
use spanrel::encoder::{Encoder, EncoderConfig};
use spanrel::entity::{enumerate_spans, EntityModel, EntityModelConfig, SentenceInput, Span};
use spanrel::eval::{score_entities, score_relations, EntityMention, Prf, RelationMention};
use spanrel::labels::{LabelSet, RelationLabelSet};
use spanrel::relation::{relation_loss, FeatureMode, MarkerVocabulary, RelationCandidate, RelationModel, RelationModelConfig, TypedSpan};
use spanrel::tensor::{grad_check, ParameterStore};
use spanrel::train::{entity_example_loss, EntityExample};

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Spans

/// `enumerate_spans` against the closed-form count and a brute-force list.
pub fn span_oracle(max_n: usize, max_l: usize) -> Check {
    let mut checked = 0;
    for n in 0..=max_n {
        for l in 1..=max_l {
            let spans = enumerate_spans(n, l);
            let closed: usize = (1..=l.min(n)).map(|w| n - w + 1).sum();
            ensure(spans.len() == closed, || format!("n={n} L={l}: {} spans, closed form {closed}", spans.len()))?;
            let brute: Vec<Span> = (0..n)
                .flat_map(|i| (i..n).map(move |j| Span::new(i, j)))
                .filter(|s| s.end - s.start < l)
                .collect();
            ensure(spans == brute, || format!("n={n} L={l}: span list differs from brute force"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (n, L) settings"))
}

// ---------------------------------------------------------------------------
// Metrics

fn counts(p: &Prf) -> (usize, usize, usize) {
    (p.num_pred, p.num_gold, p.num_correct)
}

/// Distinct elements under `same`, by pairwise comparison.
fn distinct<T: Clone>(items: &[T], same: impl Fn(&T, &T) -> bool) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in items {
        if !out.iter().any(|y| same(x, y)) {
            out.push(x.clone());
        }
    }
    out
}

fn entity_oracle(pred: &[EntityMention], gold: &[EntityMention]) -> (usize, usize, usize) {
    let p = distinct(pred, |a, b| a == b);
    let g = distinct(gold, |a, b| a == b);
    let correct = p.iter().filter(|x| g.iter().any(|y| *x == y)).count();
    (p.len(), g.len(), correct)
}

/// Same relation, allowing either argument order for symmetric types; under
/// `strict` the argument types must agree in the matched orientation.
fn same_relation(a: &RelationMention, b: &RelationMention, strict: bool, sym: &HashSet<String>) -> bool {
    if a.sentence != b.sentence || a.label != b.label {
        return false;
    }
    let direct = a.subject == b.subject
        && a.object == b.object
        && (!strict || (a.subject_type == b.subject_type && a.object_type == b.object_type));
    let swapped = sym.contains(&a.label)
        && a.subject == b.object
        && a.object == b.subject
        && (!strict || (a.subject_type == b.object_type && a.object_type == b.subject_type));
    direct || swapped
}

fn relation_oracle(pred: &[RelationMention], gold: &[RelationMention], strict: bool, sym: &HashSet<String>) -> (usize, usize, usize) {
    let p = distinct(pred, |a, b| same_relation(a, b, strict, sym));
    let g = distinct(gold, |a, b| same_relation(a, b, strict, sym));
    let correct = p
        .iter()
        .filter(|x| !strict || (x.subject_type.is_some() && x.object_type.is_some()))
        .filter(|x| g.iter().any(|y| same_relation(x, y, strict, sym)))
        .count();
    (p.len(), g.len(), correct)
}

const SPANS: [(usize, usize); 4] = [(0, 0), (0, 2), (3, 3), (4, 6)];

fn random_entity(rng: &mut ChaCha8Rng) -> EntityMention {
    let (s, e) = *SPANS.choose(rng).unwrap();
    EntityMention {
        sentence: rng.random_range(0..2),
        span: Span::new(s, e),
        label: ["A", "B"].choose(rng).unwrap().to_string(),
    }
}

fn random_relation(rng: &mut ChaCha8Rng, allow_untyped: bool) -> RelationMention {
    let i = rng.random_range(0..SPANS.len());
    let j = (i + rng.random_range(1..SPANS.len())) % SPANS.len();
    let ty = |rng: &mut ChaCha8Rng| {
        if allow_untyped && rng.random_bool(0.15) {
            None
        } else {
            Some(["X", "Y"].choose(rng).unwrap().to_string())
        }
    };
    RelationMention {
        sentence: rng.random_range(0..2),
        subject: Span::new(SPANS[i].0, SPANS[i].1),
        subject_type: ty(rng),
        object: Span::new(SPANS[j].0, SPANS[j].1),
        object_type: ty(rng),
        label: ["R", "S"].choose(rng).unwrap().to_string(),
    }
}

fn f1_of(p: usize, g: usize, c: usize) -> f64 {
    let precision = if p == 0 { 0.0 } else { c as f64 / p as f64 };
    let recall = if g == 0 { 0.0 } else { c as f64 / g as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Entity, Rel and Rel+ scores against a pairwise brute-force oracle on
/// random prediction/gold sets, with duplicates, symmetric labels and
/// untyped predictions mixed in.
pub fn metric_oracle(cases: usize, seed: u64) -> Check {
    let sym: HashSet<String> = ["S".to_string()].into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let pe: Vec<_> = (0..rng.random_range(0..10)).map(|_| random_entity(&mut rng)).collect();
        let ge: Vec<_> = (0..rng.random_range(0..10)).map(|_| random_entity(&mut rng)).collect();
        let got = score_entities(&pe, &ge);
        ensure(counts(&got) == entity_oracle(&pe, &ge), || format!("entities, case {case}"))?;

        let pr: Vec<_> = (0..rng.random_range(0..12)).map(|_| random_relation(&mut rng, true)).collect();
        let gr: Vec<_> = (0..rng.random_range(0..12)).map(|_| random_relation(&mut rng, false)).collect();
        for strict in [false, true] {
            let got = score_relations(&pr, &gr, strict, &sym);
            let want = relation_oracle(&pr, &gr, strict, &sym);
            ensure(counts(&got) == want, || format!("relations strict={strict}, case {case}: {:?} vs {want:?}", counts(&got)))?;
            let f1 = f1_of(want.0, want.1, want.2);
            ensure((got.f1 - f1).abs() < 1e-15, || format!("f1 strict={strict}, case {case}"))?;
        }
    }
    Ok(format!("{cases} random cases"))
}

/// Boundaries and relation type right, one argument type wrong: counts for
/// Rel, not for Rel+.
pub fn rel_vs_relplus_case() -> Check {
    let gold = RelationMention {
        sentence: 0,
        subject: Span::new(0, 0),
        subject_type: Some("Method".into()),
        object: Span::new(5, 5),
        object_type: Some("Task".into()),
        label: "USED-FOR".into(),
    };
    let pred = RelationMention {
        subject_type: Some("Material".into()),
        ..gold.clone()
    };
    let none = HashSet::new();
    let rel = score_relations(std::slice::from_ref(&pred), std::slice::from_ref(&gold), false, &none);
    let relplus = score_relations(&[pred], &[gold], true, &none);
    ensure(rel.f1 == 1.0 && relplus.f1 == 0.0, || format!("Rel {} Rel+ {}", rel.f1, relplus.f1))?;
    Ok("Rel 1.0, Rel+ 0.0 with a wrong argument type".into())
}

// ---------------------------------------------------------------------------
// Gradients

fn grad_encoder(vocab: usize) -> Encoder {
    Encoder::new(
        EncoderConfig {
            vocab_size: vocab,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            max_position: 64,
            dropout: 0.0,
        },
        "encoder",
    )
    .unwrap()
}

/// Largest finite-difference error over the full entity loss (with the
/// auxiliary relation head) and the relation loss of every feature mode.
pub fn gradient_errors(eps: f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let labels = LabelSet::new(["A", "B", "C"]).unwrap();
    let model = EntityModel::new(
        grad_encoder(30),
        EntityModelConfig {
            max_span_len: 3,
            width_emb_dim: 8,
            ffnn_hidden: 16,
        },
        labels,
        "entity",
    )
    .unwrap()
    .with_aux_relation(3);
    let mut store = ParameterStore::new();
    model.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(3), true).unwrap();
    let spans = enumerate_spans(6, 3);
    let targets: Vec<usize> = (0..spans.len()).map(|i| [0, 1, 0, 2, 3][i % 5]).collect();
    let ex = EntityExample {
        input: SentenceInput {
            window_ids: vec![2, 5, 7, 9, 11, 4, 3, 8],
            target_offset: 1,
            target_len: 6,
        },
        spans,
        targets,
        aux_pairs: vec![(0, 4), (4, 0), (2, 7)],
        aux_targets: vec![1, 0, 2],
    };
    let report = grad_check(&store, |g| entity_example_loss(&model, g, &ex), eps, 300, 11).unwrap();
    assert!(report.coordinates_checked >= 100);
    out.push(("entity".to_string(), report.max_relative_error));

    let el = LabelSet::new(["A", "B"]).unwrap();
    let rl = RelationLabelSet::new(LabelSet::new(["R1", "R2"]).unwrap());
    let input = SentenceInput::bare(vec![2, 5, 7, 9, 11, 4, 3]);
    let span = |s, e, label| TypedSpan {
        span: Span::new(s, e),
        label,
    };
    let candidates = vec![
        RelationCandidate {
            subject: span(0, 1, 1),
            object: span(4, 4, 2),
        },
        RelationCandidate {
            subject: span(4, 4, 2),
            object: span(1, 3, 1),
        },
    ];
    let targets = vec![1, 0];
    for mode in FeatureMode::ALL {
        let markers = MarkerVocabulary::new(20, 2, false);
        let model = RelationModel::new(
            grad_encoder(markers.end()),
            RelationModelConfig {
                max_span_len: 4,
                width_emb_dim: 6,
                type_emb_dim: 5,
                eloss_hidden: 7,
            },
            mode,
            el.clone(),
            rl.clone(),
            markers,
            "relation",
        )
        .unwrap();
        let mut store = ParameterStore::new();
        model.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(5), true).unwrap();
        let report = grad_check(
            &store,
            |g| {
                let out = model.forward(g, &input, &candidates)?;
                relation_loss(g, &out, &targets, &candidates)
            },
            eps,
            200,
            13,
        )
        .unwrap();
        out.push((format!("relation/{mode}"), report.max_relative_error));
    }
    out
}

// ---------------------------------------------------------------------------
// Round-trips

pub fn random_docs(rng: &mut ChaCha8Rng, count: usize) -> Vec<AnnotatedDocument> {
    let grammar = GrammarConfig::default();
    (0..count)
        .map(|_| {
            let mut doc = generate_synthetic(rng.random(), 1, &grammar).unwrap().remove(0);
            if rng.random_bool(0.5) {
                let sents = doc.to_sentences();
                let ents: Vec<_> = sents.iter().map(|s| s.entities.iter().filter(|_| rng.random_bool(0.7)).cloned().collect()).collect();
                let rels: Vec<_> = sents.iter().map(|s| s.relations.clone()).collect();
                doc.set_predictions(&ents, &rels);
            }
            doc
        })
        .collect()
}

/// Serialize, parse, write and reload `count` random documents.
pub fn corpus_round_trip(count: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = random_docs(&mut rng, count);
    let text = serialize_corpus(&docs);
    let loaded = parse_corpus(&text, &LoadOptions::default()).map_err(|e| e.to_string())?;
    ensure(loaded.documents == docs, || "parsed documents differ".into())?;
    ensure(serialize_corpus(&loaded.documents) == text, || "re-serialized text differs".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("docs.jsonl");
    write_corpus(&path, &docs).map_err(|e| e.to_string())?;
    ensure(std::fs::read_to_string(&path).map_err(|e| e.to_string())? == text, || "written file differs".into())?;
    let back = load_corpus(&path, &LoadOptions::default()).map_err(|e| e.to_string())?;
    ensure(back.documents == docs, || "reloaded documents differ".into())?;
    Ok(format!("{count} documents, {} bytes", text.len()))
}

pub fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let heads = *[1usize, 2].choose(rng).unwrap();
    let mode = *["text", "text_etype", "markers", "markers_etype", "typed_markers", "markers_eloss"].choose(rng).unwrap();
    let kind = *[ModelKind::Entity, ModelKind::Relation, ModelKind::Joint].choose(rng).unwrap();
    let cfg = RunConfig::default()
        .with_overrides([
            ("d_model", (4 * heads).to_string().as_str()),
            ("n_heads", heads.to_string().as_str()),
            ("n_layers", rng.random_range(1..=2).to_string().as_str()),
            ("d_ff", rng.random_range(2..8).to_string().as_str()),
            ("max_position", "24"),
            ("max_span_len", rng.random_range(1..5).to_string().as_str()),
            ("width_emb_dim", rng.random_range(1..4).to_string().as_str()),
            ("ffnn_hidden", rng.random_range(1..4).to_string().as_str()),
            ("type_emb_dim", rng.random_range(1..4).to_string().as_str()),
            ("eloss_hidden", rng.random_range(1..4).to_string().as_str()),
            ("feature_mode", mode),
            ("entity_aux_relation_loss", if rng.random_bool(0.3) { "true" } else { "false" }),
            ("seed", rng.random::<u32>().to_string().as_str()),
        ])
        .unwrap();
    let words: Vec<String> = (0..rng.random_range(1..12)).map(|i| format!("w{i}")).collect();
    let meta = CheckpointMeta {
        kind,
        config: cfg,
        vocab: Vocabulary::build(words.iter()),
        entity_types: (0..rng.random_range(1..4)).map(|i| format!("E{i}")).collect(),
        relation_types: (0..rng.random_range(1..3)).map(|i| format!("R{i}")).collect(),
        symmetric_relations: vec![],
    };
    let (entity, relation) = meta.models().unwrap();
    let mut store = ParameterStore::new();
    match kind {
        ModelKind::Entity => entity.init_params(&mut store, rng, true).unwrap(),
        ModelKind::Relation => relation.init_params(&mut store, rng, true).unwrap(),
        ModelKind::Joint => {
            entity.init_params(&mut store, rng, true).unwrap();
            relation.init_params(&mut store, rng, false).unwrap();
        }
    }
    Checkpoint { meta, store }
}

/// Save and load `count` random checkpoints; every tensor must come back
/// bit for bit and the re-encoded bytes must equal the file.
pub fn checkpoint_round_trip(count: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..count {
        let ckpt = random_checkpoint(&mut rng);
        let path = dir.path().join(format!("m{i}.bin"));
        ckpt.save(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| format!("model {i}: {e}"))?;
        ensure(back.meta == ckpt.meta, || format!("model {i}: metadata differs"))?;
        ensure(back.store.len() == ckpt.store.len(), || format!("model {i}: tensor count differs"))?;
        for ((na, a), (nb, b)) in ckpt.store.iter().zip(back.store.iter()) {
            ensure(na == nb && a.shape() == b.shape(), || format!("model {i}: {na} vs {nb}"))?;
            ensure(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), || format!("model {i}: {na} values differ"))?;
        }
        ensure(back.to_bytes() == std::fs::read(&path).map_err(|e| e.to_string())?, || format!("model {i}: bytes differ"))?;
    }
    Ok(format!("{count} checkpoints"))
}
