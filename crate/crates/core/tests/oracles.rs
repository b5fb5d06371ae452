//! Span enumeration, scoring and loss values against direct oracles.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanrel::encoder::{Encoder, EncoderConfig};
use spanrel::entity::{entity_loss, enumerate_spans, predict_entities, EntityModel, EntityModelConfig, SentenceInput, Span};
use spanrel::labels::{LabelSet, RelationLabelSet};
use spanrel::relation::{relation_loss, FeatureMode, MarkerVocabulary, RelationCandidate, RelationModel, RelationModelConfig, TypedSpan};
use spanrel::tensor::{Graph, ParameterStore};

#[test]
fn span_counts_match_closed_form() {
    common::span_oracle(50, 10).unwrap();
}

#[test]
fn scores_match_brute_force_oracle() {
    common::metric_oracle(100, 2024).unwrap();
}

#[test]
fn wrong_argument_type_separates_rel_from_relplus() {
    common::rel_vs_relplus_case().unwrap();
}

// ---------------------------------------------------------------------------
// Entity and relation heads

fn encoder(vocab: usize) -> Encoder {
    Encoder::new(
        EncoderConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_position: 32,
            dropout: 0.0,
        },
        "encoder",
    )
    .unwrap()
}

fn entity_setup(aux: Option<usize>) -> (EntityModel, ParameterStore) {
    let labels = LabelSet::new(["A", "B", "C"]).unwrap();
    let mut m = EntityModel::new(
        encoder(20),
        EntityModelConfig {
            max_span_len: 3,
            width_emb_dim: 5,
            ffnn_hidden: 6,
        },
        labels,
        "entity",
    )
    .unwrap();
    if let Some(r) = aux {
        m = m.with_aux_relation(r);
    }
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    m.init_params(&mut store, &mut rng, true).unwrap();
    for i in 0..store.len() {
        for v in store.by_index_mut(i).1.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    (m, store)
}

fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out).map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>()).collect()
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() - logits[target]
}

fn sentence() -> SentenceInput {
    SentenceInput {
        window_ids: vec![3, 4, 5, 6, 7, 8, 9, 10],
        target_offset: 2,
        target_len: 5,
    }
}

#[test]
fn entity_logits_and_loss_match_direct_summation() {
    let (m, store) = entity_setup(None);
    let input = sentence();
    let spans = enumerate_spans(input.target_len, m.config.max_span_len);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gold: Vec<usize> = spans.iter().map(|_| rng.random_range(0..4)).collect();
    let mut g = Graph::inference(&store);
    let (logits, hidden) = m.forward(&mut g, &input, &spans).unwrap();
    let loss = entity_loss(&mut g, logits, &gold).unwrap();
    let h = g.value(hidden).to_vec();
    let d = 8;
    let p = |n: &str| store.get(&format!("entity.{n}")).unwrap().data();
    let mut want_loss = 0.0;
    for (k, s) in spans.iter().enumerate() {
        let (a, b) = (s.start + input.target_offset, s.end + input.target_offset);
        let mut x: Vec<f64> = h[a * d..(a + 1) * d].to_vec();
        x.extend_from_slice(&h[b * d..(b + 1) * d]);
        x.extend_from_slice(&p("width_emb")[(s.width() - 1) * 5..s.width() * 5]);
        let x1: Vec<f64> = dense(&x, p("ffnn.0.w"), p("ffnn.0.b")).into_iter().map(|v| v.max(0.0)).collect();
        let x2: Vec<f64> = dense(&x1, p("ffnn.1.w"), p("ffnn.1.b")).into_iter().map(|v| v.max(0.0)).collect();
        let want = dense(&x2, p("classifier.w"), p("classifier.b"));
        let got = &g.value(logits)[k * 4..(k + 1) * 4];
        for (u, v) in got.iter().zip(&want) {
            assert!((u - v).abs() < 1e-12, "span {s:?}: {u} vs {v}");
        }
        want_loss += cross_entropy(&want, gold[k]);
    }
    let got_loss = g.value(loss)[0];
    assert!((got_loss - want_loss).abs() < 1e-10 * want_loss.abs().max(1.0));
}

#[test]
fn aux_relation_loss_matches_direct_summation() {
    let (m, store) = entity_setup(Some(3));
    let input = sentence();
    let spans = vec![Span::new(0, 1), Span::new(2, 2), Span::new(3, 4)];
    let pairs = vec![(0, 1), (1, 0), (0, 2), (2, 1)];
    let targets = vec![1, 0, 2, 0];
    let mut g = Graph::inference(&store);
    let hidden = m.encode(&mut g, &input).unwrap();
    let reprs = m.span_reprs(&mut g, hidden, &input, &spans).unwrap();
    let loss = m.aux_relation_loss(&mut g, reprs, &pairs, &targets).unwrap();
    let r = g.value(reprs).to_vec();
    let dim = m.span_dim();
    let w = store.get("entity.aux_rel.w").unwrap().data();
    let b = store.get("entity.aux_rel.b").unwrap().data();
    let mut want = 0.0;
    for (&(i, j), &t) in pairs.iter().zip(&targets) {
        let (a, c) = (&r[i * dim..(i + 1) * dim], &r[j * dim..(j + 1) * dim]);
        let mut x = a.to_vec();
        x.extend_from_slice(c);
        x.extend(a.iter().zip(c).map(|(u, v)| u * v));
        want += cross_entropy(&dense(&x, w, b), t);
    }
    assert!((g.value(loss)[0] - want).abs() < 1e-10 * want.max(1.0));

    // Off by default, and nothing to score without pairs.
    let (plain, store) = entity_setup(None);
    let mut g = Graph::inference(&store);
    let hidden = plain.encode(&mut g, &input).unwrap();
    let reprs = plain.span_reprs(&mut g, hidden, &input, &spans).unwrap();
    let off = plain.aux_relation_loss(&mut g, reprs, &pairs, &targets).unwrap();
    assert_eq!(g.value(off)[0], 0.0);
}

#[test]
fn relation_loss_matches_direct_summation() {
    let el = LabelSet::new(["A", "B"]).unwrap();
    let rl = RelationLabelSet::new(LabelSet::new(["R", "S", "T"]).unwrap());
    let markers = MarkerVocabulary::new(20, el.len(), false);
    let m = RelationModel::new(
        encoder(markers.end()),
        RelationModelConfig {
            max_span_len: 3,
            width_emb_dim: 4,
            type_emb_dim: 4,
            eloss_hidden: 4,
        },
        FeatureMode::TypedMarkers,
        el,
        rl,
        markers,
        "relation",
    )
    .unwrap();
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    m.init_params(&mut store, &mut rng, true).unwrap();
    let input = sentence();
    let ents = [
        TypedSpan { span: Span::new(0, 1), label: 1 },
        TypedSpan { span: Span::new(1, 1), label: 2 },
        TypedSpan { span: Span::new(3, 4), label: 1 },
    ];
    let cands = spanrel::relation::ordered_pairs(&ents);
    assert_eq!(cands.len(), 6);
    let targets: Vec<usize> = (0..cands.len()).map(|_| rng.random_range(0..4)).collect();
    let mut g = Graph::inference(&store);
    let out = m.forward(&mut g, &input, &cands).unwrap();
    let loss = relation_loss(&mut g, &out, &targets, &cands).unwrap();
    let w = store.get("relation.classifier.w").unwrap().data();
    let b = store.get("relation.classifier.b").unwrap().data();
    let mut want = 0.0;
    for (k, c) in cands.iter().enumerate() {
        let (marked, s, o) = m.marked_pair(&input, c).unwrap();
        let mut g2 = Graph::inference(&store);
        let h = m.encoder.encode(&mut g2, &marked).unwrap();
        let h = g2.value(h);
        let mut x = h[s * 8..(s + 1) * 8].to_vec();
        x.extend_from_slice(&h[o * 8..(o + 1) * 8]);
        let logits = dense(&x, w, b);
        for (u, v) in g.value(out.logits)[k * 4..(k + 1) * 4].iter().zip(&logits) {
            assert!((u - v).abs() < 1e-12);
        }
        want += cross_entropy(&logits, targets[k]);
    }
    assert!((g.value(loss)[0] - want).abs() < 1e-10 * want.max(1.0));

    let none: [RelationCandidate; 0] = [];
    let mut g = Graph::inference(&store);
    let out = m.forward(&mut g, &input, &cands[..1]).unwrap();
    let zero = relation_loss(&mut g, &out, &[], &none).unwrap();
    assert_eq!(g.value(zero)[0], 0.0);
}

#[test]
fn entity_predictions_ignore_span_order() {
    let (m, store) = entity_setup(None);
    let input = sentence();
    let spans = enumerate_spans(input.target_len, 3);
    let mut reversed = spans.clone();
    reversed.reverse();
    let run = |spans: &[Span]| {
        let mut g = Graph::inference(&store);
        let (logits, _) = m.forward(&mut g, &input, spans).unwrap();
        let mut p = predict_entities(g.value(logits), 4, spans);
        p.sort();
        p
    };
    assert_eq!(run(&spans), run(&reversed));
}

#[test]
fn entity_loss_decreases_under_small_gradient_steps() {
    let (m, mut store) = entity_setup(None);
    let input = sentence();
    let spans = enumerate_spans(input.target_len, 3);
    let gold: Vec<usize> = spans.iter().map(|s| if s.width() == 2 { 1 + s.start % 3 } else { 0 }).collect();
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let (value, grads) = {
            let mut g = Graph::new(&store);
            let (logits, _) = m.forward(&mut g, &input, &spans).unwrap();
            let loss = entity_loss(&mut g, logits, &gold).unwrap();
            (g.value(loss)[0], g.backward(loss).unwrap().into_params())
        };
        assert!(value < last, "step {step}: {value} >= {last}");
        last = value;
        for (idx, grad) in grads.param_grads() {
            for (p, d) in store.by_index_mut(idx).1.data_mut().iter_mut().zip(grad) {
                *p -= 1e-3 * d;
            }
        }
    }
}
