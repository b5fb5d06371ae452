//! Randomized checks that batched marker inference is exact: text states do
//! not see appended markers, batching does not change a pair's logits, and
//! pair order only permutes the output rows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, MarkedInput};
use crate::entity::{SentenceInput, Span};
use crate::error::{Error, Result};
use crate::labels::{LabelSet, RelationLabelSet};
use crate::relation::approx::{approx_forward, build_approx_input, PairBatch};
use crate::relation::{ordered_pairs, FeatureMode, MarkerVocabulary, RelationCandidate, RelationModel, RelationModelConfig, TypedSpan};
use crate::tensor::{Graph, ParameterStore};

pub const TEXT_STATE_TOL: f64 = 1e-12;
pub const LOGIT_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub cases: usize,
    pub max_window: usize,
    pub max_pairs: usize,
    pub seed: u64,
    pub d_model: usize,
    pub n_layers: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            cases: 200,
            max_window: 60,
            max_pairs: 12,
            seed: 0,
            d_model: 32,
            n_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub cases: usize,
    pub pairs: usize,
    pub nested_cases: usize,
    /// Largest absolute difference between text states with and without
    /// appended markers.
    pub max_text_state_diff: f64,
    /// Largest relative difference between batched and one-pair logits.
    pub max_logit_rel_diff: f64,
    /// Logit rows that differ in any bit after permuting the pairs.
    pub permutation_violations: usize,
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            Err(Error::Property(format!(
                "text diff {:e}, logit diff {:e}, {} permutation violations",
                self.max_text_state_diff, self.max_logit_rel_diff, self.permutation_violations
            )))
        }
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

const TEXT_VOCAB: usize = 40;
const ENTITY_TYPES: usize = 3;

/// Random spans inside `[0, len)`, roughly half nested in an earlier one.
fn random_spans<R: Rng>(rng: &mut R, len: usize) -> Vec<TypedSpan> {
    let mut spans: Vec<Span> = Vec::new();
    let wanted = rng.random_range(2..=7);
    for _ in 0..wanted * 4 {
        if spans.len() >= wanted {
            break;
        }
        let s = if !spans.is_empty() && rng.random_bool(0.5) {
            let outer = spans[rng.random_range(0..spans.len())];
            let start = rng.random_range(outer.start..=outer.end);
            Span::new(start, rng.random_range(start..=outer.end))
        } else {
            let start = rng.random_range(0..len);
            Span::new(start, (start + rng.random_range(0..4)).min(len - 1))
        };
        if !spans.contains(&s) {
            spans.push(s);
        }
    }
    spans
        .into_iter()
        .map(|span| TypedSpan {
            span,
            label: rng.random_range(1..=ENTITY_TYPES),
        })
        .collect()
}

fn has_nesting(pairs: &[RelationCandidate]) -> bool {
    pairs.iter().any(|c| {
        let (a, b) = (c.subject.span, c.object.span);
        (a.contains(&b) || b.contains(&a)) && a != b
    })
}

fn models(cfg: &EquivalenceConfig) -> Result<Vec<RelationModel>> {
    let entity_labels = LabelSet::new((0..ENTITY_TYPES).map(|i| format!("T{i}")))?;
    let relation_labels = RelationLabelSet::new(LabelSet::new(["R0", "R1"])?);
    let markers = MarkerVocabulary::new(TEXT_VOCAB, ENTITY_TYPES, false);
    let encoder = Encoder::new(
        EncoderConfig {
            vocab_size: markers.end(),
            d_model: cfg.d_model,
            n_heads: 4,
            n_layers: cfg.n_layers,
            d_ff: 2 * cfg.d_model,
            max_position: cfg.max_window.max(1),
            dropout: 0.0,
        },
        "encoder",
    )?;
    let rc = RelationModelConfig {
        max_span_len: 8,
        width_emb_dim: 8,
        type_emb_dim: 8,
        eloss_hidden: 8,
    };
    [FeatureMode::Markers, FeatureMode::TypedMarkers, FeatureMode::MarkersEloss]
        .into_iter()
        .map(|mode| {
            RelationModel::new(
                encoder.clone(),
                rc.clone(),
                mode,
                entity_labels.clone(),
                relation_labels.clone(),
                markers.clone(),
                format!("relation_{mode}"),
            )
        })
        .collect()
}

fn batch_logits(model: &RelationModel, store: &ParameterStore, input: &SentenceInput, pairs: &[RelationCandidate]) -> Result<Vec<f64>> {
    let batch = PairBatch {
        pairs: pairs.to_vec(),
        input: build_approx_input(model, input, pairs)?,
    };
    let mut g = Graph::inference(store);
    let out = approx_forward(model, &mut g, &batch)?;
    Ok(g.value(out.logits).to_vec())
}

/// Runs the suite over marker, typed-marker and marker+entity-loss models in
/// rotation, all sharing one randomly initialized encoder.
pub fn run_equivalence_suite(cfg: &EquivalenceConfig) -> Result<EquivalenceReport> {
    if cfg.max_window < 2 || cfg.max_pairs == 0 || cfg.d_model % 4 != 0 {
        return Err(Error::Config("equivalence suite needs max_window >= 2, max_pairs >= 1 and d_model divisible by 4".into()));
    }
    let models = models(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    models[0].encoder.init_params(&mut store, &mut rng)?;
    for m in &models {
        m.init_params(&mut store, &mut rng, false)?;
    }
    let mut report = EquivalenceReport {
        cases: cfg.cases,
        pairs: 0,
        nested_cases: 0,
        max_text_state_diff: 0.0,
        max_logit_rel_diff: 0.0,
        permutation_violations: 0,
        passed: false,
    };
    for case in 0..cfg.cases {
        let model = &models[case % models.len()];
        let classes = model.num_classes();
        let n = rng.random_range(2..=cfg.max_window);
        let target_len = rng.random_range(2..=n);
        let input = SentenceInput {
            window_ids: (0..n).map(|_| rng.random_range(2..TEXT_VOCAB)).collect(),
            target_offset: rng.random_range(0..=n - target_len),
            target_len,
        };
        let spans = loop {
            let s = random_spans(&mut rng, target_len);
            if s.len() >= 2 {
                break s;
            }
        };
        let mut pairs = ordered_pairs(&spans);
        pairs.shuffle(&mut rng);
        pairs.truncate(rng.random_range(1..=cfg.max_pairs));
        report.pairs += pairs.len();
        report.nested_cases += has_nesting(&pairs) as usize;

        // Text rows against the bare window.
        let mut g = Graph::inference(&store);
        let bare = model.encoder.encode(&mut g, &MarkedInput::sequential(input.window_ids.clone()))?;
        let marked = build_approx_input(model, &input, &pairs)?;
        let full = model.encoder.encode(&mut g, &marked)?;
        let d = cfg.d_model;
        let text_diff = g
            .value(bare)
            .iter()
            .zip(&g.value(full)[..n * d])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.max_text_state_diff = report.max_text_state_diff.max(text_diff);

        // Batched logits against one pair per pass.
        let batched = batch_logits(model, &store, &input, &pairs)?;
        for (k, c) in pairs.iter().enumerate() {
            let single = batch_logits(model, &store, &input, std::slice::from_ref(c))?;
            for (a, b) in batched[k * classes..(k + 1) * classes].iter().zip(&single) {
                report.max_logit_rel_diff = report.max_logit_rel_diff.max(rel_diff(*a, *b));
            }
        }

        // Permuting the pairs permutes the rows.
        let mut perm: Vec<usize> = (0..pairs.len()).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<RelationCandidate> = perm.iter().map(|&i| pairs[i]).collect();
        let shuffled = batch_logits(model, &store, &input, &permuted)?;
        for (k, &i) in perm.iter().enumerate() {
            let a = &shuffled[k * classes..(k + 1) * classes];
            let b = &batched[i * classes..(i + 1) * classes];
            if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                report.permutation_violations += 1;
            }
        }
    }
    report.passed = report.max_text_state_diff <= TEXT_STATE_TOL
        && report.max_logit_rel_diff <= LOGIT_REL_TOL
        && report.permutation_violations == 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = EquivalenceConfig {
            cases: 12,
            max_window: 20,
            max_pairs: 5,
            seed: 3,
            d_model: 8,
            n_layers: 1,
        };
        let r = run_equivalence_suite(&cfg).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.nested_cases > 0);
    }
}
