//! Corpus-to-tensor preparation and end-to-end prediction (entity model,
//! then relation model over the predicted entities).

use rayon::prelude::*;

use crate::corpus::{make_window, AnnotatedDocument, Entity, Relation, Sentence, Vocabulary};
use crate::entity::{enumerate_spans, predict_entities, top_lambda_spans, argmax, EntityModel, SentenceInput, Span};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::relation::{InferenceMode, RelationModel, TypedSpan};
use crate::tensor::{Graph, ParameterStore};

/// One sentence with its gold annotations and encoded context window.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSentence {
    /// Index of the document in its corpus.
    pub doc: usize,
    /// Index of the sentence within its document.
    pub index: usize,
    pub sentence: Sentence,
    pub input: SentenceInput,
}

impl PreparedSentence {
    /// Gold entities as typed spans; unknown types are a data error.
    pub fn gold_entities(&self, labels: &LabelSet) -> Result<Vec<TypedSpan>> {
        self.sentence
            .entities
            .iter()
            .map(|e| {
                labels
                    .index_of(&e.label)
                    .map(|label| TypedSpan { span: e.span, label })
                    .ok_or_else(|| Error::data(format!("unknown entity type `{}`", e.label)))
            })
            .collect()
    }
}

/// Sentences of every document, in corpus order, with windows of `window`
/// tokens (`None` for bare sentences).
pub fn prepare_documents(docs: &[AnnotatedDocument], vocab: &Vocabulary, window: Option<usize>) -> Vec<PreparedSentence> {
    let mut out = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for (i, sentence) in doc.to_sentences().into_iter().enumerate() {
            let w = make_window(&doc.sentences, i, window);
            out.push(PreparedSentence {
                doc: d,
                index: i,
                sentence,
                input: SentenceInput {
                    window_ids: vocab.encode(&w.tokens),
                    target_offset: w.target_offset,
                    target_len: w.target_len,
                },
            });
        }
    }
    out
}

/// How relation candidates are drawn from the entity model's output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CandidateSource {
    /// Spans predicted as entities, with their predicted types.
    Entities,
    /// The `ceil(λn)` top-scoring spans with their arg-max class (possibly null).
    Pruned { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePrediction {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub pairs: usize,
    pub encoder_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRun {
    pub documents: Vec<AnnotatedDocument>,
    pub pairs: usize,
    pub encoder_passes: usize,
}

/// Frozen entity and relation models with their parameters.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub entity: &'a EntityModel,
    pub entity_store: &'a ParameterStore,
    pub relation: &'a RelationModel,
    pub relation_store: &'a ParameterStore,
    pub mode: InferenceMode,
    pub candidates: CandidateSource,
}

impl Predictor<'_> {
    /// Entity logits for every enumerated span of the sentence.
    pub fn entity_logits(&self, input: &SentenceInput) -> Result<(Vec<Span>, Vec<f64>)> {
        let spans = enumerate_spans(input.target_len, self.entity.config.max_span_len);
        if spans.is_empty() {
            return Ok((spans, Vec::new()));
        }
        let mut g = Graph::inference(self.entity_store);
        let (logits, _) = self.entity.forward(&mut g, input, &spans)?;
        Ok((spans, g.value(logits).to_vec()))
    }

    pub fn predict_sentence(&self, input: &SentenceInput) -> Result<SentencePrediction> {
        let (spans, logits) = self.entity_logits(input)?;
        let classes = self.entity.labels.num_classes();
        let predicted = predict_entities(&logits, classes, &spans);
        let candidates: Vec<TypedSpan> = match self.candidates {
            CandidateSource::Entities => predicted.iter().map(|&(span, label)| TypedSpan { span, label }).collect(),
            CandidateSource::Pruned { lambda } => {
                let kept = top_lambda_spans(&logits, classes, &spans, lambda, input.target_len);
                kept.into_iter()
                    .map(|span| {
                        let row = spans.iter().position(|s| *s == span).expect("pruned span comes from the list");
                        TypedSpan {
                            span,
                            label: argmax(&logits[row * classes..(row + 1) * classes]),
                        }
                    })
                    .collect()
            }
        };
        let rel = self.relation.predict(self.relation_store, input, &candidates, self.mode)?;
        let entities = predicted
            .iter()
            .map(|&(span, c)| Entity {
                span,
                label: self.entity.labels.name(c).expect("non-null class").to_string(),
            })
            .collect();
        let relations = rel
            .relations
            .iter()
            .map(|(c, r)| Relation {
                subject: c.subject.span,
                object: c.object.span,
                label: self.relation.relation_labels.labels.name(*r).expect("non-null class").to_string(),
            })
            .collect();
        Ok(SentencePrediction {
            entities,
            relations,
            pairs: rel.pairs,
            encoder_passes: rel.encoder_passes,
        })
    }

    /// Predicts every document in parallel; output documents carry the
    /// input's gold fields plus `predicted_ner` / `predicted_relations`.
    pub fn predict_documents(&self, docs: &[AnnotatedDocument], vocab: &Vocabulary, window: Option<usize>) -> Result<PredictionRun> {
        let results: Vec<Result<(AnnotatedDocument, usize, usize)>> = docs
            .par_iter()
            .map(|doc| {
                let prepared = prepare_documents(std::slice::from_ref(doc), vocab, window);
                let mut ents = Vec::with_capacity(prepared.len());
                let mut rels = Vec::with_capacity(prepared.len());
                let (mut pairs, mut passes) = (0, 0);
                for p in &prepared {
                    let s = self.predict_sentence(&p.input)?;
                    pairs += s.pairs;
                    passes += s.encoder_passes;
                    ents.push(s.entities);
                    rels.push(s.relations);
                }
                let mut out = doc.clone();
                out.set_predictions(&ents, &rels);
                Ok((out, pairs, passes))
            })
            .collect();
        let mut run = PredictionRun {
            documents: Vec::with_capacity(docs.len()),
            pairs: 0,
            encoder_passes: 0,
        };
        for r in results {
            let (doc, pairs, passes) = r?;
            run.documents.push(doc);
            run.pairs += pairs;
            run.encoder_passes += passes;
        }
        Ok(run)
    }
}
