//! Micro-averaged precision/recall/F1 for entities and relations.
//!
//! Relations are scored two ways: `Rel` matches argument boundaries and the
//! relation type; `Rel+` also requires both argument entity types.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, Entity, Relation};
use crate::entity::Span;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub num_pred: usize,
    pub num_gold: usize,
    pub num_correct: usize,
}

impl Prf {
    pub fn from_counts(num_pred: usize, num_gold: usize, num_correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(num_correct, num_pred);
        let recall = ratio(num_correct, num_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            num_pred,
            num_gold,
            num_correct,
        }
    }
}

/// An entity mention tagged with the index of its sentence in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityMention {
    pub sentence: usize,
    pub span: Span,
    pub label: String,
}

/// A relation with its argument types. For predictions the types are the
/// predicted entity types; `None` never matches under `Rel+`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationMention {
    pub sentence: usize,
    pub subject: Span,
    pub subject_type: Option<String>,
    pub object: Span,
    pub object_type: Option<String>,
    pub label: String,
}

impl RelationMention {
    /// Symmetric types are rewritten with the earlier span as subject.
    fn canonical(&self, symmetric: &HashSet<String>) -> RelationMention {
        if symmetric.contains(&self.label) && self.object < self.subject {
            RelationMention {
                sentence: self.sentence,
                subject: self.object,
                subject_type: self.object_type.clone(),
                object: self.subject,
                object_type: self.subject_type.clone(),
                label: self.label.clone(),
            }
        } else {
            self.clone()
        }
    }
}

pub fn score_entities(pred: &[EntityMention], gold: &[EntityMention]) -> Prf {
    let pred: BTreeSet<&EntityMention> = pred.iter().collect();
    let gold: BTreeSet<&EntityMention> = gold.iter().collect();
    let correct = pred.intersection(&gold).count();
    Prf::from_counts(pred.len(), gold.len(), correct)
}

type RelKey = (usize, Span, Span, String, Option<(Option<String>, Option<String>)>);

fn relation_keys(rels: &[RelationMention], strict: bool, symmetric: &HashSet<String>) -> BTreeSet<RelKey> {
    rels.iter()
        .map(|r| {
            let c = r.canonical(symmetric);
            let types = strict.then_some((c.subject_type, c.object_type));
            (c.sentence, c.subject, c.object, c.label, types)
        })
        .collect()
}

/// Rel (`strict = false`) or Rel+ (`strict = true`) scores.
pub fn score_relations(
    pred: &[RelationMention],
    gold: &[RelationMention],
    strict: bool,
    symmetric: &HashSet<String>,
) -> Prf {
    let pred = relation_keys(pred, strict, symmetric);
    let gold = relation_keys(gold, strict, symmetric);
    let correct = pred
        .iter()
        .filter(|p| p.4.as_ref().is_none_or(|(s, o)| s.is_some() && o.is_some()) && gold.contains(*p))
        .count();
    Prf::from_counts(pred.len(), gold.len(), correct)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "FlatReport", into = "FlatReport")]
pub struct MetricsReport {
    pub ent: Prf,
    pub rel: Prf,
    pub relplus: Prf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatReport {
    ent_p: f64,
    ent_r: f64,
    ent_f1: f64,
    ent_num_pred: usize,
    ent_num_gold: usize,
    ent_num_correct: usize,
    rel_p: f64,
    rel_r: f64,
    rel_f1: f64,
    rel_num_pred: usize,
    rel_num_gold: usize,
    rel_num_correct: usize,
    relplus_p: f64,
    relplus_r: f64,
    relplus_f1: f64,
    relplus_num_pred: usize,
    relplus_num_gold: usize,
    relplus_num_correct: usize,
}

impl From<MetricsReport> for FlatReport {
    fn from(m: MetricsReport) -> Self {
        FlatReport {
            ent_p: m.ent.precision,
            ent_r: m.ent.recall,
            ent_f1: m.ent.f1,
            ent_num_pred: m.ent.num_pred,
            ent_num_gold: m.ent.num_gold,
            ent_num_correct: m.ent.num_correct,
            rel_p: m.rel.precision,
            rel_r: m.rel.recall,
            rel_f1: m.rel.f1,
            rel_num_pred: m.rel.num_pred,
            rel_num_gold: m.rel.num_gold,
            rel_num_correct: m.rel.num_correct,
            relplus_p: m.relplus.precision,
            relplus_r: m.relplus.recall,
            relplus_f1: m.relplus.f1,
            relplus_num_pred: m.relplus.num_pred,
            relplus_num_gold: m.relplus.num_gold,
            relplus_num_correct: m.relplus.num_correct,
        }
    }
}

impl From<FlatReport> for MetricsReport {
    fn from(f: FlatReport) -> Self {
        let prf = |precision, recall, f1, num_pred, num_gold, num_correct| Prf {
            precision,
            recall,
            f1,
            num_pred,
            num_gold,
            num_correct,
        };
        MetricsReport {
            ent: prf(f.ent_p, f.ent_r, f.ent_f1, f.ent_num_pred, f.ent_num_gold, f.ent_num_correct),
            rel: prf(f.rel_p, f.rel_r, f.rel_f1, f.rel_num_pred, f.rel_num_gold, f.rel_num_correct),
            relplus: prf(
                f.relplus_p,
                f.relplus_r,
                f.relplus_f1,
                f.relplus_num_pred,
                f.relplus_num_gold,
                f.relplus_num_correct,
            ),
        }
    }
}

/// Sentence-local annotations of one sentence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SentenceAnnotations {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

fn type_of(entities: &[Entity], span: Span) -> Option<String> {
    entities.iter().find(|e| e.span == span).map(|e| e.label.clone())
}

fn mentions(sentences: &[SentenceAnnotations]) -> (Vec<EntityMention>, Vec<RelationMention>) {
    let mut ents = Vec::new();
    let mut rels = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        ents.extend(s.entities.iter().map(|e| EntityMention {
            sentence: i,
            span: e.span,
            label: e.label.clone(),
        }));
        rels.extend(s.relations.iter().map(|r| RelationMention {
            sentence: i,
            subject: r.subject,
            subject_type: type_of(&s.entities, r.subject),
            object: r.object,
            object_type: type_of(&s.entities, r.object),
            label: r.label.clone(),
        }));
    }
    (ents, rels)
}

/// Scores aligned predicted and gold sentences.
pub fn score_sentences(
    pred: &[SentenceAnnotations],
    gold: &[SentenceAnnotations],
    symmetric: &HashSet<String>,
) -> Result<MetricsReport> {
    if pred.len() != gold.len() {
        return Err(Error::data(format!(
            "{} predicted sentences against {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (pe, pr) = mentions(pred);
    let (ge, gr) = mentions(gold);
    Ok(MetricsReport {
        ent: score_entities(&pe, &ge),
        rel: score_relations(&pr, &gr, false, symmetric),
        relplus: score_relations(&pr, &gr, true, symmetric),
    })
}

/// Gold annotations of every sentence of every document, in order.
pub fn gold_annotations(docs: &[AnnotatedDocument]) -> Vec<SentenceAnnotations> {
    docs.iter()
        .flat_map(|d| d.to_sentences())
        .map(|s| SentenceAnnotations {
            entities: s.entities,
            relations: s.relations,
        })
        .collect()
}

/// Predicted annotations of every sentence; documents without predictions
/// are a data error.
pub fn predicted_annotations(docs: &[AnnotatedDocument]) -> Result<Vec<SentenceAnnotations>> {
    let mut out = Vec::new();
    for (line, d) in docs.iter().enumerate() {
        let sents = d.predicted_sentences().ok_or_else(|| {
            Error::data_at(
                line + 1,
                "predicted_ner",
                format!("document `{}` has no predictions", d.doc_key),
            )
        })?;
        out.extend(sents.into_iter().map(|(entities, relations)| SentenceAnnotations { entities, relations }));
    }
    Ok(out)
}

fn check_aligned(pred: &[AnnotatedDocument], gold: &[AnnotatedDocument]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::data(format!(
            "{} prediction documents against {} gold documents",
            pred.len(),
            gold.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.doc_key != g.doc_key || p.sentences.len() != g.sentences.len() {
            return Err(Error::data_at(
                i + 1,
                "doc_key",
                format!("document `{}` does not line up with gold `{}`", p.doc_key, g.doc_key),
            ));
        }
    }
    Ok(())
}

/// Scores the `predicted_*` fields of `pred` against the gold fields of `gold`.
pub fn evaluate_documents(
    pred: &[AnnotatedDocument],
    gold: &[AnnotatedDocument],
    symmetric: &HashSet<String>,
) -> Result<MetricsReport> {
    check_aligned(pred, gold)?;
    score_sentences(&predicted_annotations(pred)?, &gold_annotations(gold), symmetric)
}

/// Agreement between two prediction files: `a`'s predictions scored against
/// `b`'s as if they were gold.
pub fn compare_predictions(
    a: &[AnnotatedDocument],
    b: &[AnnotatedDocument],
    symmetric: &HashSet<String>,
) -> Result<MetricsReport> {
    check_aligned(a, b)?;
    score_sentences(&predicted_annotations(a)?, &predicted_annotations(b)?, symmetric)
}
