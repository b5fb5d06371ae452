use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entity::Span;
use crate::error::{Error, Result};

/// `[start, end, type]` with document-level inclusive token indices.
pub type NerTuple = (usize, usize, String);
/// `[start1, end1, start2, end2, type]` with document-level inclusive indices.
pub type RelationTuple = (usize, usize, usize, usize, String);

/// One line of the JSON-lines corpus format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedDocument {
    pub doc_key: String,
    pub sentences: Vec<Vec<String>>,
    pub ner: Vec<Vec<NerTuple>>,
    pub relations: Vec<Vec<RelationTuple>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_ner: Option<Vec<Vec<NerTuple>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_relations: Option<Vec<Vec<RelationTuple>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Entity {
    pub span: Span,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Relation {
    pub subject: Span,
    pub object: Span,
    pub label: String,
}

/// A sentence with sentence-local annotations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

impl Sentence {
    pub fn entity_label(&self, span: Span) -> Option<&str> {
        self.entities
            .iter()
            .find(|e| e.span == span)
            .map(|e| e.label.as_str())
    }

    pub fn relation_label(&self, subject: Span, object: Span) -> Option<&str> {
        self.relations
            .iter()
            .find(|r| r.subject == subject && r.object == object)
            .map(|r| r.label.as_str())
    }
}

impl AnnotatedDocument {
    /// Offset of each sentence's first token in document coordinates.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            offsets.push(acc);
            acc += s.len();
        }
        offsets
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Gold annotations converted to sentence-local indices.
    pub fn to_sentences(&self) -> Vec<Sentence> {
        let offsets = self.sentence_offsets();
        self.sentences
            .iter()
            .enumerate()
            .map(|(i, tokens)| {
                let off = offsets[i];
                Sentence {
                    tokens: tokens.clone(),
                    entities: self.ner[i]
                        .iter()
                        .map(|(s, e, l)| Entity {
                            span: Span::new(s - off, e - off),
                            label: l.clone(),
                        })
                        .collect(),
                    relations: self.relations[i]
                        .iter()
                        .map(|(s1, e1, s2, e2, l)| Relation {
                            subject: Span::new(s1 - off, e1 - off),
                            object: Span::new(s2 - off, e2 - off),
                            label: l.clone(),
                        })
                        .collect(),
                }
            })
            .collect()
    }

    /// Builds a document from sentence-local annotations.
    pub fn from_sentences(doc_key: impl Into<String>, sentences: &[Sentence]) -> Self {
        let mut doc = AnnotatedDocument {
            doc_key: doc_key.into(),
            sentences: Vec::new(),
            ner: Vec::new(),
            relations: Vec::new(),
            predicted_ner: None,
            predicted_relations: None,
        };
        let mut off = 0;
        for s in sentences {
            doc.sentences.push(s.tokens.clone());
            doc.ner.push(
                s.entities
                    .iter()
                    .map(|e| (e.span.start + off, e.span.end + off, e.label.clone()))
                    .collect(),
            );
            doc.relations.push(
                s.relations
                    .iter()
                    .map(|r| {
                        (
                            r.subject.start + off,
                            r.subject.end + off,
                            r.object.start + off,
                            r.object.end + off,
                            r.label.clone(),
                        )
                    })
                    .collect(),
            );
            off += s.tokens.len();
        }
        doc
    }

    /// Attaches predictions given as sentence-local entities and relations.
    pub fn set_predictions(&mut self, entities: &[Vec<Entity>], relations: &[Vec<Relation>]) {
        let offsets = self.sentence_offsets();
        self.predicted_ner = Some(
            entities
                .iter()
                .zip(&offsets)
                .map(|(es, &off)| {
                    es.iter()
                        .map(|e| (e.span.start + off, e.span.end + off, e.label.clone()))
                        .collect()
                })
                .collect(),
        );
        self.predicted_relations = Some(
            relations
                .iter()
                .zip(&offsets)
                .map(|(rs, &off)| {
                    rs.iter()
                        .map(|r| {
                            (
                                r.subject.start + off,
                                r.subject.end + off,
                                r.object.start + off,
                                r.object.end + off,
                                r.label.clone(),
                            )
                        })
                        .collect()
                })
                .collect(),
        );
    }

    /// Predicted annotations in sentence-local form, if present.
    pub fn predicted_sentences(&self) -> Option<Vec<(Vec<Entity>, Vec<Relation>)>> {
        let ner = self.predicted_ner.as_ref()?;
        let rel = self.predicted_relations.as_ref()?;
        let offsets = self.sentence_offsets();
        Some(
            offsets
                .iter()
                .enumerate()
                .map(|(i, &off)| {
                    let ents = ner.get(i).map_or_else(Vec::new, |v| {
                        v.iter()
                            .map(|(s, e, l)| Entity {
                                span: Span::new(s - off, e - off),
                                label: l.clone(),
                            })
                            .collect()
                    });
                    let rels = rel.get(i).map_or_else(Vec::new, |v| {
                        v.iter()
                            .map(|(s1, e1, s2, e2, l)| Relation {
                                subject: Span::new(s1 - off, e1 - off),
                                object: Span::new(s2 - off, e2 - off),
                                label: l.clone(),
                            })
                            .collect()
                    });
                    (ents, rels)
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    /// Gold entities wider than this are dropped along with their relations.
    pub max_span_len: usize,
    /// When set, entity types outside this list are a load error.
    pub entity_types: Option<Vec<String>>,
    /// When set, relation types outside this list are a load error.
    pub relation_types: Option<Vec<String>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_span_len: 8,
            entity_types: None,
            relation_types: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub documents: Vec<AnnotatedDocument>,
    pub dropped_entities: usize,
    pub dropped_relations: usize,
}

impl Corpus {
    /// Distinct entity and relation type names, sorted.
    pub fn label_names(&self) -> (Vec<String>, Vec<String>) {
        let mut ents = std::collections::BTreeSet::new();
        let mut rels = std::collections::BTreeSet::new();
        for d in &self.documents {
            for (_, _, l) in d.ner.iter().flatten() {
                ents.insert(l.clone());
            }
            for (_, _, _, _, l) in d.relations.iter().flatten() {
                rels.insert(l.clone());
            }
        }
        (ents.into_iter().collect(), rels.into_iter().collect())
    }
}

pub fn load_corpus(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Corpus> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_corpus(&text, opts)
}

fn serde_field(msg: &str) -> &str {
    // serde_json reports e.g. "missing field `ner`" or "unknown field `x`"
    msg.split('`').nth(1).unwrap_or("document")
}

/// Parses and validates JSON-lines text. Blank lines are skipped.
pub fn parse_corpus(text: &str, opts: &LoadOptions) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: AnnotatedDocument = serde_json::from_str(line).map_err(|e| {
            let msg = e.to_string();
            Error::data_at(line_no, serde_field(&msg), msg.clone())
        })?;
        let (de, dr) = validate_document(&mut doc, opts, line_no)?;
        corpus.dropped_entities += de;
        corpus.dropped_relations += dr;
        corpus.documents.push(doc);
    }
    if corpus.dropped_entities > 0 {
        log::warn!(
            "dropped {} gold entities wider than {} tokens ({} relations)",
            corpus.dropped_entities,
            opts.max_span_len,
            corpus.dropped_relations
        );
    }
    Ok(corpus)
}

fn validate_document(
    doc: &mut AnnotatedDocument,
    opts: &LoadOptions,
    line: usize,
) -> Result<(usize, usize)> {
    let n_sent = doc.sentences.len();
    if doc.ner.len() != n_sent {
        return Err(Error::data_at(
            line,
            "ner",
            format!("{} ner lists for {n_sent} sentences", doc.ner.len()),
        ));
    }
    if doc.relations.len() != n_sent {
        return Err(Error::data_at(
            line,
            "relations",
            format!("{} relation lists for {n_sent} sentences", doc.relations.len()),
        ));
    }
    let offsets = doc.sentence_offsets();
    let mut dropped = (0, 0);
    for s in 0..n_sent {
        let lo = offsets[s];
        let hi = lo + doc.sentences[s].len();
        let mut labels: BTreeMap<(usize, usize), &str> = BTreeMap::new();
        for (start, end, label) in &doc.ner[s] {
            if start > end || *start < lo || *end >= hi {
                return Err(Error::data_at(
                    line,
                    "ner",
                    format!("span [{start}, {end}] outside sentence {s} tokens [{lo}, {hi})"),
                ));
            }
            if let Some(allowed) = &opts.entity_types {
                if !allowed.contains(label) {
                    return Err(Error::data_at(line, "ner", format!("unknown entity type `{label}`")));
                }
            }
            if let Some(prev) = labels.insert((*start, *end), label) {
                if prev != label {
                    return Err(Error::data_at(
                        line,
                        "ner",
                        format!("span [{start}, {end}] labelled both `{prev}` and `{label}`"),
                    ));
                }
            }
        }
        for (s1, e1, s2, e2, label) in &doc.relations[s] {
            for (a, b) in [(s1, e1), (s2, e2)] {
                if !labels.contains_key(&(*a, *b)) {
                    return Err(Error::data_at(
                        line,
                        "relations",
                        format!("argument [{a}, {b}] is not an entity of sentence {s}"),
                    ));
                }
            }
            if let Some(allowed) = &opts.relation_types {
                if !allowed.contains(label) {
                    return Err(Error::data_at(
                        line,
                        "relations",
                        format!("unknown relation type `{label}`"),
                    ));
                }
            }
        }
        let too_wide = |a: usize, b: usize| b - a + 1 > opts.max_span_len;
        let before = doc.ner[s].len();
        doc.ner[s].retain(|(a, b, _)| !too_wide(*a, *b));
        dropped.0 += before - doc.ner[s].len();
        let before = doc.relations[s].len();
        doc.relations[s].retain(|(a, b, c, d, _)| !too_wide(*a, *b) && !too_wide(*c, *d));
        dropped.1 += before - doc.relations[s].len();
    }
    Ok(dropped)
}

/// One compact JSON object per line, newline-terminated.
pub fn serialize_corpus(docs: &[AnnotatedDocument]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("documents serialize"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[AnnotatedDocument]) -> Result<()> {
    fs::write(path, serialize_corpus(docs))?;
    Ok(())
}
