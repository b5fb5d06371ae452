//! Relation classification over candidate span pairs.
//!
//! [`RelationModel`] runs one encoder pass per pair with markers inserted
//! around the two spans. The [`approx`] module batches many pairs into one
//! pass by appending their markers after the text.

pub mod approx;
mod markers;
mod model;

pub use markers::{insert_markers, Inserted, MarkerRole, MarkerVocabulary};
pub use model::{relation_loss, InferenceMode, RelationModel, RelationModelConfig, RelationOutput, RelationPrediction};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::entity::Span;
use crate::error::{Error, Result};
use crate::labels::{LabelSet, NULL_LABEL};

/// How entity information reaches the relation classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Span representations of a shared encoding and their product.
    Text,
    /// `Text` plus entity type embeddings.
    TextEtype,
    /// Untyped markers, opening-marker states.
    Markers,
    /// `Markers` plus entity type embeddings.
    MarkersEtype,
    /// `Markers` plus an auxiliary entity-type loss.
    MarkersEloss,
    /// Typed markers, opening-marker states.
    TypedMarkers,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 6] = [
        FeatureMode::Text,
        FeatureMode::TextEtype,
        FeatureMode::Markers,
        FeatureMode::MarkersEtype,
        FeatureMode::MarkersEloss,
        FeatureMode::TypedMarkers,
    ];

    pub fn uses_markers(self) -> bool {
        !matches!(self, FeatureMode::Text | FeatureMode::TextEtype)
    }

    pub fn typed_markers(self) -> bool {
        self == FeatureMode::TypedMarkers
    }

    pub fn type_embeddings(self) -> bool {
        matches!(self, FeatureMode::TextEtype | FeatureMode::MarkersEtype)
    }

    pub fn entity_loss(self) -> bool {
        self == FeatureMode::MarkersEloss
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Text => "text",
            FeatureMode::TextEtype => "text_etype",
            FeatureMode::Markers => "markers",
            FeatureMode::MarkersEtype => "markers_etype",
            FeatureMode::MarkersEloss => "markers_eloss",
            FeatureMode::TypedMarkers => "typed_markers",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature mode `{s}`")))
    }
}

/// A span with an entity class index (0 for the null class).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypedSpan {
    pub span: Span,
    pub label: usize,
}

/// Ordered subject/object pair from one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationCandidate {
    pub subject: TypedSpan,
    pub object: TypedSpan,
}

/// Every ordered pair of distinct entities.
pub fn ordered_pairs(entities: &[TypedSpan]) -> Vec<RelationCandidate> {
    let mut out = Vec::with_capacity(entities.len() * entities.len().saturating_sub(1));
    for (i, s) in entities.iter().enumerate() {
        for (j, o) in entities.iter().enumerate() {
            if i != j && s.span != o.span {
                out.push(RelationCandidate {
                    subject: *s,
                    object: *o,
                });
            }
        }
    }
    out
}

/// Ordered pairs of gold entities with their relation class (null when
/// unrelated).
pub fn gold_candidates(
    sentence: &Sentence,
    entity_labels: &LabelSet,
    relation_labels: &LabelSet,
) -> Result<(Vec<RelationCandidate>, Vec<usize>)> {
    let entities = sentence
        .entities
        .iter()
        .map(|e| {
            entity_labels
                .index_of(&e.label)
                .map(|label| TypedSpan { span: e.span, label })
                .ok_or_else(|| Error::data(format!("unknown entity type `{}`", e.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = ordered_pairs(&entities);
    let labels = pair_targets(sentence, &pairs, relation_labels)?;
    Ok((pairs, labels))
}

/// Gold relation class for each candidate by span boundaries.
pub fn pair_targets(sentence: &Sentence, pairs: &[RelationCandidate], relation_labels: &LabelSet) -> Result<Vec<usize>> {
    pairs
        .iter()
        .map(|p| match sentence.relation_label(p.subject.span, p.object.span) {
            None => Ok(NULL_LABEL),
            Some(l) => relation_labels
                .index_of(l)
                .ok_or_else(|| Error::data(format!("unknown relation type `{l}`"))),
        })
        .collect()
}
