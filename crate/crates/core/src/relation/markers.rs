use serde::{Deserialize, Serialize};

use crate::entity::Span;
use crate::error::{Error, Result};
use crate::labels::{LabelSet, NULL_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MarkerRole {
    SubjectStart,
    SubjectEnd,
    ObjectStart,
    ObjectEnd,
}

impl MarkerRole {
    pub const ALL: [MarkerRole; 4] = [
        MarkerRole::SubjectStart,
        MarkerRole::SubjectEnd,
        MarkerRole::ObjectStart,
        MarkerRole::ObjectEnd,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn is_opening(self) -> bool {
        matches!(self, MarkerRole::SubjectStart | MarkerRole::ObjectStart)
    }

    fn tag(self) -> &'static str {
        match self {
            MarkerRole::SubjectStart => "S",
            MarkerRole::SubjectEnd => "/S",
            MarkerRole::ObjectStart => "O",
            MarkerRole::ObjectEnd => "/O",
        }
    }
}

/// Marker token ids appended after the text vocabulary.
///
/// Layout from `base`: four untyped markers, then four typed markers per
/// entity class (the null class first when `include_null`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerVocabulary {
    pub base: usize,
    pub num_entity_types: usize,
    pub include_null: bool,
}

impl MarkerVocabulary {
    pub fn new(base: usize, num_entity_types: usize, include_null: bool) -> Self {
        MarkerVocabulary {
            base,
            num_entity_types,
            include_null,
        }
    }

    pub fn typed_count(&self) -> usize {
        4 * (self.num_entity_types + usize::from(self.include_null))
    }

    /// Untyped plus typed marker count.
    pub fn len(&self) -> usize {
        4 + self.typed_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// First id past the marker block.
    pub fn end(&self) -> usize {
        self.base + self.len()
    }

    pub fn untyped(&self, role: MarkerRole) -> usize {
        self.base + role.slot()
    }

    /// Typed marker for entity class `class` (0 is the null class).
    pub fn typed(&self, role: MarkerRole, class: usize) -> Result<usize> {
        if class > self.num_entity_types || (class == NULL_LABEL && !self.include_null) {
            return Err(Error::Input(format!("no typed marker for entity class {class}")));
        }
        let slot = if self.include_null { class } else { class - 1 };
        Ok(self.base + 4 + 4 * slot + role.slot())
    }

    pub fn marker(&self, role: MarkerRole, class: usize, typed: bool) -> Result<usize> {
        if typed {
            self.typed(role, class)
        } else {
            Ok(self.untyped(role))
        }
    }

    /// Display form such as `<S:Method>` or `</O>`.
    pub fn token_name(role: MarkerRole, type_name: Option<&str>) -> String {
        match type_name {
            Some(t) => format!("<{}:{t}>", role.tag()),
            None => format!("<{}>", role.tag()),
        }
    }

    /// Display names of every marker id in id order.
    pub fn token_names(&self, labels: &LabelSet) -> Vec<String> {
        let mut out: Vec<String> = MarkerRole::ALL
            .iter()
            .map(|&r| Self::token_name(r, None))
            .collect();
        let first = if self.include_null { 0 } else { 1 };
        for class in first..=self.num_entity_types {
            let name = labels.name(class).unwrap_or("NULL");
            out.extend(MarkerRole::ALL.iter().map(|&r| Self::token_name(r, Some(name))));
        }
        out
    }
}

/// Output of [`insert_markers`]: the marked sequence and where the two
/// opening markers landed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inserted<T> {
    pub tokens: Vec<T>,
    pub subject_start: usize,
    pub object_start: usize,
    /// Output index of each original token.
    pub text_positions: Vec<usize>,
}

/// Inserts the four markers before/after the subject and object spans.
///
/// Openings at the same token go outermost first (the longer span, subject
/// on ties); closings at the same token go innermost first, so contained
/// spans yield well-nested brackets. Partially overlapping spans follow the
/// same per-index ordering.
pub fn insert_markers<T: Clone>(
    tokens: &[T],
    subject: Span,
    object: Span,
    mut make: impl FnMut(MarkerRole) -> T,
) -> Inserted<T> {
    let mut out = Vec::with_capacity(tokens.len() + 4);
    let mut text_positions = Vec::with_capacity(tokens.len());
    let (mut subject_start, mut object_start) = (0, 0);
    let s_outer_open = subject.end >= object.end;
    let s_inner_close = subject.start > object.start;
    for (i, tok) in tokens.iter().enumerate() {
        let s_open = subject.start == i;
        let o_open = object.start == i;
        let order: &[MarkerRole] = match (s_open, o_open) {
            (true, true) if s_outer_open => &[MarkerRole::SubjectStart, MarkerRole::ObjectStart],
            (true, true) => &[MarkerRole::ObjectStart, MarkerRole::SubjectStart],
            (true, false) => &[MarkerRole::SubjectStart],
            (false, true) => &[MarkerRole::ObjectStart],
            (false, false) => &[],
        };
        for &role in order {
            if role == MarkerRole::SubjectStart {
                subject_start = out.len();
            } else {
                object_start = out.len();
            }
            out.push(make(role));
        }
        text_positions.push(out.len());
        out.push(tok.clone());
        let s_close = subject.end == i;
        let o_close = object.end == i;
        let order: &[MarkerRole] = match (s_close, o_close) {
            (true, true) if s_inner_close => &[MarkerRole::SubjectEnd, MarkerRole::ObjectEnd],
            (true, true) => &[MarkerRole::ObjectEnd, MarkerRole::SubjectEnd],
            (true, false) => &[MarkerRole::SubjectEnd],
            (false, true) => &[MarkerRole::ObjectEnd],
            (false, false) => &[],
        };
        for &role in order {
            out.push(make(role));
        }
    }
    Inserted {
        tokens: out,
        subject_start,
        object_start,
        text_positions,
    }
}
