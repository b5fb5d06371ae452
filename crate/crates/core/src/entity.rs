//! Span enumeration and span-level entity classification.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, MarkedInput};
use crate::error::{Error, Result};
use crate::labels::{LabelSet, NULL_LABEL};
use crate::tensor::{Graph, ParameterStore, TensorValue, Var};

/// Inclusive token range `[start, end]` within one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end, "span start {start} after end {end}");
        Span { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn shifted(&self, offset: usize) -> Span {
        Span::new(self.start + offset, self.end + offset)
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityModelConfig {
    pub max_span_len: usize,
    pub width_emb_dim: usize,
    pub ffnn_hidden: usize,
}

impl Default for EntityModelConfig {
    fn default() -> Self {
        EntityModelConfig {
            max_span_len: 8,
            width_emb_dim: 150,
            ffnn_hidden: 150,
        }
    }
}

/// All spans of width `1..=max_len`, ordered by `(start, end)`.
pub fn enumerate_spans(sentence_len: usize, max_len: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for start in 0..sentence_len {
        for end in start..sentence_len.min(start + max_len) {
            out.push(Span::new(start, end));
        }
    }
    out
}

/// One sentence prepared for an encoder: window ids plus where the target
/// sentence sits inside the window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceInput {
    pub window_ids: Vec<usize>,
    pub target_offset: usize,
    pub target_len: usize,
}

impl SentenceInput {
    pub fn bare(ids: Vec<usize>) -> Self {
        SentenceInput {
            target_len: ids.len(),
            window_ids: ids,
            target_offset: 0,
        }
    }
}

/// `[x_start; x_end; width_embedding]` for each span, as rows of one matrix.
///
/// `offset` maps sentence-local span indices to rows of `hidden`.
pub fn span_representations(
    g: &mut Graph<'_>,
    hidden: Var,
    width_table: Var,
    spans: &[Span],
    offset: usize,
) -> Result<Var> {
    let rows = g.shape(hidden)[0];
    let max_width = g.shape(width_table)[0];
    for s in spans {
        if s.start > s.end || s.end + offset >= rows {
            return Err(Error::Input(format!(
                "span [{}, {}] outside {} encoded tokens at offset {offset}",
                s.start, s.end, rows
            )));
        }
        if s.width() > max_width {
            return Err(Error::Input(format!(
                "span [{}, {}] wider than {max_width}",
                s.start, s.end
            )));
        }
    }
    let starts: Vec<usize> = spans.iter().map(|s| s.start + offset).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.end + offset).collect();
    let widths: Vec<usize> = spans.iter().map(|s| s.width() - 1).collect();
    let a = g.gather_rows(hidden, &starts)?;
    let b = g.gather_rows(hidden, &ends)?;
    let w = g.embedding(width_table, &widths)?;
    g.concat_cols(&[a, b, w])
}

/// Single-span form of [`span_representations`], shape `[1, 2d + d_W]`.
pub fn span_representation(
    g: &mut Graph<'_>,
    hidden: Var,
    width_table: Var,
    span: Span,
    offset: usize,
) -> Result<Var> {
    span_representations(g, hidden, width_table, &[span], offset)
}

/// Span classifier: encoder, span representation, two ReLU layers and a
/// final projection onto the entity types plus the null class.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityModel {
    pub encoder: Encoder,
    pub config: EntityModelConfig,
    pub labels: LabelSet,
    pub prefix: String,
    /// Relation classes for the optional auxiliary pair loss.
    pub aux_relation_classes: Option<usize>,
}

impl EntityModel {
    pub fn new(encoder: Encoder, config: EntityModelConfig, labels: LabelSet, prefix: impl Into<String>) -> Result<Self> {
        if config.max_span_len == 0 || config.width_emb_dim == 0 || config.ffnn_hidden == 0 {
            return Err(Error::Config("entity model extents must be positive".into()));
        }
        Ok(EntityModel {
            encoder,
            config,
            labels,
            prefix: prefix.into(),
            aux_relation_classes: None,
        })
    }

    pub fn with_aux_relation(mut self, relation_classes: usize) -> Self {
        self.aux_relation_classes = Some(relation_classes);
        self
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn span_dim(&self) -> usize {
        2 * self.encoder.config.d_model + self.config.width_emb_dim
    }

    /// Head parameters (everything except the encoder).
    pub fn head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.config.ffnn_hidden;
        let mut out = vec![
            (self.name("width_emb"), vec![self.config.max_span_len, self.config.width_emb_dim]),
            (self.name("ffnn.0.w"), vec![self.span_dim(), h]),
            (self.name("ffnn.0.b"), vec![h]),
            (self.name("ffnn.1.w"), vec![h, h]),
            (self.name("ffnn.1.b"), vec![h]),
            (self.name("classifier.w"), vec![h, self.labels.num_classes()]),
            (self.name("classifier.b"), vec![self.labels.num_classes()]),
        ];
        if let Some(r) = self.aux_relation_classes {
            out.push((self.name("aux_rel.w"), vec![3 * self.span_dim(), r]));
            out.push((self.name("aux_rel.b"), vec![r]));
        }
        out
    }

    pub fn parameter_shapes(&self, include_encoder: bool) -> Vec<(String, Vec<usize>)> {
        let mut out = if include_encoder {
            self.encoder.parameter_shapes()
        } else {
            Vec::new()
        };
        out.extend(self.head_shapes());
        out
    }

    /// Registers head parameters, plus encoder parameters when
    /// `include_encoder` (false when the encoder is shared and already present).
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R, include_encoder: bool) -> Result<()> {
        if include_encoder {
            self.encoder.init_params(store, rng)?;
        }
        for (name, shape) in self.head_shapes() {
            let value = if shape.len() == 1 {
                TensorValue::zeros(&shape)
            } else if name.ends_with("width_emb") {
                TensorValue::randn(&shape, 0.1, rng)
            } else {
                let std = (2.0 / shape[0] as f64).sqrt();
                TensorValue::randn(&shape, std, rng)
            };
            store.insert(name, value)?;
        }
        Ok(())
    }

    /// Encodes the sentence window; returns hidden states `[T, d]`.
    pub fn encode(&self, g: &mut Graph<'_>, input: &SentenceInput) -> Result<Var> {
        self.encoder
            .encode(g, &MarkedInput::sequential(input.window_ids.clone()))
    }

    /// Span representations `[m, 2d + d_W]` from precomputed hidden states.
    pub fn span_reprs(&self, g: &mut Graph<'_>, hidden: Var, input: &SentenceInput, spans: &[Span]) -> Result<Var> {
        if let Some(s) = spans.iter().find(|s| s.end >= input.target_len) {
            return Err(Error::Input(format!(
                "span [{}, {}] outside sentence of {} tokens",
                s.start, s.end, input.target_len
            )));
        }
        let table = g.param(&self.name("width_emb"))?;
        span_representations(g, hidden, table, spans, input.target_offset)
    }

    /// Logits `[m, |E| + 1]` from span representations.
    pub fn classify(&self, g: &mut Graph<'_>, reprs: Var) -> Result<Var> {
        let mut x = reprs;
        for l in 0..2 {
            let w = g.param(&self.name(&format!("ffnn.{l}.w")))?;
            let b = g.param(&self.name(&format!("ffnn.{l}.b")))?;
            let y = g.linear(x, w, b)?;
            x = g.relu(y);
        }
        let w = g.param(&self.name("classifier.w"))?;
        let b = g.param(&self.name("classifier.b"))?;
        g.linear(x, w, b)
    }

    /// Encodes once and scores every span: logits `[m, |E| + 1]`.
    pub fn forward(&self, g: &mut Graph<'_>, input: &SentenceInput, spans: &[Span]) -> Result<(Var, Var)> {
        let hidden = self.encode(g, input)?;
        if spans.is_empty() {
            let empty = g.constant(&[0, self.labels.num_classes()], Vec::new())?;
            return Ok((empty, hidden));
        }
        let reprs = self.span_reprs(g, hidden, input, spans)?;
        Ok((self.classify(g, reprs)?, hidden))
    }

    /// Auxiliary relation loss over TEXT-style pair representations
    /// `[h_i; h_j; h_i ⊙ h_j]`. `pairs` hold indices into the rows of `reprs`.
    pub fn aux_relation_loss(
        &self,
        g: &mut Graph<'_>,
        reprs: Var,
        pairs: &[(usize, usize)],
        targets: &[usize],
    ) -> Result<Var> {
        if self.aux_relation_classes.is_none() || pairs.is_empty() {
            return g.add_scalars(&[]);
        }
        let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = g.gather_rows(reprs, &left)?;
        let b = g.gather_rows(reprs, &right)?;
        let prod = g.mul(a, b)?;
        let h = g.concat_cols(&[a, b, prod])?;
        let w = g.param(&self.name("aux_rel.w"))?;
        let bias = g.param(&self.name("aux_rel.b"))?;
        let logits = g.linear(h, w, bias)?;
        g.cross_entropy(logits, targets)
    }
}

/// Summed cross-entropy over all spans.
pub fn entity_loss(g: &mut Graph<'_>, logits: Var, gold: &[usize]) -> Result<Var> {
    if gold.is_empty() {
        return g.add_scalars(&[]);
    }
    g.cross_entropy(logits, gold)
}

/// Gold class index for each span (null when the span is not a gold mention).
pub fn gold_span_labels(spans: &[Span], gold: &[(Span, usize)]) -> Vec<usize> {
    spans
        .iter()
        .map(|s| {
            gold.iter()
                .find(|(g, _)| g == s)
                .map_or(NULL_LABEL, |(_, l)| *l)
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Spans whose arg-max class is not null, paired with that class.
pub fn predict_entities(logits: &[f64], num_classes: usize, spans: &[Span]) -> Vec<(Span, usize)> {
    spans
        .iter()
        .zip(logits.chunks(num_classes))
        .filter_map(|(s, row)| {
            let c = argmax(row);
            (c != NULL_LABEL).then_some((*s, c))
        })
        .collect()
}

/// Keeps the `ceil(λ·n)` spans whose best non-null logit is highest, ordered
/// by score (descending) and then by `(start, end)`.
pub fn top_lambda_spans(logits: &[f64], num_classes: usize, spans: &[Span], lambda: f64, n: usize) -> Vec<Span> {
    assert!(lambda > 0.0, "pruning ratio must be positive");
    let keep = ((lambda * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut scored: Vec<(f64, Span)> = spans
        .iter()
        .zip(logits.chunks(num_classes))
        .map(|(s, row)| {
            let best = row[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (best, *s)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
    });
    scored.into_iter().take(keep).map(|(_, s)| s).collect()
}
