use rand::Rng;
use serde::{Deserialize, Serialize};

use super::approx::{approx_forward, chunk_pairs};
use super::markers::{insert_markers, MarkerRole, MarkerVocabulary};
use super::{ordered_pairs, FeatureMode, RelationCandidate, TypedSpan};
use crate::encoder::{Encoder, MarkedInput};
use crate::entity::{argmax, span_representations, SentenceInput};
use crate::error::{Error, Result};
use crate::labels::{LabelSet, RelationLabelSet, NULL_LABEL};
use crate::tensor::{Graph, ParameterStore, TensorValue, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationModelConfig {
    /// Width-embedding rows for the span-representation modes.
    pub max_span_len: usize,
    pub width_emb_dim: usize,
    /// Entity type embedding size for the `*_etype` modes.
    pub type_emb_dim: usize,
    /// Hidden units of the auxiliary entity-type classifier.
    pub eloss_hidden: usize,
}

impl Default for RelationModelConfig {
    fn default() -> Self {
        RelationModelConfig {
            max_span_len: 8,
            width_emb_dim: 150,
            type_emb_dim: 150,
            eloss_hidden: 150,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// One encoder pass per candidate pair.
    Full,
    /// Markers appended after the text, many pairs per pass.
    Approx { token_budget: usize },
}

/// Logits for a list of candidates plus the number of encoder passes used.
#[derive(Debug, Clone, Copy)]
pub struct RelationOutput {
    /// `[m, |R| + 1]`
    pub logits: Var,
    /// `[m, |E| + 1]` auxiliary subject-type logits (`markers_eloss` only).
    pub subject_types: Option<Var>,
    pub object_types: Option<Var>,
    pub encoder_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationPrediction {
    /// Candidates whose arg-max class is a relation, with that class.
    pub relations: Vec<(RelationCandidate, usize)>,
    pub pairs: usize,
    pub encoder_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    pub encoder: Encoder,
    pub config: RelationModelConfig,
    pub mode: FeatureMode,
    pub entity_labels: LabelSet,
    pub relation_labels: RelationLabelSet,
    pub markers: MarkerVocabulary,
    pub prefix: String,
}

impl RelationModel {
    pub fn new(
        encoder: Encoder,
        config: RelationModelConfig,
        mode: FeatureMode,
        entity_labels: LabelSet,
        relation_labels: RelationLabelSet,
        markers: MarkerVocabulary,
        prefix: impl Into<String>,
    ) -> Result<Self> {
        if mode.uses_markers() && markers.end() > encoder.config.vocab_size {
            return Err(Error::Config(format!(
                "marker ids reach {} but the encoder vocabulary has {} rows",
                markers.end(),
                encoder.config.vocab_size
            )));
        }
        if markers.num_entity_types != entity_labels.len() {
            return Err(Error::Config("marker vocabulary and entity labels disagree".into()));
        }
        Ok(RelationModel {
            encoder,
            config,
            mode,
            entity_labels,
            relation_labels,
            markers,
            prefix: prefix.into(),
        })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn num_classes(&self) -> usize {
        self.relation_labels.labels.num_classes()
    }

    fn span_dim(&self) -> usize {
        2 * self.encoder.config.d_model + self.config.width_emb_dim
    }

    /// Width of the pair representation fed to the classifier.
    pub fn repr_dim(&self) -> usize {
        let base = if self.mode.uses_markers() {
            2 * self.encoder.config.d_model
        } else {
            3 * self.span_dim()
        };
        if self.mode.type_embeddings() {
            base + 2 * self.config.type_emb_dim
        } else {
            base
        }
    }

    pub fn head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (self.name("classifier.w"), vec![self.repr_dim(), self.num_classes()]),
            (self.name("classifier.b"), vec![self.num_classes()]),
        ];
        if self.mode.type_embeddings() {
            out.push((
                self.name("type_emb"),
                vec![self.entity_labels.num_classes(), self.config.type_emb_dim],
            ));
        }
        if !self.mode.uses_markers() {
            out.push((
                self.name("width_emb"),
                vec![self.config.max_span_len, self.config.width_emb_dim],
            ));
        }
        if self.mode.entity_loss() {
            let (d, h, e) = (
                self.encoder.config.d_model,
                self.config.eloss_hidden,
                self.entity_labels.num_classes(),
            );
            out.push((self.name("eloss.0.w"), vec![d, h]));
            out.push((self.name("eloss.0.b"), vec![h]));
            out.push((self.name("eloss.1.w"), vec![h, e]));
            out.push((self.name("eloss.1.b"), vec![e]));
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

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R, include_encoder: bool) -> Result<()> {
        if include_encoder {
            self.encoder.init_params(store, rng)?;
        }
        for (name, shape) in self.head_shapes() {
            let value = if shape.len() == 1 {
                TensorValue::zeros(&shape)
            } else if name.ends_with("_emb") {
                TensorValue::randn(&shape, 0.1, rng)
            } else {
                TensorValue::randn(&shape, (2.0 / (shape[0] + shape[1]) as f64).sqrt(), rng)
            };
            store.insert(name, value)?;
        }
        Ok(())
    }

    fn check_candidate(&self, input: &SentenceInput, c: &RelationCandidate) -> Result<()> {
        for t in [c.subject, c.object] {
            if t.span.start > t.span.end || t.span.end >= input.target_len {
                return Err(Error::Input(format!(
                    "span [{}, {}] outside sentence of {} tokens",
                    t.span.start, t.span.end, input.target_len
                )));
            }
            if t.label > self.entity_labels.len() {
                return Err(Error::Input(format!("entity class {} out of range", t.label)));
            }
        }
        if c.subject.span == c.object.span {
            return Err(Error::Input("subject and object are the same span".into()));
        }
        Ok(())
    }

    /// Window ids with the pair's markers inserted, sequential positions and
    /// full attention, plus the indices of the two opening markers.
    pub fn marked_pair(&self, input: &SentenceInput, c: &RelationCandidate) -> Result<(MarkedInput, usize, usize)> {
        self.check_candidate(input, c)?;
        let typed = self.mode.typed_markers();
        let off = input.target_offset;
        let ins = insert_markers(
            &input.window_ids,
            c.subject.span.shifted(off),
            c.object.span.shifted(off),
            |role| {
                let class = match role {
                    MarkerRole::SubjectStart | MarkerRole::SubjectEnd => c.subject.label,
                    _ => c.object.label,
                };
                self.markers.marker(role, class, typed).unwrap_or(usize::MAX)
            },
        );
        if ins.tokens.contains(&usize::MAX) {
            return Err(Error::Input("candidate type has no typed marker".into()));
        }
        Ok((MarkedInput::sequential(ins.tokens), ins.subject_start, ins.object_start))
    }

    /// Classifier (and auxiliary type heads) over base pair representations.
    pub(crate) fn head(
        &self,
        g: &mut Graph<'_>,
        base: Var,
        marker_states: Option<(Var, Var)>,
        candidates: &[RelationCandidate],
        encoder_passes: usize,
    ) -> Result<RelationOutput> {
        let repr = if self.mode.type_embeddings() {
            let table = g.param(&self.name("type_emb"))?;
            let subj: Vec<usize> = candidates.iter().map(|c| c.subject.label).collect();
            let obj: Vec<usize> = candidates.iter().map(|c| c.object.label).collect();
            let a = g.embedding(table, &subj)?;
            let b = g.embedding(table, &obj)?;
            g.concat_cols(&[base, a, b])?
        } else {
            base
        };
        let w = g.param(&self.name("classifier.w"))?;
        let b = g.param(&self.name("classifier.b"))?;
        let logits = g.linear(repr, w, b)?;
        let (subject_types, object_types) = match (self.mode.entity_loss(), marker_states) {
            (true, Some((s, o))) => (Some(self.type_head(g, s)?), Some(self.type_head(g, o)?)),
            _ => (None, None),
        };
        Ok(RelationOutput {
            logits,
            subject_types,
            object_types,
            encoder_passes,
        })
    }

    fn type_head(&self, g: &mut Graph<'_>, states: Var) -> Result<Var> {
        let w0 = g.param(&self.name("eloss.0.w"))?;
        let b0 = g.param(&self.name("eloss.0.b"))?;
        let w1 = g.param(&self.name("eloss.1.w"))?;
        let b1 = g.param(&self.name("eloss.1.b"))?;
        let h = g.linear(states, w0, b0)?;
        let h = g.relu(h);
        g.linear(h, w1, b1)
    }

    /// Per-pair forward: one encoder pass per candidate in marker modes, one
    /// shared pass in the span-representation modes.
    pub fn forward(&self, g: &mut Graph<'_>, input: &SentenceInput, candidates: &[RelationCandidate]) -> Result<RelationOutput> {
        if candidates.is_empty() {
            return Err(Error::Input("relation forward needs at least one candidate".into()));
        }
        let d = self.encoder.config.d_model;
        if self.mode.uses_markers() {
            let mut rows = Vec::with_capacity(candidates.len());
            let mut subj_states = Vec::new();
            let mut obj_states = Vec::new();
            for c in candidates {
                let (marked, s, o) = self.marked_pair(input, c)?;
                let hidden = self.encoder.encode(g, &marked)?;
                let pair = g.gather_rows(hidden, &[s, o])?;
                rows.push(g.reshape(pair, &[1, 2 * d])?);
                if self.mode.entity_loss() {
                    subj_states.push(g.gather_rows(hidden, &[s])?);
                    obj_states.push(g.gather_rows(hidden, &[o])?);
                }
            }
            let base = g.concat_rows(&rows)?;
            let states = if self.mode.entity_loss() {
                Some((g.concat_rows(&subj_states)?, g.concat_rows(&obj_states)?))
            } else {
                None
            };
            self.head(g, base, states, candidates, candidates.len())
        } else {
            for c in candidates {
                self.check_candidate(input, c)?;
            }
            let hidden = self
                .encoder
                .encode(g, &MarkedInput::sequential(input.window_ids.clone()))?;
            let table = g.param(&self.name("width_emb"))?;
            let subj: Vec<_> = candidates.iter().map(|c| c.subject.span).collect();
            let obj: Vec<_> = candidates.iter().map(|c| c.object.span).collect();
            let a = span_representations(g, hidden, table, &subj, input.target_offset)?;
            let b = span_representations(g, hidden, table, &obj, input.target_offset)?;
            let prod = g.mul(a, b)?;
            let base = g.concat_cols(&[a, b, prod])?;
            self.head(g, base, None, candidates, 1)
        }
    }

    /// Predicts relations among `entities` (every ordered pair of distinct
    /// spans); pairs whose arg-max is the null class are dropped.
    pub fn predict(
        &self,
        store: &ParameterStore,
        input: &SentenceInput,
        entities: &[TypedSpan],
        mode: InferenceMode,
    ) -> Result<RelationPrediction> {
        let candidates = ordered_pairs(entities);
        let mut out = RelationPrediction {
            relations: Vec::new(),
            pairs: candidates.len(),
            encoder_passes: 0,
        };
        if candidates.is_empty() {
            return Ok(out);
        }
        let classes = self.num_classes();
        let mut score = |g: &Graph<'_>, logits: Var, cands: &[RelationCandidate]| {
            for (c, row) in cands.iter().zip(g.value(logits).chunks(classes)) {
                let label = argmax(row);
                if label != NULL_LABEL {
                    out.relations.push((*c, label));
                }
            }
        };
        match mode {
            InferenceMode::Full => {
                let mut g = Graph::inference(store);
                let res = self.forward(&mut g, input, &candidates)?;
                score(&g, res.logits, &candidates);
                out.encoder_passes = res.encoder_passes;
            }
            InferenceMode::Approx { token_budget } => {
                let mut passes = 0;
                for batch in chunk_pairs(self, input, &candidates, token_budget)? {
                    let mut g = Graph::inference(store);
                    let res = approx_forward(self, &mut g, &batch)?;
                    score(&g, res.logits, &batch.pairs);
                    passes += res.encoder_passes;
                }
                out.encoder_passes = passes;
            }
        }
        Ok(out)
    }
}

/// Summed cross-entropy over candidates, plus the auxiliary subject/object
/// type losses when present.
pub fn relation_loss(
    g: &mut Graph<'_>,
    output: &RelationOutput,
    targets: &[usize],
    candidates: &[RelationCandidate],
) -> Result<Var> {
    if targets.is_empty() {
        return g.add_scalars(&[]);
    }
    let mut terms = vec![g.cross_entropy(output.logits, targets)?];
    if let (Some(s), Some(o)) = (output.subject_types, output.object_types) {
        let st: Vec<usize> = candidates.iter().map(|c| c.subject.label).collect();
        let ot: Vec<usize> = candidates.iter().map(|c| c.object.label).collect();
        terms.push(g.cross_entropy(s, &st)?);
        terms.push(g.cross_entropy(o, &ot)?);
    }
    g.add_scalars(&terms)
}
