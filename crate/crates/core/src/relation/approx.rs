//! Batched relation inference: the text is encoded once and each pair's four
//! markers are appended after it, sharing position ids with the span
//! boundaries they mark.
//!
//! Text rows attend only to text; marker rows attend to the text and to the
//! four markers of their own pair. Text states therefore do not depend on
//! which pairs are in the batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::markers::MarkerRole;
use super::model::{InferenceMode, RelationModel, RelationOutput};
use super::{RelationCandidate, TypedSpan};
use crate::encoder::MarkedInput;
use crate::entity::SentenceInput;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterStore};

pub const DEFAULT_TOKEN_BUDGET: usize = 250;

/// Pairs sharing one encoder pass and the input built for them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<RelationCandidate>,
    pub input: MarkedInput,
}

impl PairBatch {
    pub fn text_len(&self) -> usize {
        self.input.text_len
    }

    /// Rows holding pair `k`'s subject and object opening markers.
    pub fn opening_rows(&self, k: usize) -> (usize, usize) {
        let n = self.text_len();
        (n + 4 * k, n + 4 * k + 2)
    }
}

/// Text followed by four markers per pair, with tied positions and the
/// restricted attention pattern.
pub fn build_approx_input(model: &RelationModel, input: &SentenceInput, pairs: &[RelationCandidate]) -> Result<MarkedInput> {
    let n = input.window_ids.len();
    let off = input.target_offset;
    let typed = model.mode.typed_markers();
    let t = n + 4 * pairs.len();
    let mut token_ids = input.window_ids.clone();
    let mut position_ids: Vec<usize> = (0..n).collect();
    for c in pairs {
        for t in [c.subject, c.object] {
            if t.span.start > t.span.end || t.span.end >= input.target_len {
                return Err(Error::Input(format!(
                    "span [{}, {}] outside sentence of {} tokens",
                    t.span.start, t.span.end, input.target_len
                )));
            }
        }
        let slots = [
            (MarkerRole::SubjectStart, c.subject.label, c.subject.span.start),
            (MarkerRole::SubjectEnd, c.subject.label, c.subject.span.end),
            (MarkerRole::ObjectStart, c.object.label, c.object.span.start),
            (MarkerRole::ObjectEnd, c.object.label, c.object.span.end),
        ];
        for (role, class, pos) in slots {
            token_ids.push(model.markers.marker(role, class, typed)?);
            position_ids.push(pos + off);
        }
    }
    let mut attention_mask = vec![false; t * t];
    for i in 0..t {
        let row = &mut attention_mask[i * t..(i + 1) * t];
        row[..n].iter_mut().for_each(|m| *m = true);
        if i >= n {
            let first = n + 4 * ((i - n) / 4);
            row[first..first + 4].iter_mut().for_each(|m| *m = true);
        }
    }
    Ok(MarkedInput {
        token_ids,
        position_ids,
        attention_mask,
        text_len: n,
    })
}

/// Greedy split: pairs are added while `n + 4 * count <= budget`. A window
/// too long for even one pair still gets one pair per batch.
pub fn chunk_pairs(
    model: &RelationModel,
    input: &SentenceInput,
    pairs: &[RelationCandidate],
    token_budget: usize,
) -> Result<Vec<PairBatch>> {
    let n = input.window_ids.len();
    let per_batch = if n + 4 > token_budget {
        log::warn!("{n} text tokens leave no room for markers within budget {token_budget}; using one pair per pass");
        1
    } else {
        (token_budget - n) / 4
    };
    pairs
        .chunks(per_batch.max(1))
        .map(|chunk| {
            Ok(PairBatch {
                pairs: chunk.to_vec(),
                input: build_approx_input(model, input, chunk)?,
            })
        })
        .collect()
}

/// One encoder pass over a batch; pair `k` is represented by the states of
/// rows `n + 4k` and `n + 4k + 2`.
pub fn approx_forward(model: &RelationModel, g: &mut Graph<'_>, batch: &PairBatch) -> Result<RelationOutput> {
    if !model.mode.uses_markers() {
        return Err(Error::Config(format!(
            "batched inference needs a marker mode, got `{}`",
            model.mode
        )));
    }
    if batch.pairs.is_empty() {
        return Err(Error::Input("empty pair batch".into()));
    }
    let hidden = model.encoder.encode(g, &batch.input)?;
    let (subj, obj): (Vec<usize>, Vec<usize>) = (0..batch.pairs.len()).map(|k| batch.opening_rows(k)).unzip();
    let s = g.gather_rows(hidden, &subj)?;
    let o = g.gather_rows(hidden, &obj)?;
    let base = g.concat_cols(&[s, o])?;
    let states = if model.mode.entity_loss() { Some((s, o)) } else { None };
    model.head(g, base, states, &batch.pairs, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub mode: String,
    pub sentences_per_sec: f64,
    pub encoder_passes: usize,
    pub pairs: usize,
    pub wall_ms: f64,
}

/// Times relation inference over `sentences`; wall time is the median of
/// `runs` (at least 3) repetitions.
pub fn benchmark_speed(
    model: &RelationModel,
    store: &ParameterStore,
    sentences: &[(SentenceInput, Vec<TypedSpan>)],
    mode: InferenceMode,
    runs: usize,
) -> Result<SpeedReport> {
    let runs = runs.max(3);
    let mut times = Vec::with_capacity(runs);
    let (mut passes, mut pairs) = (0, 0);
    for _ in 0..runs {
        let start = Instant::now();
        passes = 0;
        pairs = 0;
        for (input, entities) in sentences {
            let p = model.predict(store, input, entities, mode)?;
            passes += p.encoder_passes;
            pairs += p.pairs;
        }
        times.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    times.sort_by(f64::total_cmp);
    let wall_ms = times[runs / 2];
    Ok(SpeedReport {
        mode: match mode {
            InferenceMode::Full => "full".into(),
            InferenceMode::Approx { .. } => "approx".into(),
        },
        sentences_per_sec: sentences.len() as f64 / (wall_ms / 1000.0).max(1e-9),
        encoder_passes: passes,
        pairs,
        wall_ms,
    })
}
