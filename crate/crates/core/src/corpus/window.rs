/// Target sentence padded with surrounding document tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub tokens: Vec<String>,
    /// Index of the target sentence's first token inside `tokens`.
    pub target_offset: usize,
    pub target_len: usize,
}

/// Extends sentence `sentence_index` to at most `window` tokens with
/// `floor((W − n) / 2)` tokens of left context and the remainder on the right.
///
/// Each side is cut at the document boundary without borrowing from the
/// other side. `None` (or a window shorter than the sentence) gives the bare
/// sentence.
pub fn make_window(sentences: &[Vec<String>], sentence_index: usize, window: Option<usize>) -> ContextWindow {
    let target = &sentences[sentence_index];
    let n = target.len();
    let bare = ContextWindow {
        tokens: target.clone(),
        target_offset: 0,
        target_len: n,
    };
    let Some(w) = window else { return bare };
    if w < n {
        log::warn!("context window {w} shorter than sentence of {n} tokens; using bare sentence");
        return bare;
    }
    let left_take = (w - n) / 2;
    let right_take = (w - n) - left_take;

    let left: Vec<&String> = sentences[..sentence_index].iter().flatten().collect();
    let right: Vec<&String> = sentences[sentence_index + 1..].iter().flatten().collect();
    let left_start = left.len().saturating_sub(left_take);
    let right_end = right_take.min(right.len());

    let mut tokens: Vec<String> = left[left_start..].iter().map(|t| (*t).clone()).collect();
    let target_offset = tokens.len();
    tokens.extend(target.iter().cloned());
    tokens.extend(right[..right_end].iter().map(|t| (*t).clone()));
    ContextWindow {
        tokens,
        target_offset,
        target_len: n,
    }
}
