//! Corpus ingestion, vocabulary, context windows and synthetic data.

mod format;
mod synthetic;
mod vocab;
mod window;

pub use format::{
    load_corpus, parse_corpus, serialize_corpus, write_corpus, AnnotatedDocument, Corpus, Entity,
    LoadOptions, NerTuple, Relation, RelationTuple, Sentence,
};
pub use synthetic::{generate_synthetic, GrammarConfig};
pub use vocab::{Vocabulary, PAD_ID, UNK_ID};
pub use window::{make_window, ContextWindow};

use crate::error::{Error, Result};

/// Document indices for one train/holdout split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// `k` deterministic folds over `num_docs` documents; fold `i` holds out
/// every document whose index is congruent to `i` mod `k`.
pub fn jackknife_folds(num_docs: usize, k: usize) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("jackknifing needs k >= 2, got {k}")));
    }
    if num_docs < k {
        return Err(Error::Config(format!(
            "cannot split {num_docs} documents into {k} folds"
        )));
    }
    Ok((0..k)
        .map(|i| {
            let (holdout, train) = (0..num_docs).partition(|d| d % k == i);
            Fold { train, holdout }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_docs_ten_folds() {
        let folds = jackknife_folds(20, 10).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen = vec![0; 20];
        for f in &folds {
            assert_eq!(f.holdout.len(), 2);
            assert_eq!(f.train.len(), 18);
            for &d in &f.holdout {
                seen[d] += 1;
                assert!(!f.train.contains(&d));
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(folds, jackknife_folds(20, 10).unwrap());
    }

    #[test]
    fn too_few_documents() {
        assert!(jackknife_folds(5, 10).is_err());
        assert!(jackknife_folds(5, 1).is_err());
    }
}
