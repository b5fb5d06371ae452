use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Closed whitespace-token vocabulary with reserved padding and unknown ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Sorted distinct tokens after the two reserved entries.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let distinct: BTreeSet<&String> = tokens.into_iter().collect();
        let mut all = vec!["[PAD]".to_string(), "[UNK]".to_string()];
        all.extend(distinct.into_iter().cloned());
        Self::from(all)
    }

    /// Number of text ids, including the reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
