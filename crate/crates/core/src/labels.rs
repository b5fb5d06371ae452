use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index reserved for "no entity" / "no relation".
pub const NULL_LABEL: usize = 0;

/// Ordered type names with an implicit null class at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config("empty label name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate label `{n}`")));
            }
        }
        Ok(LabelSet { names })
    }

    /// Number of real types, excluding the null class.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Classifier width: every type plus the null class.
    pub fn num_classes(&self) -> usize {
        self.names.len() + 1
    }

    /// Class index of a type name (1-based; 0 is the null class).
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        if class == NULL_LABEL {
            None
        } else {
            self.names.get(class - 1).map(String::as_str)
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Relation types plus a per-type flag for direction-insensitive scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabelSet {
    pub labels: LabelSet,
    pub symmetric: Vec<bool>,
}

impl RelationLabelSet {
    pub fn new(labels: LabelSet) -> Self {
        let symmetric = vec![false; labels.len()];
        RelationLabelSet { labels, symmetric }
    }

    pub fn with_symmetric(mut self, names: &[String]) -> Result<Self> {
        for n in names {
            let idx = self
                .labels
                .index_of(n)
                .ok_or_else(|| Error::Config(format!("unknown symmetric relation `{n}`")))?;
            self.symmetric[idx - 1] = true;
        }
        Ok(self)
    }

    /// Names of the symmetric types.
    pub fn symmetric_names(&self) -> std::collections::HashSet<String> {
        self.labels
            .names()
            .iter()
            .zip(&self.symmetric)
            .filter(|(_, &s)| s)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn is_symmetric(&self, name: &str) -> bool {
        self.labels
            .index_of(name)
            .is_some_and(|i| self.symmetric[i - 1])
    }
}
