//! Binary checkpoints.
//!
//! Layout (little-endian): magic `PURETOY1`, `u32` version, `u64` length of a
//! canonical JSON metadata block (run config, vocabulary, label sets), `u64`
//! tensor count, then per tensor: `u32` name length, UTF-8 name, `u32` rank,
//! `u64` dims, and the `f64` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::entity::EntityModel;
use crate::error::{Error, Result};
use crate::labels::{LabelSet, RelationLabelSet};
use crate::relation::RelationModel;
use crate::tensor::{ParameterStore, TensorValue};

pub const MAGIC: &[u8; 8] = b"PURETOY1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Entity,
    Relation,
    /// Entity and relation heads over one shared encoder.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
    pub symmetric_relations: Vec<String>,
}

impl CheckpointMeta {
    pub fn labels(&self) -> Result<(LabelSet, RelationLabelSet)> {
        let ents = LabelSet::new(self.entity_types.clone())?;
        let rels = RelationLabelSet::new(LabelSet::new(self.relation_types.clone())?)
            .with_symmetric(&self.symmetric_relations)?;
        Ok((ents, rels))
    }

    /// Models described by the stored config.
    pub fn models(&self) -> Result<(EntityModel, RelationModel)> {
        let (ents, rels) = self.labels()?;
        self.config.build_models(self.vocab.len(), &ents, &rels)
    }

    /// Parameter names and shapes a checkpoint of this kind must hold.
    pub fn expected_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (entity, relation) = self.models()?;
        Ok(match self.kind {
            ModelKind::Entity => entity.parameter_shapes(true),
            ModelKind::Relation => relation.parameter_shapes(true),
            ModelKind::Joint => {
                let mut v = entity.parameter_shapes(true);
                v.extend(relation.parameter_shapes(false));
                v
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParameterStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data(format!("checkpoint truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::data(format!("{what} out of range")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.meta).expect("metadata serializes");
        let meta = serde_json::to_string(&meta).expect("value serializes");
        let mut out = Vec::with_capacity(64 + meta.len() + 8 * self.store.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (name, t) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and checks every tensor against the shapes implied by the
    /// stored config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::data("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64("metadata length")?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
        let count = r.u64("tensor count")?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let len = r.u32("tensor name")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::data("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::data(format!("tensor `{name}` too large")))?;
            let payload = r.take(numel.checked_mul(8).unwrap_or(usize::MAX), &format!("payload of `{name}`"))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(name, TensorValue::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint"));
        }
        let ckpt = Checkpoint { meta, store };
        ckpt.check_shapes(&ckpt.meta.expected_shapes()?)?;
        Ok(ckpt)
    }

    /// Fails on the first tensor that is missing, extra or mis-shaped.
    pub fn check_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            match self.store.get(name) {
                None => return Err(Error::Config(format!("checkpoint lacks tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "tensor `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.store.names().find(|n| !expected.iter().any(|(e, _)| e == n)) {
            return Err(Error::Config(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Checks the stored tensors against models built from `cfg` instead of
    /// the stored config.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        let meta = CheckpointMeta {
            config: cfg.clone(),
            ..self.meta.clone()
        };
        self.check_shapes(&meta.expected_shapes()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Checkpoint {
        let cfg = RunConfig::parse("d_model = 8\nn_heads = 2\nn_layers = 1\nd_ff = 8\nmax_position = 16\nwidth_emb_dim = 4\nffnn_hidden = 4\nmax_span_len = 3").unwrap();
        let meta = CheckpointMeta {
            kind: ModelKind::Entity,
            config: cfg,
            vocab: Vocabulary::build(["a".to_string(), "b".to_string()].iter()),
            entity_types: vec!["X".into()],
            relation_types: vec!["R".into()],
            symmetric_relations: vec![],
        };
        let (entity, _) = meta.models().unwrap();
        let mut store = ParameterStore::new();
        entity.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        Checkpoint { meta, store }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = tiny();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, c);
    }

    #[test]
    fn corrupted_inputs_rejected() {
        let bytes = tiny().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let c = tiny();
        let other = c.meta.config.with_overrides([("width_emb_dim", "5")]).unwrap();
        let err = c.check_config(&other).unwrap_err().to_string();
        assert!(err.contains("entity.width_emb"), "{err}");
    }
}
