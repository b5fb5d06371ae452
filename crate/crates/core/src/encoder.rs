//! Post-layernorm transformer encoder driven by explicit position ids and an
//! explicit attention mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterStore, TensorValue, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_position: usize,
    /// Applied to attention and feed-forward outputs in training graphs only.
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_position", self.max_position),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Token ids with per-token position ids and a `T×T` attention mask.
///
/// `attention_mask[i * T + j]` is true when token `i` may attend to token `j`.
/// The first `text_len` tokens are text; anything after is marker tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedInput {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub text_len: usize,
}

impl MarkedInput {
    /// Sequential positions and unrestricted attention.
    pub fn sequential(token_ids: Vec<usize>) -> Self {
        let t = token_ids.len();
        MarkedInput {
            position_ids: (0..t).collect(),
            attention_mask: vec![true; t * t],
            text_len: t,
            token_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.attention_mask[query * self.len() + key]
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let t = self.len();
        if self.position_ids.len() != t {
            return Err(Error::Input(format!(
                "{} position ids for {t} tokens",
                self.position_ids.len()
            )));
        }
        if self.attention_mask.len() != t * t {
            return Err(Error::Input(format!(
                "attention mask has {} entries for {t} tokens",
                self.attention_mask.len()
            )));
        }
        if self.text_len > t {
            return Err(Error::Input(format!("text_len {} exceeds length {t}", self.text_len)));
        }
        for (i, &id) in self.token_ids.iter().enumerate() {
            if id >= config.vocab_size {
                return Err(Error::Input(format!(
                    "token id {id} at index {i} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
        }
        for (i, &p) in self.position_ids.iter().enumerate() {
            if p >= config.max_position {
                return Err(Error::Input(format!(
                    "position id {p} at index {i} exceeds max_position {}",
                    config.max_position
                )));
            }
        }
        if let Some(i) = (0..t).find(|&i| !self.allows(i, i)) {
            return Err(Error::Input(format!("token {i} cannot attend to itself")));
        }
        Ok(())
    }
}

/// Which inputs can influence which outputs after `n_layers` rounds of
/// masked attention: the boolean power `(I ∨ mask)^n_layers`.
pub fn reachability_closure(mask: &[bool], t: usize, n_layers: usize) -> Vec<bool> {
    assert_eq!(mask.len(), t * t, "mask must be square");
    let mut step = mask.to_vec();
    for i in 0..t {
        step[i * t + i] = true;
    }
    let mut acc: Vec<bool> = (0..t * t).map(|k| k / t == k % t).collect();
    for _ in 0..n_layers {
        let mut next = vec![false; t * t];
        for i in 0..t {
            for k in 0..t {
                if !acc[i * t + k] {
                    continue;
                }
                for j in 0..t {
                    if step[k * t + j] {
                        next[i * t + j] = true;
                    }
                }
            }
        }
        acc = next;
    }
    acc
}

/// Learned positions start from a scaled sinusoid table; random starts
/// learn span boundaries much more slowly on small corpora.
const POS_INIT_SCALE: f64 = 0.5;

/// Sinusoidal table `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
fn sinusoid_fill(data: &mut [f64], d: usize, scale: f64) {
    for (p, row) in data.chunks_mut(d).enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let angle = p as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
            *v = scale * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
}

/// Transformer encoder whose parameters live under `prefix` in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(config: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Encoder {
            config,
            prefix: prefix.into(),
        })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    /// Expected parameter names and shapes, in registration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let d = c.d_model;
        let mut out = vec![
            (self.name("tok_emb"), vec![c.vocab_size, d]),
            (self.name("pos_emb"), vec![c.max_position, d]),
        ];
        for l in 0..c.n_layers {
            let p = |s: &str| self.name(&format!("layers.{l}.{s}"));
            for proj in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{proj}")), vec![d, d]));
                out.push((p(&format!("attn.b{proj}")), vec![d]));
            }
            out.push((p("ln1.gamma"), vec![d]));
            out.push((p("ln1.beta"), vec![d]));
            out.push((p("ffn.w1"), vec![d, c.d_ff]));
            out.push((p("ffn.b1"), vec![c.d_ff]));
            out.push((p("ffn.w2"), vec![c.d_ff, d]));
            out.push((p("ffn.b2"), vec![d]));
            out.push((p("ln2.gamma"), vec![d]));
            out.push((p("ln2.beta"), vec![d]));
        }
        out
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for (name, shape) in self.parameter_shapes() {
            let value = if name.ends_with("gamma") {
                TensorValue::filled(&shape, 1.0)
            } else if shape.len() == 1 {
                TensorValue::zeros(&shape)
            } else if name.ends_with("pos_emb") {
                let mut t = TensorValue::zeros(&shape);
                sinusoid_fill(t.data_mut(), shape[1], POS_INIT_SCALE);
                t
            } else if name.ends_with("_emb") {
                TensorValue::randn(&shape, 0.1, rng)
            } else {
                let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                TensorValue::randn(&shape, std, rng)
            };
            store.insert(name, value)?;
        }
        Ok(())
    }

    /// Token plus position embeddings, `[T, d_model]`.
    pub fn embed(&self, g: &mut Graph<'_>, input: &MarkedInput) -> Result<Var> {
        input.validate(&self.config)?;
        let tok = g.param(&self.name("tok_emb"))?;
        let pos = g.param(&self.name("pos_emb"))?;
        let te = g.embedding(tok, &input.token_ids)?;
        let pe = g.embedding(pos, &input.position_ids)?;
        g.add(te, pe)
    }

    /// Hidden states `[T, d_model]` after all layers.
    pub fn encode(&self, g: &mut Graph<'_>, input: &MarkedInput) -> Result<Var> {
        let x = self.embed(g, input)?;
        self.encode_embedded(g, x, &input.attention_mask)
    }

    /// Runs the layer stack over precomputed embeddings.
    pub fn encode_embedded(&self, g: &mut Graph<'_>, mut x: Var, mask: &[bool]) -> Result<Var> {
        let c = &self.config;
        for l in 0..c.n_layers {
            let p = |s: &str| self.name(&format!("layers.{l}.{s}"));
            let proj = |g: &mut Graph<'_>, x: Var, which: &str| -> Result<Var> {
                let w = g.param(&p(&format!("attn.w{which}")))?;
                let b = g.param(&p(&format!("attn.b{which}")))?;
                g.linear(x, w, b)
            };
            let q = proj(g, x, "q")?;
            let k = proj(g, x, "k")?;
            let v = proj(g, x, "v")?;
            let ctx = g.attention(q, k, v, mask, c.n_heads)?;
            let attn = proj(g, ctx, "o")?;
            let attn = g.dropout(attn, c.dropout);
            let res = g.add(x, attn)?;
            let (g1, b1) = (g.param(&p("ln1.gamma"))?, g.param(&p("ln1.beta"))?);
            let h = g.layer_norm(res, g1, b1)?;

            let (w1, fb1) = (g.param(&p("ffn.w1"))?, g.param(&p("ffn.b1"))?);
            let (w2, fb2) = (g.param(&p("ffn.w2"))?, g.param(&p("ffn.b2"))?);
            let f = g.linear(h, w1, fb1)?;
            let f = g.gelu(f);
            let f = g.linear(f, w2, fb2)?;
            let f = g.dropout(f, c.dropout);
            let res = g.add(h, f)?;
            let (g2, b2) = (g.param(&p("ln2.gamma"))?, g.param(&p("ln2.beta"))?);
            x = g.layer_norm(res, g2, b2)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(n_layers: usize) -> (Encoder, ParameterStore) {
        let cfg = EncoderConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_layers,
            d_ff: 16,
            max_position: 16,
            dropout: 0.0,
        };
        let enc = Encoder::new(cfg, "enc").unwrap();
        let mut store = ParameterStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (enc, store)
    }

    #[test]
    fn output_shape() {
        let (enc, store) = tiny(2);
        let mut g = Graph::inference(&store);
        let h = enc.encode(&mut g, &MarkedInput::sequential(vec![1, 2, 3, 4, 5, 6])).unwrap();
        assert_eq!(g.shape(h), &[6, 8]);
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let (enc, store) = tiny(1);
        let mut g = Graph::inference(&store);
        let err = enc.encode(&mut g, &MarkedInput::sequential(vec![1, 10])).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
        let mut input = MarkedInput::sequential(vec![1, 2]);
        input.position_ids[0] = 16;
        assert!(matches!(enc.encode(&mut g, &input), Err(Error::Input(_))));
    }

    #[test]
    fn rejects_mask_without_self_attention() {
        let (enc, store) = tiny(1);
        let mut g = Graph::inference(&store);
        let mut input = MarkedInput::sequential(vec![1, 2]);
        input.attention_mask[3] = false;
        assert!(enc.encode(&mut g, &input).is_err());
    }

    #[test]
    fn self_only_mask_has_no_mixing() {
        let (enc, store) = tiny(1);
        let ids = vec![3, 4, 5];
        let mut input = MarkedInput::sequential(ids.clone());
        input.attention_mask = (0..9).map(|k| k / 3 == k % 3).collect();
        let mut g = Graph::inference(&store);
        let h = enc.encode(&mut g, &input).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let mut alone = MarkedInput::sequential(vec![id]);
            alone.position_ids = vec![i];
            let mut g1 = Graph::inference(&store);
            let h1 = enc.encode(&mut g1, &alone).unwrap();
            assert_eq!(&g.value(h)[i * 8..(i + 1) * 8], g1.value(h1));
        }
    }

    #[test]
    fn tied_identical_tokens_give_identical_rows() {
        let (enc, store) = tiny(2);
        let mut input = MarkedInput::sequential(vec![1, 7, 2, 7]);
        input.position_ids = vec![0, 1, 2, 1];
        let mut g = Graph::inference(&store);
        let h = enc.encode(&mut g, &input).unwrap();
        let v = g.value(h);
        assert_eq!(&v[8..16], &v[24..32]);
    }

    #[test]
    fn closure_of_identity_and_full() {
        let t = 4;
        let id: Vec<bool> = (0..t * t).map(|k| k / t == k % t).collect();
        assert_eq!(reachability_closure(&id, t, 3), id);
        let full = vec![true; t * t];
        assert_eq!(reachability_closure(&full, t, 2), full);
    }

    #[test]
    fn closure_of_chain_grows_per_layer() {
        // token i sees i-1 only
        let t = 4;
        let mask: Vec<bool> = (0..t * t).map(|k| k / t == k % t + 1).collect();
        let r1 = reachability_closure(&mask, t, 1);
        let r2 = reachability_closure(&mask, t, 2);
        assert!(r1[3 * t + 2] && !r1[3 * t + 1]);
        assert!(r2[3 * t + 1] && !r2[3 * t]);
    }
}
