//! Model hyperparameters and the named parameter store.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Utterance encoder variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Word, positional and POS embeddings with role-mixed,
    /// term-frequency-adjusted attention.
    #[default]
    Difficulty,
    /// Word embeddings through a BiLSTM; the attention summary is the mean
    /// of the outputs.
    PlainBirnn,
    /// Word embeddings through a BiLSTM with a single shared attention over
    /// its outputs.
    BirnnSelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Word embedding dimension `d` (even).
    pub embed_dim: usize,
    /// Number of POS categories `n`.
    pub n_pos: usize,
    /// Recurrent hidden units `k`.
    pub hidden: usize,
    /// Attention size `z`.
    pub attention: usize,
    /// Longest dialogue the matching features can hold.
    pub max_dialogue_len: usize,
    /// Drop probability applied to the fused and context-aware
    /// representations during training.
    pub dropout_rate: f64,
    pub use_emotion: bool,
    pub use_matching: bool,
    pub encoder_mode: EncoderMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            embed_dim: 200,
            n_pos: 10,
            hidden: 128,
            attention: 128,
            max_dialogue_len: 64,
            dropout_rate: 0.25,
            use_emotion: true,
            use_matching: true,
            encoder_mode: EncoderMode::Difficulty,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        if self.hidden == 0 || self.attention == 0 || self.max_dialogue_len == 0 {
            return bad("hidden, attention and max_dialogue_len must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must include the reserved ids".into());
        }
        if self.encoder_mode == EncoderMode::Difficulty && self.n_pos == 0 {
            return bad("the difficulty encoder needs at least one POS category".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Length of an utterance vector, `4k + 1`.
    pub fn utterance_dim(&self) -> usize {
        4 * self.hidden + 1
    }

    /// Rows of the encoder input: `2d + n` for the difficulty encoder,
    /// `d` otherwise.
    pub fn encoder_input_dim(&self) -> usize {
        match self.encoder_mode {
            EncoderMode::Difficulty => 2 * self.embed_dim + self.n_pos,
            _ => self.embed_dim,
        }
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, k, z) = (self.embed_dim, self.hidden, self.attention);
        let input = self.encoder_input_dim();
        let mut out: Vec<(String, (usize, usize))> = vec![("word_embedding".into(), (d, self.vocab_size))];
        for dir in ["fwd", "bwd"] {
            out.push((format!("enc_{dir}_w_ih"), (4 * k, input)));
            out.push((format!("enc_{dir}_w_hh"), (4 * k, k)));
            out.push((format!("enc_{dir}_b"), (4 * k, 1)));
        }
        match self.encoder_mode {
            EncoderMode::Difficulty => {
                for role in ["customer", "agent"] {
                    out.push((format!("attn_w_{role}"), (z, input)));
                    out.push((format!("attn_b_{role}"), (z, 1)));
                    out.push((format!("attn_g_{role}"), (z, 1)));
                }
            }
            EncoderMode::BirnnSelfAttention => {
                out.push(("attn_w".into(), (z, 2 * k)));
                out.push(("attn_b".into(), (z, 1)));
                out.push(("attn_g".into(), (z, 1)));
            }
            EncoderMode::PlainBirnn => {}
        }
        out.push(("fuse_w".into(), (k, self.utterance_dim() + self.max_dialogue_len)));
        out.push(("fuse_b".into(), (k, 1)));
        out.push(("ctx_w_ih".into(), (4 * k, k)));
        out.push(("ctx_w_hh".into(), (4 * k, k)));
        out.push(("ctx_b".into(), (4 * k, 1)));
        out.push(("ctx_attn_w".into(), (k, k)));
        out.push(("proj_w".into(), (k, 2 * k)));
        out.push(("proj_b".into(), (k, 1)));
        out.push(("cls_w".into(), (2, k)));
        out.push(("cls_b".into(), (2, 1)));
        out
    }
}

/// Uniform bound of the Glorot initializer for a `rows x cols` matrix.
pub fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Half-width of the uniform word-embedding initializer.
pub const EMBEDDING_INIT_RANGE: f64 = 0.05;

/// Trainable tensors by name. Vectors are stored as single-column matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ModelParams {
    pub fn from_named(entries: Vec<(String, Array2<f64>)>) -> Self {
        let (names, values) = entries.into_iter().unzip();
        ModelParams { names, values }
    }

    /// Glorot-uniform weights, zero biases (forget gates at 1), and word
    /// embeddings uniform in `[-0.05, 0.05]` unless `pretrained` is given.
    pub fn init(config: &ModelConfig, seed: u64, pretrained: Option<&Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, (rows, cols)) in config.param_shapes() {
            let value = if name == "word_embedding" {
                match pretrained {
                    Some(table) => {
                        if table.dim() != (rows, cols) {
                            return Err(Error::Shape {
                                tensor: name,
                                expected: vec![rows, cols],
                                found: table.shape().to_vec(),
                            });
                        }
                        table.clone()
                    }
                    None => uniform(&mut rng, rows, cols, EMBEDDING_INIT_RANGE),
                }
            } else if is_bias(&name) {
                let mut b = Array2::zeros((rows, cols));
                if matches!(name.as_str(), "enc_fwd_b" | "enc_bwd_b" | "ctx_b") {
                    let k = rows / 4;
                    b.slice_mut(ndarray::s![k..2 * k, ..]).fill(1.0);
                }
                b
            } else {
                uniform(&mut rng, rows, cols, glorot_bound(rows, cols))
            };
            entries.push((name, value));
        }
        Ok(Self::from_named(entries))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index(name).map(|i| &self.values[i])
    }

    pub fn value(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.dim())).collect()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Sum of squared entries over every tensor.
    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Checks names and shapes against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.len()
            )));
        }
        for ((name, (r, c)), (have, v)) in expected.iter().zip(self.iter()) {
            if name != have {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{have}`")));
            }
            if v.dim() != (*r, *c) {
                return Err(Error::Shape {
                    tensor: name.clone(),
                    expected: vec![*r, *c],
                    found: v.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("_b") || name.starts_with("attn_b")
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            embed_dim: 8,
            n_pos: 4,
            hidden: 4,
            attention: 5,
            max_dialogue_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = small();
        let p = ModelParams::init(&cfg, 1, None).unwrap();
        assert_eq!(p.get("attn_w_customer").unwrap().dim(), (5, 2 * 8 + 4));
        assert_eq!(p.get("fuse_w").unwrap().dim(), (4, 4 * 4 + 1 + 6));
        assert_eq!(p.get("proj_w").unwrap().dim(), (4, 8));
        assert_eq!(p.get("cls_w").unwrap().dim(), (2, 4));
        assert_eq!(p.get("word_embedding").unwrap().dim(), (8, 30));
        p.check_shapes(&cfg).unwrap();
        let other = ModelConfig { hidden: 5, ..cfg };
        assert!(p.check_shapes(&other).is_err());
    }

    #[test]
    fn same_seed_bit_identical() {
        let cfg = small();
        let a = ModelParams::init(&cfg, 42, None).unwrap();
        let b = ModelParams::init(&cfg, 42, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(&cfg, 43, None).unwrap());
    }

    #[test]
    fn glorot_bounds_respected() {
        let cfg = small();
        let p = ModelParams::init(&cfg, 3, None).unwrap();
        let w = p.get("attn_w_agent").unwrap();
        let bound = glorot_bound(5, 2 * 8 + 4);
        assert_eq!(bound, (6.0f64 / (5.0 + 20.0)).sqrt());
        assert!(w.iter().all(|x| x.abs() <= bound));
        let e = p.get("word_embedding").unwrap();
        assert!(e.iter().all(|x| x.abs() <= EMBEDDING_INIT_RANGE));
        let b = p.get("enc_fwd_b").unwrap();
        assert_eq!(b[[0, 0]], 0.0);
        assert_eq!(b[[4, 0]], 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { embed_dim: 7, ..small() }.validate().is_err());
        assert!(ModelConfig { dropout_rate: 1.0, ..small() }.validate().is_err());
        assert!(ModelConfig { hidden: 0, ..small() }.validate().is_err());
        assert_eq!(small().utterance_dim(), 17);
        let plain = ModelConfig {
            encoder_mode: EncoderMode::PlainBirnn,
            ..small()
        };
        let p = ModelParams::init(&plain, 0, None).unwrap();
        assert!(p.get("attn_w_customer").is_none());
        assert_eq!(p.get("enc_fwd_w_ih").unwrap().dim(), (16, 8));
    }
}
