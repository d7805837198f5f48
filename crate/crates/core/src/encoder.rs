//! Small bidirectional post-layer-norm transformer encoder.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::autodiff::{AttentionLayout, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::init::{truncated_normal, INIT_STD};
use crate::tensor::Tensor;

pub const BACKBONE_GROUP: &str = "backbone";

/// Reserved token ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_positions: 160,
            vocab_size: 1000,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.vocab_size <= CLS_ID {
            return Err(Error::Config(
                "vocab_size must cover the special tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Per-position validity flags for one sequence; `false` marks padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask(pub Vec<bool>);

impl AttentionMask {
    pub fn all_valid(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Dense {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    shift: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    query: Dense,
    key: Dense,
    value: Dense,
    output: Dense,
    attn_norm: Norm,
    ffn_in: Dense,
    ffn_out: Dense,
    ffn_norm: Norm,
}

/// A batch laid out for the encoder: `batch` sequences padded to `seq` rows.
#[derive(Clone, Debug)]
pub struct EmbeddedBatch {
    pub embedded: NodeId,
    pub layout: AttentionLayout,
}

/// Encoder handle: parameter ids into a [`ParamStore`] plus an instrumented
/// forward-pass counter.
#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
    forward_passes: AtomicU64,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            token_embedding: self.token_embedding,
            position_embedding: self.position_embedding,
            blocks: self.blocks.clone(),
            forward_passes: AtomicU64::new(self.forward_passes()),
        }
    }
}

fn dense_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.kernel"), format!("{prefix}.bias"))
}

impl Encoder {
    /// Allocates freshly initialized backbone weights in `store`.
    ///
    /// Embeddings and kernels are truncated normal (std 0.02); biases are
    /// zero and normalization gains one.
    pub fn build<R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut add = |name: String, t: Tensor| store.add(name, BACKBONE_GROUP, t, true);
        let token_embedding = add(
            "backbone.embeddings.token".into(),
            truncated_normal(&[config.vocab_size, d], INIT_STD, rng),
        )?;
        let position_embedding = add(
            "backbone.embeddings.position".into(),
            truncated_normal(&[config.max_positions, d], INIT_STD, rng),
        )?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut dense = |name: &str, rows: usize, cols: usize| -> Result<Dense> {
                let (k, b) = dense_names(&format!("backbone.layer{l}.{name}"));
                Ok(Dense {
                    kernel: add(k, truncated_normal(&[rows, cols], INIT_STD, rng))?,
                    bias: add(b, Tensor::zeros(&[cols]))?,
                })
            };
            let query = dense("attention.query", d, d)?;
            let key = dense("attention.key", d, d)?;
            let value = dense("attention.value", d, d)?;
            let output = dense("attention.output", d, d)?;
            let ffn_in = dense("ffn.intermediate", d, config.ffn_dim)?;
            let ffn_out = dense("ffn.output", config.ffn_dim, d)?;
            let mut norm = |name: &str| -> Result<Norm> {
                Ok(Norm {
                    gain: add(
                        format!("backbone.layer{l}.{name}.gain"),
                        Tensor::full(&[d], 1.0),
                    )?,
                    shift: add(
                        format!("backbone.layer{l}.{name}.shift"),
                        Tensor::zeros(&[d]),
                    )?,
                })
            };
            let attn_norm = norm("attention.norm")?;
            let ffn_norm = norm("ffn.norm")?;
            blocks.push(Block {
                query,
                key,
                value,
                output,
                attn_norm,
                ffn_in,
                ffn_out,
                ffn_norm,
            });
        }
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    pub fn position_embedding(&self) -> ParamId {
        self.position_embedding
    }

    /// Number of `encode` calls so far.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    /// One sequence: `prompt_block` rows (if any) followed by token
    /// embeddings, plus position embeddings from position 0.
    pub fn embed_sequence(
        &self,
        g: &mut Graph<'_>,
        prompt_block: Option<NodeId>,
        token_ids: &[usize],
    ) -> Result<NodeId> {
        let batch = self.embed_batch(g, prompt_block, &[token_ids.to_vec()])?;
        Ok(batch.embedded)
    }

    /// Lays out a padded batch: every sequence is `prompt_block` rows then
    /// its tokens, padded with `[PAD]` to the longest sequence.
    pub fn embed_batch(
        &self,
        g: &mut Graph<'_>,
        prompt_block: Option<NodeId>,
        sequences: &[Vec<usize>],
    ) -> Result<EmbeddedBatch> {
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let prompt_rows = prompt_block.map_or(0, |p| g.value(p).rows());
        let max_tokens = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let seq = prompt_rows + max_tokens;
        if seq > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: seq,
                limit: self.config.max_positions,
            });
        }
        if seq == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = sequences.iter().flatten().find(|&&id| id >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }

        let mut valid = Vec::with_capacity(sequences.len() * seq);
        let mut ids = Vec::with_capacity(sequences.len() * max_tokens);
        for s in sequences {
            valid.extend(std::iter::repeat(true).take(prompt_rows + s.len()));
            valid.extend(std::iter::repeat(false).take(max_tokens - s.len()));
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD_ID).take(max_tokens - s.len()));
        }

        let table = g.param(self.token_embedding);
        let tokens = if max_tokens > 0 {
            Some(g.embedding(table, &ids)?)
        } else {
            None
        };
        let content = match (prompt_block, tokens) {
            (Some(p), Some(t)) => {
                let mut parts = Vec::with_capacity(2 * sequences.len());
                for b in 0..sequences.len() {
                    parts.push(p);
                    parts.push(g.slice_rows(t, b * max_tokens, max_tokens)?);
                }
                g.concat_rows(&parts)?
            }
            (Some(p), None) => g.concat_rows(&vec![p; sequences.len()])?,
            (None, Some(t)) => t,
            (None, None) => unreachable!("seq > 0"),
        };
        let positions: Vec<usize> = (0..sequences.len()).flat_map(|_| 0..seq).collect();
        let pos_table = g.param(self.position_embedding);
        let pos = g.embedding(pos_table, &positions)?;
        let embedded = g.add(content, pos)?;
        Ok(EmbeddedBatch {
            embedded,
            layout: AttentionLayout {
                batch: sequences.len(),
                seq,
                heads: self.config.num_heads,
                valid: Arc::new(valid),
            },
        })
    }

    /// Runs the layer stack and returns last-layer hidden states
    /// (`batch * seq` rows). Dropout is applied only when `rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        embedded: NodeId,
        layout: &AttentionLayout,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        let rows = g.value(embedded).rows();
        if layout.valid.len() != rows || layout.batch * layout.seq != rows {
            return Err(Error::Shape {
                op: "encode",
                lhs: g.value(embedded).shape().to_vec(),
                rhs: vec![layout.valid.len()],
            });
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let rate = self.config.dropout_rate;
        let mut drop = |g: &mut Graph<'_>, x: NodeId| match rng.as_deref_mut() {
            Some(r) => g.dropout(x, rate, r),
            None => x,
        };
        let mut x = drop(g, embedded);
        for block in &self.blocks {
            let q = dense(g, x, &block.query)?;
            let k = dense(g, x, &block.key)?;
            let v = dense(g, x, &block.value)?;
            let attn = g.attention(q, k, v, layout)?;
            let attn = dense(g, attn, &block.output)?;
            let attn = drop(g, attn);
            let res = g.add(x, attn)?;
            x = norm(g, res, &block.attn_norm)?;

            let h = dense(g, x, &block.ffn_in)?;
            let h = g.gelu(h);
            let h = dense(g, h, &block.ffn_out)?;
            let h = drop(g, h);
            let res = g.add(x, h)?;
            x = norm(g, res, &block.ffn_norm)?;
        }
        Ok(x)
    }

    /// Parameter ids of every backbone tensor.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            for d in [&b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out] {
                ids.push(d.kernel);
                ids.push(d.bias);
            }
            for n in [&b.attn_norm, &b.ffn_norm] {
                ids.push(n.gain);
                ids.push(n.shift);
            }
        }
        ids
    }
}

fn dense(g: &mut Graph<'_>, x: NodeId, d: &Dense) -> Result<NodeId> {
    let w = g.param(d.kernel);
    let b = g.param(d.bias);
    g.linear(x, w, b)
}

fn norm(g: &mut Graph<'_>, x: NodeId, n: &Norm) -> Result<NodeId> {
    let y = g.layer_norm(x);
    let gain = g.param(n.gain);
    let shift = g.param(n.shift);
    let y = g.mul(y, gain)?;
    g.add(y, shift)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small(layers: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let config = EncoderConfig {
            num_layers: layers,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_positions: 32,
            vocab_size: 20,
            dropout_rate: 0.0,
        };
        let enc = Encoder::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, enc)
    }

    #[test]
    fn heads_must_divide_dim() {
        let config = EncoderConfig {
            hidden_dim: 10,
            num_heads: 4,
            ..EncoderConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn empty_prompt_single_token() {
        let (store, enc) = small(1);
        let mut g = Graph::new(&store);
        let e = enc.embed_sequence(&mut g, None, &[5]).unwrap();
        let tok = store.tensor(enc.token_embedding()).row(5);
        let pos = store.tensor(enc.position_embedding()).row(0);
        let expected: Vec<f32> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(e).data(), expected.as_slice());
    }

    #[test]
    fn prompt_rows_precede_tokens() {
        let (store, enc) = small(1);
        let mut g = Graph::new(&store);
        let prompt = truncated_normal(&[6, 8], 0.02, &mut ChaCha8Rng::seed_from_u64(4));
        let p = g.input(prompt.clone());
        let e = enc
            .embed_sequence(&mut g, Some(p), &[3, 4, 5, 6, 7])
            .unwrap();
        let out = g.value(e);
        assert_eq!(out.rows(), 11);
        let pos3 = store.tensor(enc.position_embedding()).row(3);
        let expected: Vec<f32> = prompt.row(3).iter().zip(pos3).map(|(a, b)| a + b).collect();
        assert_eq!(out.row(3), expected.as_slice());
        let tok = store.tensor(enc.token_embedding()).row(4);
        let pos7 = store.tensor(enc.position_embedding()).row(7);
        let expected: Vec<f32> = tok.iter().zip(pos7).map(|(a, b)| a + b).collect();
        assert_eq!(out.row(7), expected.as_slice());
    }

    #[test]
    fn length_overflow_names_limit() {
        let (store, enc) = small(1);
        let mut g = Graph::new(&store);
        let ids = vec![3; 40];
        let err = enc.embed_sequence(&mut g, None, &ids).unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
    }

    #[test]
    fn zero_layers_is_identity() {
        let (store, enc) = small(0);
        let mut g = Graph::new(&store);
        let b = enc.embed_batch(&mut g, None, &[vec![3, 4, 5]]).unwrap();
        let h = enc.encode(&mut g, b.embedded, &b.layout, None).unwrap();
        assert_eq!(g.value(h), g.value(b.embedded));
    }

    #[test]
    fn counter_increments_once_per_encode() {
        let (store, enc) = small(2);
        let mut g = Graph::new(&store);
        let b = enc
            .embed_batch(&mut g, None, &[vec![3, 4], vec![5]])
            .unwrap();
        enc.encode(&mut g, b.embedded, &b.layout, None).unwrap();
        assert_eq!(enc.forward_passes(), 1);
        enc.encode(&mut g, b.embedded, &b.layout, None).unwrap();
        assert_eq!(enc.forward_passes(), 2);
    }

    #[test]
    fn padding_does_not_touch_valid_positions() {
        let (store, enc) = small(2);
        let mut g = Graph::new(&store);
        let short = enc.embed_batch(&mut g, None, &[vec![3, 4, 5]]).unwrap();
        let h1 = enc
            .encode(&mut g, short.embedded, &short.layout, None)
            .unwrap();
        let padded = enc
            .embed_batch(&mut g, None, &[vec![3, 4, 5], vec![6, 7, 8, 9, 10, 11]])
            .unwrap();
        let h2 = enc
            .encode(&mut g, padded.embedded, &padded.layout, None)
            .unwrap();
        for r in 0..3 {
            for (a, b) in g.value(h1).row(r).iter().zip(g.value(h2).row(r)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn mask_length_mismatch_fails() {
        let (store, enc) = small(1);
        let mut g = Graph::new(&store);
        let b = enc.embed_batch(&mut g, None, &[vec![3, 4]]).unwrap();
        let mut layout = b.layout.clone();
        layout.valid = Arc::new(vec![true; 3]);
        assert!(enc.encode(&mut g, b.embedded, &layout, None).is_err());
    }
}
