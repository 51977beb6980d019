//! Small pre-norm transformer encoder with learned positions and `[CLS]` pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{Graph, Mode, NodeId, ParamId, ParamStore, Tensor, TensorError};
use crate::serialize::TokenSequence;

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Default sizes for a given vocabulary and sequence length.
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            max_len,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn_dim == 0 || self.n_layers == 0 {
            return bad("vocab_size, max_len, ffn_dim and n_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    /// Xavier-normal weights, zero bias.
    pub fn register<R: Rng>(params: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (inp + out) as f64).sqrt();
        Self {
            w: params.add(format!("{name}.w"), Tensor::randn(&[inp, out], std, rng)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[1, out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn register(params: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Tensor::filled(&[1, d], 1.0)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    norm_attn: Norm,
    query: Dense,
    key: Dense,
    value: Dense,
    out: Dense,
    norm_ffn: Norm,
    ffn_in: Dense,
    ffn_out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEncoder {
    pub config: EncoderConfig,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
}

const EMBEDDING_STD: f64 = 0.1;

impl FlowEncoder {
    pub fn register<R: Rng>(params: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let tokens = params.add(
            format!("{prefix}.tokens"),
            Tensor::randn(&[config.vocab_size, d], EMBEDDING_STD, rng),
        );
        let positions = params.add(
            format!("{prefix}.positions"),
            Tensor::randn(&[config.max_len, d], EMBEDDING_STD, rng),
        );
        let blocks = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.layer{l}.{s}");
                Block {
                    norm_attn: Norm::register(params, &n("norm_attn"), d),
                    query: Dense::register(params, &n("query"), d, d, rng),
                    key: Dense::register(params, &n("key"), d, d, rng),
                    value: Dense::register(params, &n("value"), d, d, rng),
                    out: Dense::register(params, &n("attn_out"), d, d, rng),
                    norm_ffn: Norm::register(params, &n("norm_ffn"), d),
                    ffn_in: Dense::register(params, &n("ffn_in"), d, config.ffn_dim, rng),
                    ffn_out: Dense::register(params, &n("ffn_out"), config.ffn_dim, d, rng),
                }
            })
            .collect();
        let final_norm = Norm::register(params, &format!("{prefix}.final_norm"), d);
        Ok(Self {
            config,
            tokens,
            positions,
            blocks,
            final_norm,
        })
    }

    /// Final-layer `[CLS]` state as a `[1, d_model]` node.
    ///
    /// `ids` must be the unpadded part of a sequence. Attention only spans these
    /// positions, which is exactly a padding mask. The last block only computes
    /// the `[CLS]` row, since no other position reaches the output.
    pub fn forward(&self, g: &mut Graph, ids: &[u32]) -> Result<NodeId, ModelError> {
        let len = ids.len();
        if len == 0 {
            return Err(ModelError::EmptySequence);
        }
        if len > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max_len: self.config.max_len,
            });
        }
        let p = self.config.dropout;
        let tok_table = g.param(self.tokens);
        let tok = g.embedding(tok_table, ids)?;
        let pos_table = g.param(self.positions);
        let positions: Vec<u32> = (0..len as u32).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        x = g.dropout(x, p)?;

        let last = self.blocks.len() - 1;
        for (l, block) in self.blocks.iter().enumerate() {
            x = self.block(g, block, x, l == last)?;
        }
        Ok(self.final_norm.forward(g, x)?)
    }

    fn block(&self, g: &mut Graph, b: &Block, x: NodeId, cls_only: bool) -> Result<NodeId, TensorError> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let p = self.config.dropout;

        let h = b.norm_attn.forward(g, x)?;
        let (h_query, residual) = if cls_only {
            (g.rows(h, &[0])?, g.rows(x, &[0])?)
        } else {
            (h, x)
        };
        let q = b.query.forward(g, h_query)?;
        let k = b.key.forward(g, h)?;
        let v = b.value.forward(g, h)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let attn_out = b.out.forward(g, joined)?;
        let attn_out = g.dropout(attn_out, p)?;
        let x = g.add(residual, attn_out)?;

        let h = b.norm_ffn.forward(g, x)?;
        let f = b.ffn_in.forward(g, h)?;
        let f = g.relu(f)?;
        let f = b.ffn_out.forward(g, f)?;
        let f = g.dropout(f, p)?;
        g.add(x, f)
    }

    /// Eval-mode `[CLS]` embedding of a serialized conversation.
    pub fn encode(&self, params: &ParamStore, seq: &TokenSequence) -> Result<Vec<f64>, ModelError> {
        if seq.ids.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: seq.ids.len(),
                max_len: self.config.max_len,
            });
        }
        let mut g = Graph::new(params, Mode::Eval);
        let cls = self.forward(&mut g, seq.active())?;
        Ok(g.value(cls).data().to_vec())
    }
}
