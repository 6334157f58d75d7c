//! Sequence encoder: tied item embeddings plus learned positions, a stack
//! of Post-LN or LiGR transformer blocks, and dot-product scoring against
//! the item catalog.

mod config;
mod params;

pub use config::{ArchConfig, AttentionMode, BlockStyle, GateMode};
pub use params::{ModelParams, Vocab};

use params::{Attention, Block, FeedForward, Linear, Norm};

use crate::error::{contract_err, Error, Result};
use crate::rng::{derive_seed, tag};
use crate::tensor::{kernels, Float, Graph, Tensor, Var};

/// Left-padded token sequences, `batch × len`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    /// Keeps the most recent `len` tokens of each sequence and left-pads
    /// shorter ones with [`Vocab::PAD`].
    pub fn left_padded(seqs: &[Vec<usize>], len: usize) -> Self {
        let mut tokens = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let tail = &s[s.len().saturating_sub(len)..];
            tokens.extend(std::iter::repeat_n(Vocab::PAD, len - tail.len()));
            tokens.extend_from_slice(tail);
        }
        Self {
            tokens,
            batch: seqs.len(),
            len,
        }
    }

    pub fn padding(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t == Vocab::PAD).collect()
    }

    /// Flat row index of `(sequence, position)` in `batch*len`-row tensors.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.len + pos
    }
}

/// Encoder output: hidden states `[batch*len, d]` and the padding mask.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: Var,
    pub padding: Vec<bool>,
}

/// Model parameters bound to a graph for one forward pass.
pub struct Encoder<'p, F: Float> {
    params: &'p ModelParams<F>,
    vars: Vec<Var>,
    dropout_seed: u64,
}

impl<'p, F: Float> Encoder<'p, F> {
    /// Registers every parameter tensor as a trainable leaf of `g`. The
    /// dropout seed should already mix the run seed with the step.
    pub fn bind(g: &mut Graph<F>, params: &'p ModelParams<F>, dropout_seed: u64) -> Self {
        let vars = params.tensors().iter().map(|t| g.param(t.clone())).collect();
        Self {
            params,
            vars,
            dropout_seed,
        }
    }

    pub fn params(&self) -> &ModelParams<F> {
        self.params
    }

    /// Graph leaves in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn cfg(&self) -> &ArchConfig {
        self.params.config()
    }

    fn dropout(&self, g: &mut Graph<F>, x: Var, site: u64) -> Result<Var> {
        let seed = derive_seed(self.dropout_seed, &[tag::DROPOUT, site]);
        g.dropout(x, self.cfg().dropout_rate, seed)
    }

    fn linear(&self, g: &mut Graph<F>, x: Var, lin: Linear) -> Result<Var> {
        let y = g.matmul(x, self.vars[lin.weight])?;
        match lin.bias {
            Some(b) => g.add(y, self.vars[b]),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph<F>, x: Var, n: Norm) -> Result<Var> {
        let eps = F::of(self.cfg().layer_norm_eps);
        g.layer_norm(x, self.vars[n.gain], self.vars[n.bias], eps)
    }

    /// `E[tokens] + P[positions]`, followed by dropout: `[batch*len, d]`.
    pub fn embed(&self, g: &mut Graph<F>, batch: &SeqBatch) -> Result<Var> {
        let cfg = self.cfg();
        if batch.len > cfg.max_len {
            return contract_err(format!(
                "sequence length {} exceeds max_len {}",
                batch.len, cfg.max_len
            ));
        }
        let vocab = self.params.vocab().size();
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "item token",
                index: bad,
                size: vocab,
            });
        }
        let layout = &self.params.layout;
        let items = g.gather_rows(self.vars[layout.item_emb], &batch.tokens, Some(Vocab::PAD))?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let pos = g.gather_rows(self.vars[layout.pos_emb], &positions, None)?;
        let h = g.add(items, pos)?;
        self.dropout(g, h, 0)
    }

    /// Additive attention mask `[batch, len, len]`: keys at padded positions
    /// are blocked, and so are future keys in causal mode.
    pub fn attention_mask(&self, batch: &SeqBatch) -> Tensor<F> {
        let causal = self.cfg().attention == AttentionMode::Causal;
        let pad = batch.padding();
        let l = batch.len;
        Tensor::from_fn(&[batch.batch, l, l], |idx| {
            let (b, i, j) = (idx / (l * l), (idx / l) % l, idx % l);
            if pad[b * l + j] || (causal && j > i) {
                kernels::mask_sentinel()
            } else {
                F::zero()
            }
        })
    }

    fn attention(&self, g: &mut Graph<F>, x: Var, a: &Attention, mask: &Tensor<F>, batch: &SeqBatch) -> Result<Var> {
        let cfg = self.cfg();
        let (b, l, h, dh) = (batch.batch, batch.len, cfg.n_heads, cfg.head_dim());
        let heads = |g: &mut Graph<F>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, l, h, dh])?;
            let v = g.permute(v, &[2, 0, 1, 3])?;
            g.reshape(v, &[h * b, l, dh])
        };
        let q = self.linear(g, x, a.q)?;
        let q = heads(g, q)?;
        let k = self.linear(g, x, a.k)?;
        let k = heads(g, k)?;
        let v = self.linear(g, x, a.v)?;
        let v = heads(g, v)?;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, F::of(1.0 / (dh as f64).sqrt()));
        let scores = g.reshape(scores, &[h, b, l, l])?;
        let probs = g.softmax_rows(scores, Some(mask))?;
        let probs = g.reshape(probs, &[h * b, l, l])?;
        let out = g.bmm(probs, v)?;
        let out = g.reshape(out, &[h, b, l, dh])?;
        let out = g.permute(out, &[1, 2, 0, 3])?;
        let out = g.reshape(out, &[b * l, cfg.emb_dim])?;
        self.linear(g, out, a.o)
    }

    fn feed_forward(&self, g: &mut Graph<F>, x: Var, ffn: &FeedForward) -> Result<Var> {
        match *ffn {
            FeedForward::Relu { inner, outer } => {
                let h = self.linear(g, x, inner)?;
                let h = g.relu(h);
                self.linear(g, h, outer)
            }
            FeedForward::SwiGlu { gate, up, down } => {
                let a = self.linear(g, x, gate)?;
                let a = g.swish(a);
                let b = self.linear(g, x, up)?;
                let h = g.mul(a, b)?;
                self.linear(g, h, down)
            }
        }
    }

    /// One transformer block over `h: [batch*len, d]`.
    pub fn block_forward(&self, g: &mut Graph<F>, index: usize, h: Var, mask: &Tensor<F>, batch: &SeqBatch) -> Result<Var> {
        let block: &Block = &self.params.layout.blocks[index];
        let site = 1 + 2 * index as u64;
        match block.gates {
            None => {
                let a = self.attention(g, h, &block.attn, mask, batch)?;
                let a = self.dropout(g, a, site)?;
                let r = g.add(h, a)?;
                let h1 = self.norm(g, r, block.norm1)?;
                let f = self.feed_forward(g, h1, &block.ffn)?;
                let f = self.dropout(g, f, site + 1)?;
                let r = g.add(h1, f)?;
                self.norm(g, r, block.norm2)
            }
            Some((gate_attn, gate_ffn)) => {
                let n = self.norm(g, h, block.norm1)?;
                let a = self.attention(g, n, &block.attn, mask, batch)?;
                let a = self.dropout(g, a, site)?;
                let s = self.linear(g, h, gate_attn)?;
                let s = g.sigmoid(s);
                let a = g.mul(a, s)?;
                let h1 = g.add(h, a)?;

                let n = self.norm(g, h1, block.norm2)?;
                let f = self.feed_forward(g, n, &block.ffn)?;
                let f = self.dropout(g, f, site + 1)?;
                let s = self.linear(g, h1, gate_ffn)?;
                let s = g.sigmoid(s);
                let f = g.mul(f, s)?;
                g.add(h1, f)
            }
        }
    }

    /// Embedding, all blocks, and the optional final LayerNorm.
    pub fn encode(&self, g: &mut Graph<F>, batch: &SeqBatch) -> Result<Encoded> {
        let mut h = self.embed(g, batch)?;
        let mask = self.attention_mask(batch);
        for j in 0..self.params.layout.blocks.len() {
            h = self.block_forward(g, j, h, &mask, batch)?;
        }
        if let Some(n) = self.params.layout.final_norm {
            h = self.norm(g, h, n)?;
        }
        Ok(Encoded {
            hidden: h,
            padding: batch.padding(),
        })
    }

    /// Embedding rows for catalog items: `[items.len(), d]`.
    pub fn item_rows(&self, g: &mut Graph<F>, items: &[u32]) -> Result<Var> {
        let tokens = item_tokens(self.params.vocab(), items)?;
        g.gather_rows(self.vars[self.params.layout.item_emb], &tokens, Some(Vocab::PAD))
    }
}

fn item_tokens(vocab: Vocab, items: &[u32]) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|&i| {
            if (i as usize) < vocab.n_items {
                Ok(vocab.token(i))
            } else {
                contract_err(format!(
                    "item {i} is not a catalog item (catalog size {}); padding and mask rows cannot be scored",
                    vocab.n_items
                ))
            }
        })
        .collect()
}

/// Logits of every catalog item for each hidden row: `[rows, n_items]`.
pub fn score_full<F: Float>(params: &ModelParams<F>, hidden: &Tensor<F>) -> Result<Tensor<F>> {
    let d = params.config().emb_dim;
    let n = params.vocab().n_items;
    let table = params.item_embeddings();
    let catalog = Tensor::new(vec![n, d], table.data()[d..(n + 1) * d].to_vec())?;
    kernels::matmul(hidden, &catalog, true)
}

/// Logits of selected items per hidden row.
pub fn score_gathered<F: Float>(params: &ModelParams<F>, hidden: &Tensor<F>, items: &[Vec<u32>]) -> Result<Vec<Vec<F>>> {
    if items.len() != hidden.rows() {
        return contract_err("one item list per hidden row required");
    }
    let table = params.item_embeddings();
    items
        .iter()
        .enumerate()
        .map(|(r, ids)| {
            let h = hidden.row(r);
            item_tokens(params.vocab(), ids)?
                .into_iter()
                .map(|t| Ok(h.iter().zip(table.row(t)).map(|(&a, &b)| a * b).sum()))
                .collect()
        })
        .collect()
}

/// Hidden state at the last position of each sequence, in inference mode:
/// `[batch, d]`.
pub fn encode_last<F: Float>(params: &ModelParams<F>, seqs: &[Vec<usize>]) -> Result<Tensor<F>> {
    let len = params.config().max_len;
    let batch = SeqBatch::left_padded(seqs, len);
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, params, 0);
    let out = enc.encode(&mut g, &batch)?;
    let rows: Vec<usize> = (0..batch.batch).map(|b| batch.row(b, len - 1)).collect();
    kernels::gather_rows(g.value(out.hidden), &rows)
}

#[cfg(test)]
mod tests;
