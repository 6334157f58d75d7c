use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ArchConfig, BlockStyle, GateMode};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
use crate::tensor::{io, Float, Tensor};

/// Token space of the item embedding table: row 0 is padding, rows
/// `1..=n_items` are catalog items, and an optional final row is the MLM
/// mask token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_items: usize,
    pub with_mask: bool,
}

impl Vocab {
    pub const PAD: usize = 0;

    pub fn new(n_items: usize, with_mask: bool) -> Self {
        Self { n_items, with_mask }
    }

    pub fn token(&self, item: u32) -> usize {
        item as usize + 1
    }

    /// Catalog item behind a token, if it is one.
    pub fn item(&self, token: usize) -> Option<u32> {
        (1..=self.n_items).contains(&token).then(|| (token - 1) as u32)
    }

    pub fn mask(&self) -> Option<usize> {
        self.with_mask.then_some(self.n_items + 1)
    }

    pub fn size(&self) -> usize {
        self.n_items + 1 + usize::from(self.with_mask)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum FeedForward {
    Relu { inner: Linear, outer: Linear },
    SwiGlu { gate: Linear, up: Linear, down: Linear },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
    /// Residual gates (LiGR only).
    pub gates: Option<(Linear, Linear)>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub item_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<Block>,
    pub final_norm: Option<Norm>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Embedding,
    Xavier,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.push(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        Linear {
            weight: self.push(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Xavier),
            bias: bias.then(|| self.push(format!("{prefix}.bias"), vec![fan_out], Init::Zeros)),
        }
    }
}

fn build_layout(cfg: &ArchConfig, vocab: &Vocab) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.emb_dim;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let item_emb = b.push("item_emb".into(), vec![vocab.size(), d], Init::Embedding);
    let pos_emb = b.push("pos_emb".into(), vec![cfg.max_len, d], Init::Embedding);
    let blocks = (0..cfg.n_blocks)
        .map(|j| {
            let p = format!("blocks.{j}");
            let norm1 = b.norm(&format!("{p}.norm1"), d);
            let attn = Attention {
                q: b.linear(&format!("{p}.attn.q"), d, d, true),
                k: b.linear(&format!("{p}.attn.k"), d, d, true),
                v: b.linear(&format!("{p}.attn.v"), d, d, true),
                o: b.linear(&format!("{p}.attn.o"), d, d, true),
            };
            let norm2 = b.norm(&format!("{p}.norm2"), d);
            let (ffn, gates) = match cfg.block_style {
                BlockStyle::PostlnSasrec => (
                    FeedForward::Relu {
                        inner: b.linear(&format!("{p}.ffn.inner"), d, d, true),
                        outer: b.linear(&format!("{p}.ffn.outer"), d, d, true),
                    },
                    None,
                ),
                BlockStyle::Ligr => {
                    let inner = cfg.ff_emb_mult * d;
                    let ffn = FeedForward::SwiGlu {
                        gate: b.linear(&format!("{p}.ffn.gate"), d, inner, false),
                        up: b.linear(&format!("{p}.ffn.up"), d, inner, false),
                        down: b.linear(&format!("{p}.ffn.down"), inner, d, false),
                    };
                    let width = match cfg.gate {
                        GateMode::PerToken => 1,
                        GateMode::PerChannel => d,
                    };
                    let gates = (
                        b.linear(&format!("{p}.gate_attn"), d, width, cfg.gate_bias),
                        b.linear(&format!("{p}.gate_ffn"), d, width, cfg.gate_bias),
                    );
                    (ffn, Some(gates))
                }
            };
            Block {
                norm1,
                attn,
                norm2,
                ffn,
                gates,
            }
        })
        .collect();
    let final_norm = cfg.final_norm.then(|| b.norm("final_norm", d));
    (
        Layout {
            item_emb,
            pos_emb,
            blocks,
            final_norm,
        },
        b.specs,
    )
}

/// Learnable arrays of a sequence encoder, stored in a fixed order with
/// stable names.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Float = f32> {
    config: ArchConfig,
    vocab: Vocab,
    pub(crate) layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ArchConfig,
    vocab: Vocab,
    #[serde(default)]
    extra: serde_json::Value,
}

impl<F: Float> ModelParams<F> {
    /// Random initialization: normal(0, 1/√d) embeddings with a zero padding
    /// row, Xavier-uniform projections, unit norm gains, zero biases.
    pub fn init(config: &ArchConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config, &vocab);
        let mut rng = rng_for(seed, &[tag::INIT]);
        let emb = Normal::new(0.0, 1.0 / (config.emb_dim as f64).sqrt()).expect("valid std");
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, F::one()),
                Init::Embedding => Tensor::from_fn(&shape, |_| F::of(emb.sample(&mut rng))),
                Init::Xavier => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| F::of(rng.random_range(-bound..bound)))
                }
            };
            names.push(name);
            tensors.push(t);
        }
        let mut p = Self {
            config: config.clone(),
            vocab,
            layout,
            names,
            tensors,
        };
        let d = config.emb_dim;
        p.tensors[p.layout.item_emb].data_mut()[..d].fill(F::zero());
        Ok(p)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// The tied item embedding table (padding row included).
    pub fn item_embeddings(&self) -> &Tensor<F> {
        &self.tensors[self.layout.item_emb]
    }

    pub fn item_embeddings_mut(&mut self) -> &mut Tensor<F> {
        let i = self.layout.item_emb;
        &mut self.tensors[i]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            vocab: self.vocab,
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Writes the tensors plus the architecture and vocabulary as header
    /// metadata; `extra` is stored verbatim.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let named: Vec<(String, Tensor<f32>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(Tensor::cast))
            .collect();
        let meta = CheckpointMeta {
            arch: self.config.clone(),
            vocab: self.vocab,
            extra,
        };
        io::write_tensors(path, &named, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (named, meta) = io::read_tensors(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        let mut p = Self::init(&meta.arch, meta.vocab, 0)?;
        let by_name: HashMap<String, Tensor<f32>> = named.into_iter().collect();
        for (name, slot) in p.names.iter().zip(p.tensors.iter_mut()) {
            let t = by_name.get(name).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("missing tensor {name}"),
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    message: format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t.cast();
        }
        if by_name.len() != p.names.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: "checkpoint has unexpected extra tensors".into(),
            });
        }
        Ok((p, meta.extra))
    }
}
