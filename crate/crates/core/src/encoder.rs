//! Small pre-LN transformer over packed sequences.

use std::sync::Arc;

use hgere_autodiff::{Activation, Graph, Linear, ParamId, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{build_attention_mask, Item, PackedSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            vocab_size: 4096,
            max_positions: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("vocab_size and max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn token_id(token: &str, vocab_size: usize) -> usize {
    (fnv1a(token) % vocab_size as u64) as usize
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(ps: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[d]))?,
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>> {
        Ok(x.layer_norm(&g.param(self.gamma), &g.param(self.beta), 1e-5)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct MiniTransformer {
    pub config: EncoderConfig,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
}

impl MiniTransformer {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tokens = ps.add_uniform(
            format!("{name}.tokens"),
            &[config.vocab_size + 4, d],
            d,
            rng,
        )?;
        let positions =
            ps.add_uniform(format!("{name}.positions"), &[config.max_positions, d], d, rng)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("{name}.layer{l}");
            blocks.push(Block {
                ln1: Norm::new(ps, &format!("{p}.ln1"), d)?,
                wq: Linear::new(ps, &format!("{p}.wq"), d, d, rng)?,
                wk: Linear::new(ps, &format!("{p}.wk"), d, d, rng)?,
                wv: Linear::new(ps, &format!("{p}.wv"), d, d, rng)?,
                wo: Linear::new(ps, &format!("{p}.wo"), d, d, rng)?,
                ln2: Norm::new(ps, &format!("{p}.ln2"), d)?,
                ff1: Linear::new(ps, &format!("{p}.ff1"), d, config.d_ff, rng)?
                    .with_activation(Activation::Gelu),
                ff2: Linear::new(ps, &format!("{p}.ff2"), config.d_ff, d, rng)?,
            });
        }
        let final_norm = Norm::new(ps, &format!("{name}.ln_final"), d)?;
        Ok(Self {
            config: config.clone(),
            tokens,
            positions,
            blocks,
            final_norm,
        })
    }

    fn input_ids(&self, tokens: &[String], seq: &PackedSequence) -> Result<Vec<usize>> {
        let v = self.config.vocab_size;
        seq.items
            .iter()
            .map(|item| match item {
                Item::Text(p) => tokens
                    .get(*p)
                    .map(|t| token_id(t, v))
                    .ok_or_else(|| Error::Config(format!("text position {p} outside window"))),
                Item::SolidOpen => Ok(v),
                Item::SolidClose => Ok(v + 1),
                Item::LevOpen(_) => Ok(v + 2),
                Item::LevClose(_) => Ok(v + 3),
            })
            .collect()
    }

    /// Hidden states `[len, d_model]` for every item of `seq`.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        tokens: &[String],
        seq: &PackedSequence,
    ) -> Result<Var<'g>> {
        let n = seq.len();
        if let Some(&p) = seq.position_ids.iter().max() {
            if p >= self.config.max_positions {
                return Err(Error::Config(format!(
                    "sequence position {p} exceeds the position table ({})",
                    self.config.max_positions
                )));
            }
        }
        let ids = self.input_ids(tokens, seq)?;
        let mask = Arc::new(build_attention_mask(seq).data);
        let mut x = g
            .param(self.tokens)
            .gather_rows(&ids)?
            .add(&g.param(self.positions).gather_rows(&seq.position_ids)?)?;
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let h = b.ln1.forward(g, &x)?;
            let q = b.wq.forward(g, &h)?;
            let k = b.wk.forward(g, &h)?;
            let v = b.wv.forward(g, &h)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        q.slice_cols(hd * dh, dh)?,
                        k.slice_cols(hd * dh, dh)?,
                        v.slice_cols(hd * dh, dh)?,
                    )
                };
                let p = qh
                    .matmul(&kh.transpose()?)?
                    .scale(scale)?
                    .masked_softmax(mask.clone())?;
                outs.push(p.matmul(&vh)?);
            }
            let o = g.concat(&outs)?;
            x = x.add(&b.wo.forward(g, &o)?)?;
            let h2 = b.ln2.forward(g, &x)?;
            x = x.add(&b.ff2.forward(g, &b.ff1.forward(g, &h2)?)?)?;
        }
        debug_assert_eq!(x.shape(), vec![n, d]);
        self.final_norm.forward(g, &x)
    }
}

/// Source of hidden states: a trainable transformer or frozen precomputed vectors.
#[derive(Debug, Clone)]
pub enum Encoder {
    Transformer(MiniTransformer),
    Store(Arc<crate::store::EmbeddingStore>),
}

impl Encoder {
    pub fn d_model(&self) -> usize {
        match self {
            Encoder::Transformer(t) => t.config.d_model,
            Encoder::Store(s) => s.d(),
        }
    }

    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        tokens: &[String],
        seq: &PackedSequence,
        key: &crate::store::StoreKey,
    ) -> Result<Var<'g>> {
        match self {
            Encoder::Transformer(t) => t.encode(g, tokens, seq),
            Encoder::Store(s) => s.states(g, key, seq),
        }
    }
}
