//! Decoder-only transformer with rotary attention and tied embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bindings, Linear, ParamId, ParamStore};
use crate::tokens::{Embedder, Origin, TokenSequence};

pub mod checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            vocab: 64,
            ffn_mult: 4,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("dim", self.dim),
            ("vocab", self.vocab),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model {name} must be at least 1")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "head dim {} must be even for rotary attention",
                self.head_dim()
            )));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return Err(Error::config(format!("rope base {} must exceed 1", self.rope_base)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Whether a forward pass may record gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Outputs are constants on the tape.
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelOutput {
    /// Final normalised states, `[L, D]`.
    pub hidden: Var,
    /// `[L, vocab]`.
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
}

impl Model {
    /// Registers every weight in `store`.
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let std = 1.0 / (d as f64).sqrt();
        let embed = store.normal("embed", vec![config.vocab, d], std, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("layer{l}.{s}");
                Block {
                    attn_norm: store.ones(p("attn_norm"), vec![d]),
                    wq: store.normal(p("wq"), vec![d, d], std, rng),
                    wk: store.normal(p("wk"), vec![d, d], std, rng),
                    wv: store.normal(p("wv"), vec![d, d], std, rng),
                    wo: store.normal(p("wo"), vec![d, d], std, rng),
                    ffn_norm: store.ones(p("ffn_norm"), vec![d]),
                    ffn_in: Linear::new(store, &p("ffn_in"), d, d * config.ffn_mult, rng),
                    ffn_out: Linear::new(store, &p("ffn_out"), d * config.ffn_mult, d, rng),
                }
            })
            .collect();
        let final_norm = store.ones("final_norm", vec![d]);
        Ok(Self {
            config,
            embed,
            blocks,
            final_norm,
        })
    }

    pub fn embedder(&self) -> Embedder {
        Embedder {
            table: self.embed,
            vocab: self.config.vocab,
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Bindings,
        seq: &TokenSequence,
        mode: Mode,
    ) -> Result<ModelOutput> {
        self.run(tape, params, &seq.positions, seq.embeddings, mode, None)
    }

    /// Forward pass that also returns the scaled pre-softmax attention scores
    /// of every layer and head, layer-major.
    pub fn forward_traced<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Bindings,
        seq: &TokenSequence,
        mode: Mode,
    ) -> Result<(ModelOutput, Vec<Var>)> {
        let mut scores = Vec::new();
        let out = self.run(tape, params, &seq.positions, seq.embeddings, mode, Some(&mut scores))?;
        Ok((out, scores))
    }

    fn run<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Bindings,
        positions: &[usize],
        x: Var,
        mode: Mode,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<ModelOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.dim {
            return Err(Error::config(format!(
                "model expects width {}, input has shape {shape:?}",
                self.config.dim
            )));
        }
        if positions.len() != shape[0] {
            return Err(Error::contract(format!(
                "{} position ids for {} rows",
                positions.len(),
                shape[0]
            )));
        }
        let previous = tape.set_grad_enabled(mode == Mode::Train && tape.grad_enabled());
        let result = (|| {
            let mut h = x;
            for block in &self.blocks {
                h = self.block(tape, params, block, positions, h, trace.as_deref_mut())?;
            }
            let hidden = tape.rmsnorm(h, params.var(self.final_norm))?;
            let logits = tape.matmul_t(hidden, params.var(self.embed))?;
            Ok(ModelOutput { hidden, logits })
        })();
        tape.set_grad_enabled(previous);
        result
    }

    fn block<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Bindings,
        b: &Block,
        positions: &[usize],
        x: Var,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let n = tape.rmsnorm(x, p.var(b.attn_norm))?;
        let attn = self.attention(tape, p, b, positions, n, trace)?;
        let x = tape.add(x, attn)?;
        let n = tape.rmsnorm(x, p.var(b.ffn_norm))?;
        let up = b.ffn_in.apply(tape, p, n)?;
        let act = tape.gelu(up);
        let down = b.ffn_out.apply(tape, p, act)?;
        tape.add(x, down)
    }

    fn attention<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Bindings,
        b: &Block,
        positions: &[usize],
        x: Var,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let hd = self.config.head_dim();
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let q = tape.matmul(x, p.var(b.wq))?;
        let k = tape.matmul(x, p.var(b.wk))?;
        let v = tape.matmul(x, p.var(b.wv))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let qh = tape.rope(qh, positions, self.config.rope_base)?;
            let kh = tape.rope(kh, positions, self.config.rope_base)?;
            let raw = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(raw, scale);
            if let Some(t) = trace.as_deref_mut() {
                t.push(scores);
            }
            let weights = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        tape.matmul(joined, p.var(b.wo))
    }
}

/// Next-token targets for the answer tokens: row `r` predicts the token at
/// row `r + 1` whenever that row is part of the answer.
pub fn answer_targets(seq: &TokenSequence) -> (Vec<usize>, Vec<bool>) {
    let len = seq.len();
    let mut targets = vec![0; len];
    let mut active = vec![false; len];
    for r in 0..len.saturating_sub(1) {
        if let Origin::Text(n) = seq.origins[r + 1] {
            if seq.answer.contains(&n) {
                targets[r] = seq.text_ids[n];
                active[r] = true;
            }
        }
    }
    (targets, active)
}

/// Cross-entropy of next-token prediction over the answer tokens only.
pub fn decoder_loss<F: Real>(tape: &mut Tape<F>, out: &ModelOutput, seq: &TokenSequence) -> Result<Var> {
    let (targets, active) = answer_targets(seq);
    if !active.iter().any(|&a| a) {
        return Err(Error::contract("decoder loss needs a non-empty answer span"));
    }
    tape.cross_entropy(out.logits, &targets, &active)
}

#[cfg(test)]
mod tests;
