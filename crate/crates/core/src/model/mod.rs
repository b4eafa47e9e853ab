//! A small pre-norm GPT-2 decoder with a pluggable attention block.

mod checkpoint;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{AdamW, AdamWConfig};

use crate::attention::{self, AttentionSpec, AttentionVars, AttentionWeights, Variant};
use crate::data::{PAD_ID, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::profiler::StepMetrics;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attention: AttentionSpec,
    pub seed: u64,
}

impl ModelConfig {
    /// Laptop-sized profile: 2 layers, width 128, 8 heads, 128 tokens.
    pub fn desk(variant: Variant) -> Self {
        Self::with_shape(variant, 2, 128, 8, 512, 128)
    }

    /// GPT-2 small: 12 layers, width 768, 12 heads, 512 tokens.
    pub fn paper(variant: Variant) -> Self {
        Self::with_shape(variant, 12, 768, 12, 3072, 512)
    }

    /// Defaults for the variant-specific attention fields: half the KV heads
    /// for gqa and a latent of half the model width for mla.
    pub fn with_shape(variant: Variant, n_layers: usize, d_model: usize, n_heads: usize, d_ff: usize, max_seq_len: usize) -> Self {
        let mut attention = AttentionSpec::new(variant, n_heads, d_model / n_heads.max(1));
        attention.n_kv_heads = (n_heads / 2).max(1);
        attention.latent_dim = (d_model / 2).max(1);
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            vocab_size: VOCAB_SIZE,
            max_seq_len,
            attention,
            seed: 0,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            attention: self.attention.with_variant(variant),
            ..self.clone()
        }
    }

    pub fn variant(&self) -> Variant {
        self.attention.variant
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.attention.n_heads != self.n_heads || self.attention.d_model() != self.d_model {
            return fail(format!(
                "d_model ({}) must equal n_heads ({}) × head_dim ({})",
                self.d_model, self.attention.n_heads, self.attention.head_dim
            ));
        }
        if self.d_ff < self.d_model {
            return fail(format!("d_ff ({}) must be at least d_model ({})", self.d_ff, self.d_model));
        }
        self.attention.validate()
    }

    /// Closed-form parameter count, with `V` vocab, `S` positions, `L` layers,
    /// `d` width, `f` MLP width and `A` attention parameters per layer:
    /// `V·d + S·d + L·(4d + A + 2·d·f + f + d) + 2d`.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let per_layer = 4 * d + self.attention.param_count() + 2 * d * f + f + d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }

    /// Model size at four bytes per parameter.
    pub fn size_bytes(&self) -> usize {
        4 * self.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub attn: AttentionWeights<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

/// Model parameters. The output head reuses `wte`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub wte: Tensor<T>,
    pub wpe: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f_gain: Tensor<T>,
    pub ln_f_bias: Tensor<T>,
}

struct BlockVars {
    ln1: (Var, Var),
    attn: AttentionVars,
    ln2: (Var, Var),
    fc: (Var, Var),
    proj: (Var, Var),
}

/// A model recorded on a tape; `params` follows [`ModelState::params`] order.
pub struct ModelVars {
    wte: Var,
    wpe: Var,
    blocks: Vec<BlockVars>,
    ln_f: (Var, Var),
    pub params: Vec<Var>,
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::full(&[n], T::one()).with_grad()
}

fn zeros<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[n]).with_grad()
}

/// Draws every weight from `Normal(0, 0.02)` with its own named stream;
/// biases start at zero and layernorm gains at one.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ModelState<T>> {
    config.validate()?;
    let (d, f, seed) = (config.d_model, config.d_ff, config.seed);
    let w = |name: &str, shape: &[usize]| -> Tensor<T> { rng::normal(seed, name, shape, attention::INIT_STD).with_grad() };
    let blocks = (0..config.n_layers)
        .map(|i| {
            Ok(Block {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                attn: AttentionWeights::init(&config.attention, seed, &format!("blocks.{i}.attn"))?,
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                fc_w: w(&format!("blocks.{i}.fc_w"), &[d, f]),
                fc_b: zeros(f),
                proj_w: w(&format!("blocks.{i}.proj_w"), &[f, d]),
                proj_b: zeros(d),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelState {
        config: config.clone(),
        wte: w("wte", &[config.vocab_size, d]),
        wpe: w("wpe", &[config.max_seq_len, d]),
        blocks,
        ln_f_gain: ones(d),
        ln_f_bias: zeros(d),
    })
}

/// Result of a gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub logits: Tensor<T>,
    pub wall_seconds: f64,
    pub peak_bytes: u64,
    pub flops: u64,
}

impl<T: Scalar> ModelState<T> {
    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1_gain"), &b.ln1_gain));
            out.push((format!("blocks.{i}.ln1_bias"), &b.ln1_bias));
            for (name, t) in b.attn.params() {
                out.push((format!("blocks.{i}.attn.{name}"), t));
            }
            out.push((format!("blocks.{i}.ln2_gain"), &b.ln2_gain));
            out.push((format!("blocks.{i}.ln2_bias"), &b.ln2_bias));
            out.push((format!("blocks.{i}.fc_w"), &b.fc_w));
            out.push((format!("blocks.{i}.fc_b"), &b.fc_b));
            out.push((format!("blocks.{i}.proj_w"), &b.proj_w));
            out.push((format!("blocks.{i}.proj_b"), &b.proj_b));
        }
        out.push(("ln_f_gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &self.ln_f_bias));
        out
    }

    /// Same order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.extend(b.attn.params_mut());
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            out.push(&mut b.fc_w);
            out.push(&mut b.fc_b);
            out.push(&mut b.proj_w);
            out.push(&mut b.proj_b);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Four bytes per parameter.
    pub fn model_size_bytes(&self) -> usize {
        4 * self.param_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        self.bind_with(tape, |t, p| t.param(p))
    }

    /// Records the model, creating each trainable leaf through `leaf` in
    /// canonical order.
    pub fn bind_with<F>(&self, tape: &mut Tape<T>, mut leaf: F) -> ModelVars
    where
        F: FnMut(&mut Tape<T>, &Tensor<T>) -> Var,
    {
        let mut params = Vec::new();
        let mut rec = |tape: &mut Tape<T>, t: &Tensor<T>| {
            let v = leaf(tape, t);
            params.push(v);
            v
        };
        let wte = rec(tape, &self.wte);
        let wpe = rec(tape, &self.wpe);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let ln1 = (rec(tape, &b.ln1_gain), rec(tape, &b.ln1_bias));
            let attn = b.attn.bind_with(tape, &mut rec);
            let ln2 = (rec(tape, &b.ln2_gain), rec(tape, &b.ln2_bias));
            let fc = (rec(tape, &b.fc_w), rec(tape, &b.fc_b));
            let proj = (rec(tape, &b.proj_w), rec(tape, &b.proj_b));
            blocks.push(BlockVars { ln1, attn, ln2, fc, proj });
        }
        let ln_f = (rec(tape, &self.ln_f_gain), rec(tape, &self.ln_f_bias));
        ModelVars {
            wte,
            wpe,
            blocks,
            ln_f,
            params,
        }
    }

    fn check_tokens(&self, ids: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
            return Err(Error::invalid("forward", format!("{} ids do not form {batch} rows", ids.len())));
        }
        let seq = ids.len() / batch;
        if seq > self.config.max_seq_len {
            return Err(Error::invalid(
                "forward",
                format!("sequence length {seq} exceeds max_seq_len {}", self.config.max_seq_len),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::invalid(
                "forward",
                format!("token id {bad} out of range for vocab {}", self.config.vocab_size),
            ));
        }
        Ok(seq)
    }

    /// Logits `[batch, seq, vocab]` for row-major `ids`.
    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &ModelVars, ids: &[usize], batch: usize) -> Result<Var> {
        let seq = self.check_tokens(ids, batch)?;
        let eps = T::lit(LAYERNORM_EPS);
        let tok = tape.embedding_lookup(vars.wte, ids, &[batch, seq])?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos = tape.embedding_lookup(vars.wpe, &positions, &[seq])?;
        let mut h = tape.add(tok, pos)?;
        for b in &vars.blocks {
            let x = tape.layernorm(h, b.ln1.0, b.ln1.1, eps)?;
            let a = attention::attend(tape, x, &self.config.attention, &b.attn)?;
            h = tape.add(h, a)?;
            let x = tape.layernorm(h, b.ln2.0, b.ln2.1, eps)?;
            let x = tape.matmul(x, b.fc.0)?;
            let x = tape.add(x, b.fc.1)?;
            let x = tape.gelu(x)?;
            let x = tape.matmul(x, b.proj.0)?;
            let x = tape.add(x, b.proj.1)?;
            h = tape.add(h, x)?;
        }
        let h = tape.layernorm(h, vars.ln_f.0, vars.ln_f.1, eps)?;
        tape.matmul_nt(h, vars.wte)
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, ids: &[usize], batch: usize) -> Result<Tensor<T>> {
        Ok(self.inference_forward(ids, batch)?.logits)
    }

    pub fn inference_forward(&self, ids: &[usize], batch: usize) -> Result<Inference<T>> {
        let start = Instant::now();
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let logits = self.forward_on(&mut tape, &vars, ids, batch)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        Ok(Inference {
            logits: tape.value(logits).clone(),
            wall_seconds,
            peak_bytes: tape.alloc().peak_bytes() as u64,
            flops: tape.flops().total(),
        })
    }

    /// Mean next-token loss on `tape`; the last position and pad targets are ignored.
    pub fn loss_on(&self, tape: &mut Tape<T>, vars: &ModelVars, ids: &[usize], batch: usize) -> Result<Var> {
        let logits = self.forward_on(tape, vars, ids, batch)?;
        tape.cross_entropy(logits, &next_token_targets(ids, batch), PAD_ID)
    }

    /// One optimizer step on a `[batch, seq]` id matrix.
    pub fn train_step(&mut self, opt: &mut AdamW<T>, ids: &[usize], batch: usize) -> Result<StepMetrics> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let loss = self.loss_on(&mut tape, &vars, ids, batch)?;
        let forward_flops = tape.flops().forward();
        tape.backward(loss)?;
        let grads: Vec<&[T]> = vars
            .params
            .iter()
            .map(|&v| tape.grad(v).ok_or(Error::invalid("train_step", "parameter without gradient")))
            .collect::<Result<_>>()?;
        opt.step(&mut self.params_mut(), &grads)?;
        let loss_value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        Ok(StepMetrics {
            step: opt.steps(),
            wall_seconds: start.elapsed().as_secs_f64(),
            forward_flops,
            backward_flops: tape.flops().backward(),
            attention_flops: tape.flops().attention_core(),
            peak_bytes: tape.alloc().peak_bytes() as u64,
            loss: loss_value,
            tokens: ids.len() as u64,
        })
    }

    /// Copy with every scalar converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            wte: self.wte.cast(),
            wpe: self.wpe.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    attn: b.attn.cast(),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                    fc_w: b.fc_w.cast(),
                    fc_b: b.fc_b.cast(),
                    proj_w: b.proj_w.cast(),
                    proj_b: b.proj_b.cast(),
                })
                .collect(),
            ln_f_gain: self.ln_f_gain.cast(),
            ln_f_bias: self.ln_f_bias.cast(),
        }
    }

    /// Same weights under another variant, for the variants whose
    /// projections convert exactly (see [`AttentionWeights::convert`]).
    pub fn convert(&self, target: &ModelConfig) -> Result<Self> {
        target.validate()?;
        let mut out = self.clone();
        out.config = target.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            b.attn = b.attn.convert(&target.attention, target.seed, &format!("blocks.{i}.attn"))?;
        }
        Ok(out)
    }
}

/// `targets[t] = ids[t + 1]`; the last position of each row gets [`PAD_ID`].
pub fn next_token_targets(ids: &[usize], batch: usize) -> Vec<usize> {
    let seq = ids.len() / batch.max(1);
    ids.chunks(seq.max(1))
        .flat_map(|row| row[1..].iter().copied().chain(std::iter::once(PAD_ID)))
        .collect()
}
