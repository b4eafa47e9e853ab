//! The eight causal self-attention mechanisms behind one interface.
//!
//! Every `attend_*` function maps `x: [batch, n, d_model]` to a tensor of the
//! same shape, and output position `t` depends only on inputs `0..=t`.

mod flash;
mod flops;
mod linear;
mod lsh;
mod sparse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use flops::{attention_core_flops_analytic, attention_flops_analytic, AttentionFlops};
pub use lsh::{hash_buckets, lsh_rotation};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Initialization scale of every projection matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Sdpa,
    Gqa,
    Linear,
    SlidingWindow,
    Lsh,
    Flash,
    Mla,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::Sdpa,
        Variant::Gqa,
        Variant::Linear,
        Variant::SlidingWindow,
        Variant::Lsh,
        Variant::Flash,
        Variant::Mla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Sdpa => "sdpa",
            Variant::Gqa => "gqa",
            Variant::Linear => "linear",
            Variant::SlidingWindow => "sliding_window",
            Variant::Lsh => "lsh",
            Variant::Flash => "flash",
            Variant::Mla => "mla",
        }
    }

    /// Projection layout this variant trains with.
    pub fn layout(self) -> Layout {
        match self {
            Variant::Baseline | Variant::Flash | Variant::SlidingWindow | Variant::Linear => Layout::Fused,
            Variant::Sdpa | Variant::Gqa | Variant::Lsh => Layout::Separate,
            Variant::Mla => Layout::Latent,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variant_list(s: &str) -> Result<Vec<Variant>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    ReluPlusOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// One `[d, 3d]` matrix producing Q, K and V (GPT-2 `c_attn`).
    Fused,
    /// Three matrices; K/V widths follow `n_kv_heads`.
    Separate,
    /// Query matrix plus a shared KV latent and its two up-projections.
    Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub variant: Variant,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_kv_heads: usize,
    pub window: usize,
    pub n_buckets: usize,
    pub n_rounds: usize,
    pub latent_dim: usize,
    pub feature_map: FeatureMap,
    pub tile_q: usize,
    pub tile_kv: usize,
    pub causal: bool,
    /// Denominator guard of linear attention.
    pub linear_eps: f64,
}

impl AttentionSpec {
    /// Spec with the default hyperparameters for every variant-specific field.
    pub fn new(variant: Variant, n_heads: usize, head_dim: usize) -> Self {
        Self {
            variant,
            n_heads,
            head_dim,
            n_kv_heads: n_heads,
            window: 32,
            n_buckets: 4,
            n_rounds: 2,
            latent_dim: (n_heads * head_dim / 2).max(1),
            feature_map: FeatureMap::ReluPlusOne,
            tile_q: 64,
            tile_kv: 64,
            causal: true,
            linear_eps: 1e-6,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Width of the K (and V) projection output.
    pub fn kv_dim(&self) -> usize {
        match self.variant {
            Variant::Gqa => self.n_kv_heads * self.head_dim,
            _ => self.d_model(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.head_dim == 0 {
            return fail("n_heads and head_dim must be positive".into());
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_kv_heads ({}) must divide n_heads ({})",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.latent_dim == 0 || self.latent_dim > 2 * self.d_model() {
            return fail(format!(
                "latent_dim ({}) must lie in 1..={}",
                self.latent_dim,
                2 * self.d_model()
            ));
        }
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        if self.n_buckets == 0 || (self.n_buckets > 1 && self.n_buckets % 2 != 0) {
            return fail(format!("n_buckets ({}) must be 1 or even", self.n_buckets));
        }
        if self.n_buckets / 2 > self.head_dim {
            return fail(format!(
                "n_buckets/2 ({}) exceeds head_dim ({}); rotations cannot be orthonormal",
                self.n_buckets / 2,
                self.head_dim
            ));
        }
        if self.n_rounds == 0 {
            return fail("n_rounds must be at least 1".into());
        }
        if self.tile_q == 0 || self.tile_kv == 0 {
            return fail("flash tile sizes must be positive".into());
        }
        if !self.causal {
            return fail("only causal attention is supported".into());
        }
        if !(self.linear_eps > 0.0) {
            return fail("linear_eps must be positive".into());
        }
        Ok(())
    }

    /// Trainable parameter count of one attention block.
    pub fn param_count(&self) -> usize {
        let d = self.d_model();
        let proj = match self.variant.layout() {
            Layout::Fused => 3 * d * d,
            Layout::Separate => d * d + 2 * d * self.kv_dim(),
            Layout::Latent => d * d + 3 * d * self.latent_dim,
        };
        proj + d * d
    }

    /// Cached elements per token an autoregressive decoder would keep.
    pub fn kv_cache_elems_per_token(&self) -> usize {
        match self.variant {
            Variant::Mla => self.latent_dim,
            _ => 2 * self.kv_dim(),
        }
    }

    /// KV-cache bytes per token at 32-bit precision.
    pub fn kv_cache_bytes_per_token(&self) -> usize {
        self.kv_cache_elems_per_token() * std::mem::size_of::<f32>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projections<T> {
    Fused {
        w_qkv: Tensor<T>,
    },
    Separate {
        w_q: Tensor<T>,
        w_k: Tensor<T>,
        w_v: Tensor<T>,
    },
    Latent {
        w_q: Tensor<T>,
        w_dkv: Tensor<T>,
        w_uk: Tensor<T>,
        w_uv: Tensor<T>,
    },
}

/// Weights of one attention block. `rotations` are fixed LSH hash
/// projections (`[head_dim, n_buckets/2]` per round) and are not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub proj: Projections<T>,
    pub w_o: Tensor<T>,
    pub rotations: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Draws `Normal(0, 0.02)` projections; each matrix has its own named stream.
    pub fn init(spec: &AttentionSpec, seed: u64, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model();
        let w = |name: &str, shape: &[usize]| -> Tensor<T> {
            rng::normal(seed, &format!("{prefix}.{name}"), shape, INIT_STD).with_grad()
        };
        let proj = match spec.variant.layout() {
            Layout::Fused => Projections::Fused {
                w_qkv: w("w_qkv", &[d, 3 * d]),
            },
            Layout::Separate => Projections::Separate {
                w_q: w("w_q", &[d, d]),
                w_k: w("w_k", &[d, spec.kv_dim()]),
                w_v: w("w_v", &[d, spec.kv_dim()]),
            },
            Layout::Latent => Projections::Latent {
                w_q: w("w_q", &[d, d]),
                w_dkv: w("w_dkv", &[d, spec.latent_dim]),
                w_uk: w("w_uk", &[spec.latent_dim, d]),
                w_uv: w("w_uv", &[spec.latent_dim, d]),
            },
        };
        Ok(Self {
            proj,
            w_o: w("w_o", &[d, d]),
            rotations: Self::rotations_for(spec, seed, prefix),
        })
    }

    pub(crate) fn rotations_for(spec: &AttentionSpec, seed: u64, prefix: &str) -> Vec<Tensor<T>> {
        if spec.variant != Variant::Lsh || spec.n_buckets < 2 {
            return Vec::new();
        }
        (0..spec.n_rounds)
            .map(|r| lsh_rotation(spec.head_dim, spec.n_buckets / 2, seed, &format!("{prefix}.rotation{r}")))
            .collect()
    }

    /// Trainable tensors with their names relative to the block.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = match &self.proj {
            Projections::Fused { w_qkv } => vec![("w_qkv", w_qkv)],
            Projections::Separate { w_q, w_k, w_v } => vec![("w_q", w_q), ("w_k", w_k), ("w_v", w_v)],
            Projections::Latent { w_q, w_dkv, w_uk, w_uv } => {
                vec![("w_q", w_q), ("w_dkv", w_dkv), ("w_uk", w_uk), ("w_uv", w_uv)]
            }
        };
        out.push(("w_o", &self.w_o));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = match &mut self.proj {
            Projections::Fused { w_qkv } => vec![w_qkv],
            Projections::Separate { w_q, w_k, w_v } => vec![w_q, w_k, w_v],
            Projections::Latent { w_q, w_dkv, w_uk, w_uv } => vec![w_q, w_dkv, w_uk, w_uv],
        };
        out.push(&mut self.w_o);
        out
    }

    /// Re-expresses these weights in the layout `target` trains with, when an
    /// exact conversion exists:
    ///
    /// * fused ↔ separate, provided K/V keep full width;
    /// * fused/separate → latent with `latent_dim = 2·d_model`, where the
    ///   down-projection stacks `[W_k | W_v]` and the up-projections select
    ///   each half.
    ///
    /// LSH rotations are regenerated from `seed`.
    pub fn convert(&self, target: &AttentionSpec, seed: u64, prefix: &str) -> Result<Self> {
        target.validate()?;
        let d = target.d_model();
        let (w_q, w_k, w_v) = self.separate_parts(d)?;
        let proj = match target.variant.layout() {
            Layout::Fused => Projections::Fused {
                w_qkv: hcat(&[&w_q, &w_k, &w_v])?,
            },
            Layout::Separate => {
                if target.kv_dim() != w_k.shape()[1] {
                    return Err(Error::Config(format!(
                        "cannot convert K/V width {} to {}",
                        w_k.shape()[1],
                        target.kv_dim()
                    )));
                }
                Projections::Separate { w_q, w_k, w_v }
            }
            Layout::Latent => {
                if target.latent_dim != 2 * d || w_k.shape()[1] != d {
                    return Err(Error::Config(
                        "exact latent factorization needs latent_dim = 2·d_model and full-width K/V".into(),
                    ));
                }
                let mut up_k = Tensor::zeros(&[2 * d, d]);
                let mut up_v = Tensor::zeros(&[2 * d, d]);
                for i in 0..d {
                    up_k.data_mut()[i * d + i] = T::one();
                    up_v.data_mut()[(d + i) * d + i] = T::one();
                }
                Projections::Latent {
                    w_q,
                    w_dkv: hcat(&[&w_k, &w_v])?,
                    w_uk: up_k.with_grad(),
                    w_uv: up_v.with_grad(),
                }
            }
        };
        Ok(Self {
            proj,
            w_o: self.w_o.clone(),
            rotations: Self::rotations_for(target, seed, prefix),
        })
    }

    fn separate_parts(&self, d: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        match &self.proj {
            Projections::Fused { w_qkv } => {
                if w_qkv.shape() != [d, 3 * d] {
                    return Err(Error::shape("convert", w_qkv.shape(), &[d, 3 * d]));
                }
                let cols = |start: usize| -> Tensor<T> {
                    let data = w_qkv
                        .data()
                        .chunks(3 * d)
                        .flat_map(|row| row[start..start + d].iter().copied())
                        .collect();
                    Tensor::new(&[d, d], data).expect("column block").with_grad()
                };
                Ok((cols(0), cols(d), cols(2 * d)))
            }
            Projections::Separate { w_q, w_k, w_v } => Ok((w_q.clone(), w_k.clone(), w_v.clone())),
            Projections::Latent { .. } => Err(Error::Config("latent weights have no exact Q/K/V split".into())),
        }
    }

    /// Copy with every scalar converted to `U`.
    pub fn cast<U: Scalar>(&self) -> AttentionWeights<U> {
        AttentionWeights {
            proj: match &self.proj {
                Projections::Fused { w_qkv } => Projections::Fused { w_qkv: w_qkv.cast() },
                Projections::Separate { w_q, w_k, w_v } => Projections::Separate {
                    w_q: w_q.cast(),
                    w_k: w_k.cast(),
                    w_v: w_v.cast(),
                },
                Projections::Latent { w_q, w_dkv, w_uk, w_uv } => Projections::Latent {
                    w_q: w_q.cast(),
                    w_dkv: w_dkv.cast(),
                    w_uk: w_uk.cast(),
                    w_uv: w_uv.cast(),
                },
            },
            w_o: self.w_o.cast(),
            rotations: self.rotations.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copies every tensor onto `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> AttentionVars {
        self.bind_with(tape, &mut |t, p| t.param(p))
    }

    /// Records trainable tensors through `leaf`, called in [`Self::params`]
    /// order; rotations become constants.
    pub fn bind_with<F>(&self, tape: &mut Tape<T>, leaf: &mut F) -> AttentionVars
    where
        F: FnMut(&mut Tape<T>, &Tensor<T>) -> Var,
    {
        let proj = match &self.proj {
            Projections::Fused { w_qkv } => ProjVars::Fused { w_qkv: leaf(tape, w_qkv) },
            Projections::Separate { w_q, w_k, w_v } => ProjVars::Separate {
                w_q: leaf(tape, w_q),
                w_k: leaf(tape, w_k),
                w_v: leaf(tape, w_v),
            },
            Projections::Latent { w_q, w_dkv, w_uk, w_uv } => ProjVars::Latent {
                w_q: leaf(tape, w_q),
                w_dkv: leaf(tape, w_dkv),
                w_uk: leaf(tape, w_uk),
                w_uv: leaf(tape, w_uv),
            },
        };
        let w_o = leaf(tape, &self.w_o);
        let rotations = self.rotations.iter().map(|r| tape.constant(r.clone())).collect();
        AttentionVars { proj, w_o, rotations }
    }
}

fn hcat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts[0].shape()[0];
    let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            let w = p.shape()[1];
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor::new(&[rows, width], data)?.with_grad())
}

#[derive(Clone, Copy, Debug)]
pub enum ProjVars {
    Fused { w_qkv: Var },
    Separate { w_q: Var, w_k: Var, w_v: Var },
    Latent { w_q: Var, w_dkv: Var, w_uk: Var, w_uv: Var },
}

/// Attention weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub proj: ProjVars,
    pub w_o: Var,
    pub rotations: Vec<Var>,
}

/// Q, K, V split into heads: `[batch, heads, n, head_dim]` (K/V may have fewer heads).
fn project_qkv<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<(Var, Var, Var)> {
    let d = spec.d_model();
    let (q, k, v, kv_heads) = match w.proj {
        ProjVars::Fused { w_qkv } => {
            let qkv = tape.matmul(x, w_qkv)?;
            let q = tape.slice_lastdim(qkv, 0, d)?;
            let k = tape.slice_lastdim(qkv, d, d)?;
            let v = tape.slice_lastdim(qkv, 2 * d, d)?;
            (q, k, v, spec.n_heads)
        }
        ProjVars::Separate { w_q, w_k, w_v } => {
            let q = tape.matmul(x, w_q)?;
            let k = tape.matmul(x, w_k)?;
            let v = tape.matmul(x, w_v)?;
            let kv_heads = tape.shape(k)[2] / spec.head_dim;
            (q, k, v, kv_heads)
        }
        ProjVars::Latent { w_q, w_dkv, w_uk, w_uv } => {
            let q = tape.matmul(x, w_q)?;
            let latent = tape.matmul(x, w_dkv)?;
            let k = tape.matmul(latent, w_uk)?;
            let v = tape.matmul(latent, w_uv)?;
            (q, k, v, spec.n_heads)
        }
    };
    let q = tape.split_heads(q, spec.n_heads)?;
    let k = tape.split_heads(k, kv_heads)?;
    let v = tape.split_heads(v, kv_heads)?;
    Ok((q, k, v))
}

fn output_projection<T: Scalar>(tape: &mut Tape<T>, heads_out: Var, w: &AttentionVars) -> Result<Var> {
    let merged = tape.merge_heads(heads_out)?;
    tape.matmul(merged, w.w_o)
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var, spec: &AttentionSpec) -> Result<()> {
    spec.validate()?;
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != spec.d_model() {
        return Err(Error::invalid(
            "attention",
            format!("expected [batch, n, {}], got {s:?}", spec.d_model()),
        ));
    }
    Ok(())
}

fn check_layout(spec: &AttentionSpec, w: &AttentionVars) -> Result<()> {
    let ok = matches!(
        (spec.variant.layout(), &w.proj),
        (Layout::Fused, ProjVars::Fused { .. })
            | (Layout::Separate, ProjVars::Separate { .. })
            | (Layout::Latent, ProjVars::Latent { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("weights do not match the {} projection layout", spec.variant)))
    }
}

/// Masked softmax attention over materialized `n×n` scores.
fn dense_core<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
    let scale = T::one() / T::from_usize_lossy(spec.head_dim).sqrt();
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, scale)?;
    let scores = tape.causal_mask(scores)?;
    let probs = tape.softmax_lastdim(scores)?;
    tape.matmul(probs, v)
}

fn with_core<T: Scalar, F>(tape: &mut Tape<T>, f: F) -> Result<Var>
where
    F: FnOnce(&mut Tape<T>) -> Result<Var>,
{
    tape.enter_attention_core();
    let out = f(tape);
    tape.exit_attention_core();
    out
}

/// GPT-2 attention: fused QKV projection, masked scaled dot-product.
pub fn attend_baseline<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    check_input(tape, x, spec)?;
    check_layout(spec, w)?;
    let (q, k, v) = project_qkv(tape, x, spec, w)?;
    let out = with_core(tape, |t| dense_core(t, q, k, v, spec))?;
    output_projection(tape, out, w)
}

/// Same mathematics as the baseline through three separate projections.
pub fn attend_sdpa<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    attend_baseline(tape, x, spec, w)
}

/// Query head `h` reads KV head `h / (n_heads / n_kv_heads)`.
pub fn attend_gqa<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    check_input(tape, x, spec)?;
    check_layout(spec, w)?;
    let (q, k, v) = project_qkv(tape, x, spec, w)?;
    let group = spec.n_heads / tape.shape(k)[1];
    let out = with_core(tape, |t| {
        let (k, v) = if group > 1 {
            (t.repeat_heads(k, group)?, t.repeat_heads(v, group)?)
        } else {
            (k, v)
        };
        dense_core(t, q, k, v, spec)
    })?;
    output_projection(tape, out, w)
}

/// Causal linear attention with the `relu(u) + 1` feature map.
pub fn attend_linear<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    check_input(tape, x, spec)?;
    check_layout(spec, w)?;
    let (q, k, v) = project_qkv(tape, x, spec, w)?;
    let out = with_core(tape, |t| {
        let fq = t.relu(q)?;
        let fq = t.add_scalar(fq, T::one())?;
        let fk = t.relu(k)?;
        let fk = t.add_scalar(fk, T::one())?;
        linear::causal_linear_attention(t, fq, fk, v, T::lit(spec.linear_eps))
    })?;
    output_projection(tape, out, w)
}

/// Position `t` attends to `max(0, t - window + 1)..=t`.
pub fn attend_sliding_window<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    check_input(tape, x, spec)?;
    check_layout(spec, w)?;
    let (q, k, v) = project_qkv(tape, x, spec, w)?;
    let out = with_core(tape, |t| {
        let s = t.shape(q);
        let plan = sparse::KeyPlan::sliding_window(s[0] * s[1], s[2], spec.window);
        sparse::indexed_attention(t, q, k, v, plan)
    })?;
    output_projection(tape, out, w)
}

/// Per round, keys are hashed by random rotation, positions are stably sorted
/// by bucket, and each position attends causally within its bucket; round
/// outputs are averaged.
pub fn attend_lsh<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    check_input(tape, x, spec)?;
    check_layout(spec, w)?;
    if spec.n_buckets > 1 && w.rotations.len() != spec.n_rounds {
        return Err(Error::Config(format!(
            "lsh expects {} rotation matrices, found {}",
            spec.n_rounds,
            w.rotations.len()
        )));
    }
    let (q, k, v) = project_qkv(tape, x, spec, w)?;
    let out = with_core(tape, |t| {
        let buckets = lsh::hash_keys(t, k, &w.rotations, spec)?;
        let s = t.shape(q);
        let plan = sparse::KeyPlan::from_buckets(&buckets, s[0] * s[1], s[2]);
        sparse::indexed_attention(t, q, k, v, plan)
    })?;
    output_projection(tape, out, w)
}

/// Exact attention by tiled online softmax; never materializes `n×n` scores.
pub fn attend_flash<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    check_input(tape, x, spec)?;
    check_layout(spec, w)?;
    let (q, k, v) = project_qkv(tape, x, spec, w)?;
    let out = with_core(tape, |t| flash::flash_attention(t, q, k, v, spec.tile_q, spec.tile_kv))?;
    output_projection(tape, out, w)
}

/// Keys and values are up-projected from one shared per-token latent.
pub fn attend_mla<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    attend_baseline(tape, x, spec, w)
}

/// Dispatches on `spec.variant`.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &AttentionSpec, w: &AttentionVars) -> Result<Var> {
    match spec.variant {
        Variant::Baseline => attend_baseline(tape, x, spec, w),
        Variant::Sdpa => attend_sdpa(tape, x, spec, w),
        Variant::Gqa => attend_gqa(tape, x, spec, w),
        Variant::Linear => attend_linear(tape, x, spec, w),
        Variant::SlidingWindow => attend_sliding_window(tape, x, spec, w),
        Variant::Lsh => attend_lsh(tape, x, spec, w),
        Variant::Flash => attend_flash(tape, x, spec, w),
        Variant::Mla => attend_mla(tape, x, spec, w),
    }
}
