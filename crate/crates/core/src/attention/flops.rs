//! Closed-form forward FLOPs of one attention layer on one sequence.
//!
//! With `d = n_heads·head_dim`, `H = n_heads`, `h = head_dim`:
//!
//! | variant | projections | core |
//! |---|---|---|
//! | baseline, sdpa, flash | `8nd²` | `H·n²·(4h + 7)` |
//! | gqa | `4nd² + 4nd·kv_dim` | `H·n²·(4h + 7)` |
//! | mla | `4nd² + 6nd·latent` | `H·n²·(4h + 7)` |
//! | sliding_window | `8nd²` | `H·Σ_t min(t+1, w)·(4h + 6)` |
//! | linear | `8nd²` | `4nd + H·n·(4h² + 4h + 1)` |
//! | lsh | `8nd²` | see below |
//!
//! LSH per round and head: hashing `n·(h·B + 3B/2)` when `B > 1`, then
//! `E·(4h + 6)` for the attended pairs, with `E = n + n(n−1)/(2B)` the
//! expected pair count under uniform bucket assignment; with more than one
//! round, `2nh` per round for averaging.
//!
//! The per-pair cost splits into `2h` for the score dot product, 1 for the
//! `1/√h` scale, 1 for the additive mask (dense paths only), 5 for softmax
//! and `2h` for the value mix.

use serde::{Deserialize, Serialize};

use super::{AttentionSpec, Variant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionFlops {
    pub projections: f64,
    pub core: f64,
}

impl AttentionFlops {
    pub fn total(&self) -> f64 {
        self.projections + self.core
    }
}

pub fn attention_flops_analytic(spec: &AttentionSpec, n: usize) -> AttentionFlops {
    let nf = n as f64;
    let d = spec.d_model() as f64;
    let projections = match spec.variant {
        Variant::Gqa => 4.0 * nf * d * d + 4.0 * nf * d * spec.kv_dim() as f64,
        Variant::Mla => 4.0 * nf * d * d + 6.0 * nf * d * spec.latent_dim as f64,
        _ => 8.0 * nf * d * d,
    };
    AttentionFlops {
        projections,
        core: attention_core_flops_analytic(spec, n),
    }
}

/// Core FLOPs only (everything between projections and output projection).
pub fn attention_core_flops_analytic(spec: &AttentionSpec, n: usize) -> f64 {
    let nf = n as f64;
    let heads = spec.n_heads as f64;
    let h = spec.head_dim as f64;
    let d = spec.d_model() as f64;
    match spec.variant {
        Variant::Baseline | Variant::Sdpa | Variant::Gqa | Variant::Flash | Variant::Mla => {
            heads * nf * nf * (4.0 * h + 7.0)
        }
        Variant::SlidingWindow => {
            let pairs: usize = (0..n).map(|t| (t + 1).min(spec.window)).sum();
            heads * pairs as f64 * (4.0 * h + 6.0)
        }
        Variant::Linear => 4.0 * nf * d + heads * nf * (4.0 * h * h + 4.0 * h + 1.0),
        Variant::Lsh => {
            let b = spec.n_buckets as f64;
            let rounds = spec.n_rounds as f64;
            let hashing = if spec.n_buckets > 1 { nf * (h * b + 1.5 * b) } else { 0.0 };
            let pairs = nf + nf * (nf - 1.0) / (2.0 * b);
            let averaging = if spec.n_rounds > 1 { 2.0 * nf * h } else { 0.0 };
            rounds * heads * (hashing + pairs * (4.0 * h + 6.0) + averaging)
        }
    }
}
