use serde::{Deserialize, Serialize};

/// Operation classes tallied by [`FlopCounter`].
///
/// Cost convention, applied uniformly by every kernel:
///
/// | operation                                   | FLOPs per element |
/// |---------------------------------------------|-------------------|
/// | multiply-accumulate (matmul, dot products)  | 2                 |
/// | add, sub, mul, div, compare, max, exp, log  | 1                 |
/// | softmax (max, sub, exp, sum, div)           | 5                 |
/// | relu                                        | 1                 |
/// | gelu (tanh form)                            | 8                 |
/// | layernorm forward                           | 8                 |
/// | cross-entropy (softmax + log + pick)        | 6                 |
///
/// Copies, permutes, gathers and integer work (sorting, argmax indices) are free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopKind {
    Matmul,
    Softmax,
    Elementwise,
    Norm,
}

impl FlopKind {
    pub const ALL: [FlopKind; 4] = [
        FlopKind::Matmul,
        FlopKind::Softmax,
        FlopKind::Elementwise,
        FlopKind::Norm,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

/// Monotone FLOP tally, split by operation kind and by pass direction.
///
/// `attention_core` additionally accumulates forward FLOPs issued while the
/// owning tape is inside an attention-core scope (score/mix computations,
/// excluding the Q/K/V/O projections).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    by_kind: [u64; 4],
    forward: u64,
    backward: u64,
    attention_core: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, kind: FlopKind, phase: Phase, count: u64) {
        self.by_kind[kind.index()] += count;
        match phase {
            Phase::Forward => self.forward += count,
            Phase::Backward => self.backward += count,
        }
    }

    pub(crate) fn add_attention_core(&mut self, count: u64) {
        self.attention_core += count;
    }

    pub fn total(&self) -> u64 {
        self.by_kind.iter().sum()
    }

    pub fn kind(&self, kind: FlopKind) -> u64 {
        self.by_kind[kind.index()]
    }

    pub fn forward(&self) -> u64 {
        self.forward
    }

    pub fn backward(&self) -> u64 {
        self.backward
    }

    pub fn attention_core(&self) -> u64 {
        self.attention_core
    }
}

/// Live and high-water payload bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocTracker {
    live_bytes: usize,
    peak_bytes: usize,
}

impl AllocTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, bytes: usize) {
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    pub fn free(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.live_bytes, "freeing more than is live");
        self.live_bytes = self.live_bytes.saturating_sub(bytes);
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }
}
