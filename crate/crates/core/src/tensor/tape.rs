use super::counters::{AllocTracker, FlopCounter, FlopKind, Phase};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Backward rule for a kernel that is recorded as one opaque node.
pub trait FusedBackward<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same order as recorded), `None` where
    /// `needs_grad` is false.
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>>;
}

/// Everything a fused backward rule may read or charge.
pub struct BackwardCtx<'a, T: Scalar> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad_out: &'a [T],
    pub needs_grad: Vec<bool>,
    pub flops: &'a mut FlopCounter,
    pub alloc: &'a mut AllocTracker,
}

impl<T: Scalar> BackwardCtx<'_, T> {
    pub fn count(&mut self, kind: FlopKind, n: u64) {
        self.flops.add(kind, Phase::Backward, n);
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        broadcast_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    CausalMask {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    TransposeLast2 {
        a: Var,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads {
        a: Var,
    },
    RepeatHeads {
        a: Var,
        factor: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        count: usize,
    },
    Sum {
        a: Var,
    },
    Fused {
        inputs: Vec<Var>,
        op: Box<dyn FusedBackward<T>>,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::CausalMask { a }
            | Op::SliceLast { a, .. }
            | Op::TransposeLast2 { a }
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a }
            | Op::RepeatHeads { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { inputs } | Op::Fused { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    /// Bytes held by the op beyond its output (saved statistics, index plans).
    pub(crate) saved_bytes: usize,
}

/// Single-use reverse-mode tape.
///
/// Values are appended in evaluation order, so node index order is a valid
/// topological order. One `backward` per tape; afterwards only leaf gradients
/// remain readable.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    pub(crate) flops: FlopCounter,
    pub(crate) alloc: AllocTracker,
    grad_enabled: bool,
    consumed: bool,
    core_depth: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            flops: FlopCounter::new(),
            alloc: AllocTracker::new(),
            grad_enabled: true,
            consumed: false,
            core_depth: 0,
        }
    }

    /// Tape that records no backward graph.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn alloc(&self) -> &AllocTracker {
        &self.alloc
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad && self.grad_enabled;
        self.push_node(tensor, Op::Leaf, rg, 0)
    }

    /// Copies a parameter onto the tape as a leaf.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        t.requires_grad = tensor.requires_grad;
        self.leaf(t)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Charges forward FLOPs (attributed to the attention core when inside one).
    pub fn count(&mut self, kind: FlopKind, n: u64) {
        self.flops.add(kind, Phase::Forward, n);
        if self.core_depth > 0 {
            self.flops.add_attention_core(n);
        }
    }

    pub fn enter_attention_core(&mut self) {
        self.core_depth += 1;
    }

    pub fn exit_attention_core(&mut self) {
        debug_assert!(self.core_depth > 0, "unbalanced attention-core scope");
        self.core_depth = self.core_depth.saturating_sub(1);
    }

    /// Registers transient working memory of a kernel.
    pub fn alloc_scratch(&mut self, bytes: usize) {
        self.alloc.alloc(bytes);
    }

    pub fn free_scratch(&mut self, bytes: usize) {
        self.alloc.free(bytes);
    }

    pub(crate) fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, saved_bytes: usize) -> Var {
        self.alloc.alloc(value.nbytes() + saved_bytes);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved_bytes,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op result; drops the op record when no gradient can flow.
    pub(crate) fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        self.record_with_saved(name, value, op, 0)
    }

    pub(crate) fn record_with_saved(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        saved_bytes: usize,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.grad_enabled && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        if rg {
            Ok(self.push_node(value, op, true, saved_bytes))
        } else {
            Ok(self.push_node(value, Op::Leaf, false, 0))
        }
    }

    /// Records the result of a fused kernel with a custom backward rule.
    pub fn fused(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        saved_bytes: usize,
        op: Box<dyn FusedBackward<T>>,
    ) -> Result<Var> {
        let name = op.name();
        self.record_with_saved(
            name,
            output,
            Op::Fused {
                inputs: inputs.to_vec(),
                op,
            },
            saved_bytes,
        )
    }

    /// Populates gradients of every reachable `requires_grad` value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::invalid("backward", "loss does not depend on any tracked value"));
        }
        self.consumed = true;

        let elem = std::mem::size_of::<T>();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.alloc.alloc(elem);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let parents = node.op.parents();
            let needs: Vec<bool> = parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let contributions = super::ops::backward_op(&self.nodes, idx, &g, &needs, &mut self.flops, &mut self.alloc)?;
            self.alloc.free(g.len() * elem);
            drop(g);
            for ((p, need), contrib) in parents.iter().zip(needs).zip(contributions) {
                if !need {
                    continue;
                }
                let Some(c) = contrib else { continue };
                match &mut grads[p.0] {
                    Some(acc) => {
                        self.flops.add(FlopKind::Elementwise, Phase::Backward, c.len() as u64);
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += *v;
                        }
                    }
                    slot @ None => {
                        self.alloc.alloc(c.len() * elem);
                        *slot = Some(c);
                    }
                }
            }
        }

        // Release the graph: only leaf gradients survive.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Leaf;
                self.alloc.free(node.saved_bytes);
                node.saved_bytes = 0;
            }
        }
        self.grads = grads;
        Ok(())
    }
}
