//! Forward kernels of the tape and their backward rules.
//!
//! Backward FLOP charges: matmul 2·m·n·k per produced gradient, softmax 4,
//! layernorm 10, gelu 12, cross-entropy 7, mul/scale/relu 1 per element,
//! broadcast reductions and gradient accumulation 1 per element summed.

use super::counters::{AllocTracker, FlopCounter, FlopKind, Phase};
use super::tape::{BackwardCtx, Node, Op, Tape, Var};
use super::{Tensor, MASK_VALUE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const GELU_COEF: f64 = 0.044715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced a consistent shape")
}

fn lead(shape: &[usize], keep: usize) -> usize {
    shape[..shape.len() - keep].iter().product()
}

struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    broadcast_b: bool,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulPlan> {
    let op = if trans_b { "matmul_nt" } else { "matmul" };
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(op, a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(Error::shape(op, a, b));
    }
    let mut out_shape = a[..a.len() - 1].to_vec();
    out_shape.push(n);
    if b.len() == 2 {
        // Broadcast a 2-D right operand over every leading index of `a`.
        return Ok(MatmulPlan {
            batch: 1,
            m: lead(a, 2) * m,
            k,
            n,
            broadcast_b: true,
            out_shape,
        });
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape(op, a, b));
    }
    Ok(MatmulPlan {
        batch: lead(a, 2),
        m,
        k,
        n,
        broadcast_b: false,
        out_shape,
    })
}

fn b_strides(trans_b: bool, k: usize, n: usize) -> (isize, isize) {
    if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    }
}

impl<T: Scalar> Tape<T> {
    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Batched product over the last two dimensions; a 2-D `b` broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two dimensions without materializing `bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let p = plan_matmul(self.val(a).shape(), self.val(b).shape(), trans_b)?;
        let (batch, m, k, n) = (p.batch, p.m, p.k, p.n);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.val(a).data();
            let bd = self.val(b).data();
            for i in 0..batch {
                let bo = if p.broadcast_b { 0 } else { i * k * n };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bd[bo..bo + k * n],
                    b_strides(trans_b, k, n),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        self.count(FlopKind::Matmul, 2 * (batch * m * n * k) as u64);
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            broadcast_b: p.broadcast_b,
            batch,
            m,
            k,
            n,
        };
        self.record("matmul", tensor(&p.out_shape, out), op)
    }

    /// `a + b`, where `b`'s shape must equal a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bd = self.val(b).data();
        let bn = bd.len();
        let out: Vec<T> = self
            .val(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bn])
            .collect();
        let shape = sa.to_vec();
        self.count(FlopKind::Elementwise, out.len() as u64);
        self.record("add", tensor(&shape, out), Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let out: Vec<T> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = sa.to_vec();
        self.count(FlopKind::Elementwise, out.len() as u64);
        self.record("mul", tensor(&shape, out), Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.val(a).data().iter().map(|&x| x * c).collect();
        let shape = self.val(a).shape().to_vec();
        self.count(FlopKind::Elementwise, out.len() as u64);
        self.record("scale", tensor(&shape, out), Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.val(a).data().iter().map(|&x| x + c).collect();
        let shape = self.val(a).shape().to_vec();
        self.count(FlopKind::Elementwise, out.len() as u64);
        self.record("add_scalar", tensor(&shape, out), Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.val(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.val(a).shape().to_vec();
        self.count(FlopKind::Elementwise, out.len() as u64);
        self.record("relu", tensor(&shape, out), Op::Relu { a })
    }

    /// GPT-2 gelu (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, s, half) = (T::lit(GELU_COEF), T::lit(GELU_SCALE), T::lit(0.5));
        let out: Vec<T> = self
            .val(a)
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (s * (x + c * x * x * x)).tanh()))
            .collect();
        let shape = self.val(a).shape().to_vec();
        self.count(FlopKind::Elementwise, 8 * out.len() as u64);
        self.record("gelu", tensor(&shape, out), Op::Gelu { a })
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let d = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let shape = x.shape().to_vec();
        self.count(FlopKind::Softmax, 5 * out.len() as u64);
        self.record("softmax", tensor(&shape, out), Op::Softmax { a })
    }

    /// Adds the large negative mask value above the diagonal of the last two
    /// (square) dimensions.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::invalid("causal_mask", format!("needs square trailing dims, got {s:?}")));
        }
        let n = s[s.len() - 1];
        let mask = T::lit(MASK_VALUE);
        let mut out = x.data().to_vec();
        for block in out.chunks_mut(n * n) {
            for i in 0..n {
                for j in i + 1..n {
                    block[i * n + j] += mask;
                }
            }
        }
        let shape = s.to_vec();
        self.count(FlopKind::Elementwise, out.len() as u64);
        self.record("causal_mask", tensor(&shape, out), Op::CausalMask { a })
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("layernorm", "eps must be positive"));
        }
        let xv = self.val(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            if self.val(p).shape() != [d] {
                return Err(Error::shape("layernorm", xv.shape(), self.val(p).shape()));
            }
        }
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let rows = xv.numel() / d;
        let inv_d = T::one() / T::from_usize_lossy(d);
        let mut out = vec![T::zero(); xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (xr, or) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for i in 0..d {
                or[i] = (xr[i] - mean) * rstd * g[i] + b[i];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = xv.shape().to_vec();
        let saved = 2 * rows * std::mem::size_of::<T>();
        self.count(FlopKind::Norm, 8 * out.len() as u64);
        self.record_with_saved(
            "layernorm",
            tensor(&shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            saved,
        )
    }

    pub fn concat_lastdim(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_lastdim", "no inputs"))?;
        let base = self.val(*first).shape().to_vec();
        let rows = lead(&base, 1);
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.val(v).shape();
            if s.len() != base.len() || s[..s.len() - 1] != base[..base.len() - 1] {
                return Err(Error::shape("concat_lastdim", &base, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.val(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = base;
        *shape.last_mut().unwrap() = total;
        self.record(
            "concat_lastdim",
            tensor(&shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// `a[..., start..start + len]`.
    pub fn slice_lastdim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.val(a);
        let d = x.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::invalid("slice_lastdim", format!("range {start}..{} outside 0..{d}", start + len)));
        }
        let out: Vec<T> = x
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.record("slice_lastdim", tensor(&shape, out), Op::SliceLast { a, start })
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::invalid("transpose_last2", format!("needs ≥2 dims, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(x.data(), r, c);
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.record("transpose_last2", tensor(&shape, out), Op::TransposeLast2 { a })
    }

    /// `[b, n, h·dh] → [b, h, n, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let x = self.val(a);
        let s = x.shape();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::invalid("split_heads", format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, n, dh) = (s[0], s[1], s[2] / heads);
        let out = permute_0213(x.data(), b, n, heads, dh);
        self.record("split_heads", tensor(&[b, heads, n, dh], out), Op::SplitHeads { a, heads })
    }

    /// `[b, h, n, dh] → [b, n, h·dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::invalid("merge_heads", format!("needs 4 dims, got {s:?}")));
        }
        let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
        let out = permute_0213(x.data(), b, h, n, dh);
        self.record("merge_heads", tensor(&[b, n, h * dh], out), Op::MergeHeads { a })
    }

    /// `[b, g, n, dh] → [b, g·factor, n, dh]`; output head `h` copies input head `h / factor`.
    pub fn repeat_heads(&mut self, a: Var, factor: usize) -> Result<Var> {
        let x = self.val(a);
        let s = x.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::invalid("repeat_heads", format!("shape {s:?}, factor {factor}")));
        }
        let (b, g, n, dh) = (s[0], s[1], s[2], s[3]);
        let block = n * dh;
        let mut out = Vec::with_capacity(b * g * factor * block);
        for bi in 0..b {
            for h in 0..g * factor {
                let src = (bi * g + h / factor) * block;
                out.extend_from_slice(&x.data()[src..src + block]);
            }
        }
        self.record(
            "repeat_heads",
            tensor(&[b, g * factor, n, dh], out),
            Op::RepeatHeads { a, factor },
        )
    }

    /// Gathers rows of a `[vocab, d]` table; output shape is `out_lead ++ [d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], out_lead: &[usize]) -> Result<Var> {
        let t = self.val(table);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::invalid("embedding_lookup", format!("table must be 2-D, got {s:?}")));
        }
        if out_lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding_lookup", out_lead, &[ids.len()]));
        }
        let (vocab, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid("embedding_lookup", format!("id {id} out of range for vocab {vocab}")));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_lead.to_vec();
        shape.push(d);
        let saved = ids.len() * std::mem::size_of::<usize>();
        self.record_with_saved(
            "embedding_lookup",
            tensor(&shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            saved,
        )
    }

    /// Mean negative log-likelihood over positions whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let x = self.val(logits);
        let v = x.last_dim();
        let rows = x.numel() / v;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (row, &t) in x.data().chunks(v).zip(targets) {
            if t == ignore_index {
                continue;
            }
            if t >= v {
                return Err(Error::invalid("cross_entropy", format!("target {t} out of range for {v} classes")));
            }
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            total += (lse - row[t]).to_f64().unwrap_or(f64::NAN);
            count += 1;
        }
        if count == 0 {
            return Err(Error::AllTargetsIgnored);
        }
        self.count(FlopKind::Softmax, 6 * (count * v) as u64);
        let loss = T::lit(total / count as f64);
        let saved = targets.len() * std::mem::size_of::<usize>();
        self.record_with_saved(
            "cross_entropy",
            tensor(&[1], vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                count,
            },
            saved,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let s: T = x.data().iter().copied().sum();
        self.count(FlopKind::Elementwise, x.numel() as u64);
        self.record("sum", tensor(&[1], vec![s]), Op::Sum { a })
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn transpose_blocks<T: Scalar>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// `[a, b, c, d] → [a, c, b, d]` on row-major storage.
fn permute_0213<T: Scalar>(data: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let src = ((ai * b + bi) * c + ci) * d;
                let dst = ((ai * c + ci) * b + bi) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

pub(crate) fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    idx: usize,
    g: &[T],
    needs: &[bool],
    flops: &mut FlopCounter,
    alloc: &mut AllocTracker,
) -> Result<Vec<Option<Vec<T>>>> {
    let node = &nodes[idx];
    let val = |v: Var| &nodes[v.0].value;
    let mut charge = |kind: FlopKind, n: usize| flops.add(kind, Phase::Backward, n as u64);
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul {
            a,
            b,
            trans_b,
            broadcast_b,
            batch,
            m,
            k,
            n,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let mut ga = None;
            let mut gb = None;
            if needs[0] {
                let mut d = vec![T::zero(); batch * m * k];
                // dA = dC · Bᵀ
                let bt = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                for i in 0..batch {
                    let bo = if *broadcast_b { 0 } else { i * k * n };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &bd[bo..bo + k * n],
                        bt,
                        T::zero(),
                        &mut d[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
                charge(FlopKind::Matmul, 2 * batch * m * n * k);
                ga = Some(d);
            }
            if needs[1] {
                let nb = if *broadcast_b { 1 } else { batch };
                let mut d = vec![T::zero(); nb * k * n];
                for i in 0..batch {
                    let bo = if *broadcast_b { 0 } else { i * k * n };
                    let beta = if *broadcast_b && i > 0 { T::one() } else { T::zero() };
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // dB (n×k) = dCᵀ (n×m) · A (m×k)
                        T::gemm(n, m, k, T::one(), gi, (1, n as isize), ai, (k as isize, 1), beta, &mut d[bo..bo + k * n], (k as isize, 1));
                    } else {
                        // dB (k×n) = Aᵀ (k×m) · dC (m×n)
                        T::gemm(k, m, n, T::one(), ai, (1, k as isize), gi, (n as isize, 1), beta, &mut d[bo..bo + k * n], (n as isize, 1));
                    }
                }
                charge(FlopKind::Matmul, 2 * batch * m * n * k);
                gb = Some(d);
            }
            vec![ga, gb]
        }
        Op::Add { b, .. } => {
            let ga = needs[0].then(|| g.to_vec());
            let gb = needs[1].then(|| {
                let bn = val(*b).numel();
                let mut d = vec![T::zero(); bn];
                for (i, &v) in g.iter().enumerate() {
                    d[i % bn] += v;
                }
                if bn != g.len() {
                    charge(FlopKind::Elementwise, g.len());
                }
                d
            });
            vec![ga, gb]
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let ga = needs[0].then(|| g.iter().zip(bd).map(|(&u, &v)| u * v).collect::<Vec<_>>());
            let gb = needs[1].then(|| g.iter().zip(ad).map(|(&u, &v)| u * v).collect::<Vec<_>>());
            charge(FlopKind::Elementwise, g.len() * (needs[0] as usize + needs[1] as usize));
            vec![ga, gb]
        }
        Op::Scale { c, .. } => {
            charge(FlopKind::Elementwise, g.len());
            vec![Some(g.iter().map(|&v| v * *c).collect())]
        }
        Op::AddScalar { .. } | Op::CausalMask { .. } => vec![Some(g.to_vec())],
        Op::Relu { a } => {
            charge(FlopKind::Elementwise, g.len());
            let x = val(*a).data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect(),
            )]
        }
        Op::Gelu { a } => {
            charge(FlopKind::Elementwise, 12 * g.len());
            let (c, s, half) = (T::lit(GELU_COEF), T::lit(GELU_SCALE), T::lit(0.5));
            let three = T::lit(3.0);
            let x = val(*a).data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&u, &v)| {
                        let t = (s * (v + c * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * s * (T::one() + three * c * v * v);
                        u * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect(),
            )]
        }
        Op::Softmax { .. } => {
            let y = node.value.data();
            let d = node.value.last_dim();
            let mut dx = vec![T::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for i in 0..d {
                    dr[i] = yr[i] * (gr[i] - dot);
                }
            }
            charge(FlopKind::Softmax, 4 * y.len());
            vec![Some(dx)]
        }
        Op::LayerNorm {
            x,
            gain,
            mean,
            rstd,
            ..
        } => {
            let xd = val(*x).data();
            let gd = val(*gain).data();
            let d = gd.len();
            let inv_d = T::one() / T::from_usize_lossy(d);
            let mut dx = vec![T::zero(); xd.len()];
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for (r, ((xr, gr), dr)) in xd.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                let (mu, rs) = (mean[r], rstd[r]);
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for i in 0..d {
                    xhat[i] = (xr[i] - mu) * rs;
                    dxhat[i] = gr[i] * gd[i];
                    dg[i] += gr[i] * xhat[i];
                    db[i] += gr[i];
                    m1 += dxhat[i];
                    m2 += dxhat[i] * xhat[i];
                }
                m1 *= inv_d;
                m2 *= inv_d;
                for i in 0..d {
                    dr[i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            charge(FlopKind::Norm, 10 * xd.len());
            vec![needs[0].then_some(dx), needs[1].then_some(dg), needs[2].then_some(db)]
        }
        Op::Concat { inputs } => {
            let total = node.value.last_dim();
            let rows = node.value.numel() / total;
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, &v) in inputs.iter().enumerate() {
                let w = val(v).last_dim();
                if needs[i] {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    grads.push(Some(d));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }
        Op::SliceLast { a, start } => {
            let d = val(*a).last_dim();
            let len = node.value.last_dim();
            let mut dx = vec![T::zero(); val(*a).numel()];
            for (dr, gr) in dx.chunks_mut(d).zip(g.chunks(len)) {
                dr[*start..*start + len].copy_from_slice(gr);
            }
            vec![Some(dx)]
        }
        Op::TransposeLast2 { a } => {
            let s = val(*a).shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            vec![Some(transpose_blocks(g, c, r))]
        }
        Op::SplitHeads { a, heads } => {
            let s = val(*a).shape();
            let (b, n, dh) = (s[0], s[1], s[2] / heads);
            vec![Some(permute_0213(g, b, *heads, n, dh))]
        }
        Op::MergeHeads { a } => {
            let s = val(*a).shape();
            let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
            vec![Some(permute_0213(g, b, n, h, dh))]
        }
        Op::RepeatHeads { a, factor } => {
            let s = val(*a).shape();
            let (b, gh, n, dh) = (s[0], s[1], s[2], s[3]);
            let block = n * dh;
            let mut dx = vec![T::zero(); val(*a).numel()];
            for bi in 0..b {
                for h in 0..gh * factor {
                    let dst = (bi * gh + h / factor) * block;
                    let src = (bi * gh * factor + h) * block;
                    for i in 0..block {
                        dx[dst + i] += g[src + i];
                    }
                }
            }
            charge(FlopKind::Elementwise, g.len());
            vec![Some(dx)]
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).shape()[1];
            let mut dt = vec![T::zero(); val(*table).numel()];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[i * d + j];
                }
            }
            charge(FlopKind::Elementwise, g.len());
            vec![Some(dt)]
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore_index,
            count,
        } => {
            let x = val(*logits);
            let v = x.last_dim();
            let scale = g[0] / T::from_usize_lossy(*count);
            let mut dx = vec![T::zero(); x.numel()];
            for ((row, dr), &t) in x.data().chunks(v).zip(dx.chunks_mut(v)).zip(targets) {
                if t == *ignore_index {
                    continue;
                }
                dr.copy_from_slice(row);
                softmax_row(dr);
                dr[t] -= T::one();
                for e in dr.iter_mut() {
                    *e *= scale;
                }
            }
            charge(FlopKind::Softmax, 7 * count * v);
            vec![Some(dx)]
        }
        Op::Sum { a } => vec![Some(vec![g[0]; val(*a).numel()])],
        Op::Fused { inputs, op } => {
            let mut ctx = BackwardCtx {
                inputs: inputs.iter().map(|v| val(*v)).collect(),
                output: &node.value,
                grad_out: g,
                needs_grad: needs.to_vec(),
                flops,
                alloc,
            };
            op.backward(&mut ctx)?
        }
    };
    for (grad, parent) in out.iter().zip(node.op.parents()) {
        if let Some(d) = grad {
            debug_assert_eq!(d.len(), nodes[parent.0].value.numel(), "gradient shape mismatch");
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
    }
    Ok(out)
}
