use super::flash::dot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardCtx, FlopKind, FusedBackward, Tape, Tensor, Var};

/// Per-query key lists for one or more rounds over `rows` (batch·head) rows.
///
/// When `shared` is set one plan serves every row.
#[derive(Clone, Debug)]
pub(crate) struct KeyPlan {
    rounds: usize,
    rows: usize,
    n: usize,
    shared: bool,
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

impl KeyPlan {
    pub(crate) fn sliding_window(rows: usize, n: usize, window: usize) -> Self {
        let mut offsets = Vec::with_capacity(n + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for t in 0..n {
            let lo = (t + 1).saturating_sub(window);
            keys.extend((lo..=t).map(|j| j as u32));
            offsets.push(keys.len());
        }
        Self {
            rounds: 1,
            rows,
            n,
            shared: true,
            offsets,
            keys,
        }
    }

    /// `buckets[(round·rows + row)·n + t]` is the bucket of position `t`.
    /// Each position attends to earlier-or-equal positions of its bucket.
    pub(crate) fn from_buckets(buckets: &[u32], rows: usize, n: usize) -> Self {
        let rounds = buckets.len() / (rows * n);
        let mut offsets = Vec::with_capacity(rounds * rows * n + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        let mut order: Vec<usize> = Vec::with_capacity(n);
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); n];
        for block in buckets.chunks(n) {
            order.clear();
            order.extend(0..n);
            order.sort_by_key(|&t| (block[t], t));
            // Walk the sorted order; each bucket's members so far precede t.
            let mut start = 0;
            while start < n {
                let b = block[order[start]];
                let mut end = start;
                while end < n && block[order[end]] == b {
                    end += 1;
                }
                for (pos, &t) in order[start..end].iter().enumerate() {
                    members[t] = order[start..=start + pos].iter().map(|&j| j as u32).collect();
                }
                start = end;
            }
            for m in members.iter_mut() {
                keys.extend_from_slice(m);
                offsets.push(keys.len());
            }
        }
        Self {
            rounds,
            rows,
            n,
            shared: false,
            offsets,
            keys,
        }
    }

    fn query_keys(&self, round: usize, row: usize, t: usize) -> &[u32] {
        let idx = if self.shared { t } else { (round * self.rows + row) * self.n + t };
        &self.keys[self.offsets[idx]..self.offsets[idx + 1]]
    }

    /// Start of a query's probabilities in the saved buffer.
    fn prob_offset(&self, round: usize, row: usize, t: usize) -> usize {
        if self.shared {
            let per_row = self.keys.len();
            (round * self.rows + row) * per_row + self.offsets[t]
        } else {
            self.offsets[(round * self.rows + row) * self.n + t]
        }
    }

    fn total_pairs(&self) -> usize {
        if self.shared {
            self.keys.len() * self.rows * self.rounds
        } else {
            self.keys.len()
        }
    }

    fn nbytes(&self) -> usize {
        self.offsets.len() * std::mem::size_of::<usize>() + self.keys.len() * std::mem::size_of::<u32>()
    }
}

/// Softmax attention restricted to the keys listed in `plan`, averaged over
/// its rounds. Inputs are `[b, h, n, dh]`.
pub(crate) fn indexed_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, plan: KeyPlan) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 4 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::shape("indexed_attention", &shape, tape.shape(k)));
    }
    let (rows, n, dh) = (shape[0] * shape[1], shape[2], shape[3]);
    if plan.rows != rows || plan.n != n {
        return Err(Error::invalid("indexed_attention", "key plan does not match the input shape"));
    }
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let inv_rounds = T::one() / T::from_usize_lossy(plan.rounds);
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut out = vec![T::zero(); rows * n * dh];
    let mut probs = vec![T::zero(); plan.total_pairs()];
    let mut o = vec![T::zero(); dh];

    for round in 0..plan.rounds {
        for r in 0..rows {
            let base = r * n * dh;
            for t in 0..n {
                let keys = plan.query_keys(round, r, t);
                let off = plan.prob_offset(round, r, t);
                let p = &mut probs[off..off + keys.len()];
                let qt = &qd[base + t * dh..base + (t + 1) * dh];
                for (pj, &j) in p.iter_mut().zip(keys) {
                    let j = j as usize;
                    *pj = dot(qt, &kd[base + j * dh..base + (j + 1) * dh]) * scale;
                }
                crate::tensor::softmax_row(p);
                o.fill(T::zero());
                for (&pj, &j) in p.iter().zip(keys) {
                    let j = j as usize;
                    for (x, &vv) in o.iter_mut().zip(&vd[base + j * dh..base + (j + 1) * dh]) {
                        *x += pj * vv;
                    }
                }
                let dst = &mut out[base + t * dh..base + (t + 1) * dh];
                if plan.rounds == 1 {
                    dst.copy_from_slice(&o);
                } else {
                    for (x, &y) in dst.iter_mut().zip(&o) {
                        *x += y * inv_rounds;
                    }
                }
            }
        }
    }

    let pairs = plan.total_pairs() as u64;
    tape.count(FlopKind::Matmul, pairs * 4 * dh as u64);
    tape.count(FlopKind::Elementwise, pairs);
    tape.count(FlopKind::Softmax, pairs * 5);
    if plan.rounds > 1 {
        tape.count(FlopKind::Elementwise, (plan.rounds * rows * n * 2 * dh) as u64);
    }

    let saved = probs.len() * std::mem::size_of::<T>() + plan.nbytes();
    let output = Tensor::new(&shape, out)?;
    tape.fused(&[q, k, v], output, saved, Box::new(IndexedBackward { plan, probs, scale }))
}

struct IndexedBackward<T> {
    plan: KeyPlan,
    probs: Vec<T>,
    scale: T,
}

impl<T: Scalar> FusedBackward<T> for IndexedBackward<T> {
    fn name(&self) -> &'static str {
        "indexed_attention"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let shape = ctx.inputs[0].shape();
        let (rows, n, dh) = (shape[0] * shape[1], shape[2], shape[3]);
        let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let plan = &self.plan;
        let inv_rounds = T::one() / T::from_usize_lossy(plan.rounds);
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp: Vec<T> = Vec::new();
        let mut go = vec![T::zero(); dh];

        for round in 0..plan.rounds {
            for r in 0..rows {
                let base = r * n * dh;
                for t in 0..n {
                    let keys = plan.query_keys(round, r, t);
                    let off = plan.prob_offset(round, r, t);
                    let p = &self.probs[off..off + keys.len()];
                    for (x, &y) in go.iter_mut().zip(&ctx.grad_out[base + t * dh..base + (t + 1) * dh]) {
                        *x = y * inv_rounds;
                    }
                    dp.clear();
                    let mut weighted = T::zero();
                    for (&pj, &j) in p.iter().zip(keys) {
                        let j = j as usize;
                        let d = dot(&go, &vd[base + j * dh..base + (j + 1) * dh]);
                        weighted += pj * d;
                        dp.push(d);
                    }
                    let qt = base + t * dh;
                    for ((&pj, &j), &d) in p.iter().zip(keys).zip(&dp) {
                        let j = base + j as usize * dh;
                        let ds = pj * (d - weighted) * self.scale;
                        for c in 0..dh {
                            dv[j + c] += pj * go[c];
                            dk[j + c] += ds * qd[qt + c];
                            dq[qt + c] += ds * kd[j + c];
                        }
                    }
                }
            }
        }

        let pairs = plan.total_pairs() as u64;
        ctx.count(FlopKind::Matmul, pairs * 8 * dh as u64);
        ctx.count(FlopKind::Softmax, pairs * 4);
        ctx.count(FlopKind::Elementwise, pairs + (plan.rounds * rows * n * dh) as u64);

        Ok(vec![
            ctx.needs_grad[0].then_some(dq),
            ctx.needs_grad[1].then_some(dk),
            ctx.needs_grad[2].then_some(dv),
        ])
    }
}
