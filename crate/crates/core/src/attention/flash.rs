use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardCtx, FlopKind, FusedBackward, Tape, Tensor, Var, MASK_VALUE};

/// Tiled online-softmax attention over `[b, h, n, dh]` inputs.
///
/// Every tile is visited, masked ones included, so the operation count equals
/// the materialized computation. Only the per-row log-sum-exp is kept for the
/// backward pass, which recomputes score tiles.
pub(crate) fn flash_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    tile_q: usize,
    tile_kv: usize,
) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 4 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::shape("flash_attention", &shape, tape.shape(k)));
    }
    let (rows, n, dh) = (shape[0] * shape[1], shape[2], shape[3]);
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let elem = std::mem::size_of::<T>();
    let tq = tile_q.min(n);
    let tk = tile_kv.min(n);

    // Score tile, running statistics and accumulator of one query tile.
    let scratch = (tq * tk + 2 * tq + tq * dh) * elem;
    tape.alloc_scratch(scratch);

    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut out = vec![T::zero(); rows * n * dh];
    let mut lse = vec![T::zero(); rows * n];
    let mut s = vec![T::zero(); tq * tk];
    let mut m = vec![T::zero(); tq];
    let mut l = vec![T::zero(); tq];
    let mut acc = vec![T::zero(); tq * dh];
    let mask = T::lit(MASK_VALUE);

    for r in 0..rows {
        let base = r * n * dh;
        for q0 in (0..n).step_by(tq) {
            let qn = tq.min(n - q0);
            m[..qn].fill(T::neg_infinity());
            l[..qn].fill(T::zero());
            acc[..qn * dh].fill(T::zero());
            for k0 in (0..n).step_by(tk) {
                let kn = tk.min(n - k0);
                for i in 0..qn {
                    let qi = &qd[base + (q0 + i) * dh..base + (q0 + i + 1) * dh];
                    let mut row_max = m[i];
                    for j in 0..kn {
                        let kj = &kd[base + (k0 + j) * dh..base + (k0 + j + 1) * dh];
                        let mut dot = dot(qi, kj) * scale;
                        if k0 + j > q0 + i {
                            dot += mask;
                        }
                        s[i * tk + j] = dot;
                        if dot > row_max {
                            row_max = dot;
                        }
                    }
                    let corr = (m[i] - row_max).exp();
                    let a = &mut acc[i * dh..(i + 1) * dh];
                    for x in a.iter_mut() {
                        *x *= corr;
                    }
                    let mut sum = T::zero();
                    for j in 0..kn {
                        let p = (s[i * tk + j] - row_max).exp();
                        sum += p;
                        let vj = &vd[base + (k0 + j) * dh..base + (k0 + j + 1) * dh];
                        for (x, &vv) in a.iter_mut().zip(vj) {
                            *x += p * vv;
                        }
                    }
                    l[i] = l[i] * corr + sum;
                    m[i] = row_max;
                }
            }
            for i in 0..qn {
                let row = (q0 + i) * dh;
                let inv = T::one() / l[i];
                for c in 0..dh {
                    out[base + row + c] = acc[i * dh + c] * inv;
                }
                lse[r * n + q0 + i] = m[i] + l[i].ln();
            }
        }
    }
    tape.free_scratch(scratch);

    let pairs = (rows * n * n) as u64;
    tape.count(FlopKind::Matmul, pairs * 4 * dh as u64);
    tape.count(FlopKind::Elementwise, pairs * 2);
    tape.count(FlopKind::Softmax, pairs * 5);

    let saved = lse.len() * elem;
    let output = Tensor::new(&shape, out)?;
    tape.fused(
        &[q, k, v],
        output,
        saved,
        Box::new(FlashBackward {
            lse,
            scale,
            tile_q: tq,
            tile_kv: tk,
        }),
    )
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

struct FlashBackward<T> {
    lse: Vec<T>,
    scale: T,
    tile_q: usize,
    tile_kv: usize,
}

impl<T: Scalar> FusedBackward<T> for FlashBackward<T> {
    fn name(&self) -> &'static str {
        "flash_attention"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let shape = ctx.inputs[0].shape();
        let (rows, n, dh) = (shape[0] * shape[1], shape[2], shape[3]);
        let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let od = ctx.output.data();
        let g = ctx.grad_out;
        let (tq, tk) = (self.tile_q, self.tile_kv);
        let elem = std::mem::size_of::<T>();
        let scratch = (2 * tq * tk + tq) * elem;
        ctx.alloc.alloc(scratch);

        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut p = vec![T::zero(); tq * tk];
        let mut ds = vec![T::zero(); tq * tk];
        let mut delta = vec![T::zero(); tq];
        let mask = T::lit(MASK_VALUE);

        for r in 0..rows {
            let base = r * n * dh;
            let at = |i: usize| base + i * dh..base + (i + 1) * dh;
            for q0 in (0..n).step_by(tq) {
                let qn = tq.min(n - q0);
                for i in 0..qn {
                    delta[i] = dot(&g[at(q0 + i)], &od[at(q0 + i)]);
                }
                for k0 in (0..n).step_by(tk) {
                    let kn = tk.min(n - k0);
                    for i in 0..qn {
                        let lse = self.lse[r * n + q0 + i];
                        let gi = &g[at(q0 + i)];
                        for j in 0..kn {
                            let mut sc = dot(&qd[at(q0 + i)], &kd[at(k0 + j)]) * self.scale;
                            if k0 + j > q0 + i {
                                sc += mask;
                            }
                            let pij = (sc - lse).exp();
                            p[i * tk + j] = pij;
                            let dp = dot(gi, &vd[at(k0 + j)]);
                            ds[i * tk + j] = pij * (dp - delta[i]) * self.scale;
                        }
                    }
                    for i in 0..qn {
                        let gi = &g[at(q0 + i)];
                        let qi = &qd[at(q0 + i)];
                        for j in 0..kn {
                            let (pij, dsij) = (p[i * tk + j], ds[i * tk + j]);
                            let kr = at(k0 + j);
                            for c in 0..dh {
                                dv[kr.start + c] += pij * gi[c];
                                dk[kr.start + c] += dsij * qi[c];
                            }
                            let qr = at(q0 + i);
                            for c in 0..dh {
                                dq[qr.start + c] += dsij * kd[kr.start + c];
                            }
                        }
                    }
                }
            }
        }
        ctx.alloc.free(scratch);

        let pairs = (rows * n * n) as u64;
        ctx.count(FlopKind::Matmul, pairs * 10 * dh as u64);
        ctx.count(FlopKind::Softmax, pairs * 4);
        ctx.count(FlopKind::Elementwise, pairs * 4 + (rows * n * 2 * dh) as u64);

        let pick = |need: bool, v: Vec<T>| need.then_some(v);
        Ok(vec![
            pick(ctx.needs_grad[0], dq),
            pick(ctx.needs_grad[1], dk),
            pick(ctx.needs_grad[2], dv),
        ])
    }
}
