use super::flash::dot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardCtx, FlopKind, FusedBackward, Tape, Tensor, Var};

/// Causal prefix-sum kernel over feature-mapped `[b, h, n, dh]` inputs:
/// `o_t = (a_tᵀ S_t) / (a_t · z_t + eps)` with `S_t = Σ_{s≤t} b_s v_sᵀ`,
/// `z_t = Σ_{s≤t} b_s`.
pub(crate) fn causal_linear_attention<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, v: Var, eps: T) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 4 || tape.shape(b) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::shape("linear_attention", &shape, tape.shape(b)));
    }
    let (rows, n, dh) = (shape[0] * shape[1], shape[2], shape[3]);
    let elem = std::mem::size_of::<T>();
    let scratch = (dh * dh + dh) * elem;
    tape.alloc_scratch(scratch);

    let (ad, bd, vd) = (tape.value(a).data(), tape.value(b).data(), tape.value(v).data());
    let mut out = vec![T::zero(); rows * n * dh];
    let mut den = vec![T::zero(); rows * n];
    let mut s = vec![T::zero(); dh * dh];
    let mut z = vec![T::zero(); dh];
    for r in 0..rows {
        s.fill(T::zero());
        z.fill(T::zero());
        for t in 0..n {
            let at = (r * n + t) * dh;
            let (at_, bt, vt) = (&ad[at..at + dh], &bd[at..at + dh], &vd[at..at + dh]);
            for i in 0..dh {
                z[i] += bt[i];
                for j in 0..dh {
                    s[i * dh + j] += bt[i] * vt[j];
                }
            }
            let d = dot(at_, &z) + eps;
            den[r * n + t] = d;
            let o = &mut out[at..at + dh];
            for i in 0..dh {
                for j in 0..dh {
                    o[j] += at_[i] * s[i * dh + j];
                }
            }
            for x in o.iter_mut() {
                *x /= d;
            }
        }
    }
    tape.free_scratch(scratch);

    let tokens = (rows * n) as u64;
    let dh64 = dh as u64;
    tape.count(FlopKind::Matmul, tokens * 4 * dh64 * dh64);
    tape.count(FlopKind::Elementwise, tokens * (4 * dh64 + 1));

    let saved = den.len() * elem;
    let output = Tensor::new(&shape, out)?;
    tape.fused(&[a, b, v], output, saved, Box::new(LinearBackward { den }))
}

struct LinearBackward<T> {
    den: Vec<T>,
}

impl<T: Scalar> FusedBackward<T> for LinearBackward<T> {
    fn name(&self) -> &'static str {
        "linear_attention"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>> {
        let shape = ctx.inputs[0].shape();
        let (rows, n, dh) = (shape[0] * shape[1], shape[2], shape[3]);
        let (ad, bd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let od = ctx.output.data();
        let g = ctx.grad_out;
        let elem = std::mem::size_of::<T>();
        let scratch = (rows * n * (dh + 1) + dh * dh + dh) * elem;
        ctx.alloc.alloc(scratch);

        let mut da = vec![T::zero(); ad.len()];
        let mut db = vec![T::zero(); bd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        // dL/dnum_t and dL/dden_t for every token.
        let mut dnum = vec![T::zero(); ad.len()];
        let mut dden = vec![T::zero(); rows * n];
        let mut s = vec![T::zero(); dh * dh];
        let mut z = vec![T::zero(); dh];

        for r in 0..rows {
            s.fill(T::zero());
            z.fill(T::zero());
            for t in 0..n {
                let at = (r * n + t) * dh;
                let (bt, vt) = (&bd[at..at + dh], &vd[at..at + dh]);
                for i in 0..dh {
                    z[i] += bt[i];
                    for j in 0..dh {
                        s[i * dh + j] += bt[i] * vt[j];
                    }
                }
                let d = self.den[r * n + t];
                for j in 0..dh {
                    dnum[at + j] = g[at + j] / d;
                }
                let dd = -dot(&g[at..at + dh], &od[at..at + dh]) / d;
                dden[r * n + t] = dd;
                for i in 0..dh {
                    let mut acc = dd * z[i];
                    for j in 0..dh {
                        acc += s[i * dh + j] * dnum[at + j];
                    }
                    da[at + i] = acc;
                }
            }
            // Reverse sweep: u = Σ_{t≥s} a_t dnum_tᵀ, w = Σ_{t≥s} dden_t a_t.
            let (u, w) = (&mut s, &mut z);
            u.fill(T::zero());
            w.fill(T::zero());
            for t in (0..n).rev() {
                let at = (r * n + t) * dh;
                let a_t = &ad[at..at + dh];
                let dd = dden[r * n + t];
                for i in 0..dh {
                    w[i] += dd * a_t[i];
                    for j in 0..dh {
                        u[i * dh + j] += a_t[i] * dnum[at + j];
                    }
                }
                let (bt, vt) = (&bd[at..at + dh], &vd[at..at + dh]);
                for i in 0..dh {
                    let mut acc = w[i];
                    for j in 0..dh {
                        acc += u[i * dh + j] * vt[j];
                        dv[at + j] += u[i * dh + j] * bt[i];
                    }
                    db[at + i] = acc;
                }
            }
        }
        ctx.alloc.free(scratch);

        let tokens = (rows * n) as u64;
        let dh64 = dh as u64;
        ctx.count(FlopKind::Matmul, tokens * 10 * dh64 * dh64);
        ctx.count(FlopKind::Elementwise, tokens * (9 * dh64 + 1));

        Ok(vec![
            ctx.needs_grad[0].then_some(da),
            ctx.needs_grad[1].then_some(db),
            ctx.needs_grad[2].then_some(dv),
        ])
    }
}
