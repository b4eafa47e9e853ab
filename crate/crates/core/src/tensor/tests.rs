use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, v).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_counts_two_flops_per_mac() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::full(&[2, 3], 1.0));
    let b = tape.constant(Tensor::full(&[3, 4], 1.0));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 4]);
    assert_eq!(tape.flops().total(), 48);
    assert_eq!(tape.flops().kind(FlopKind::Matmul), 48);
}

#[test]
fn matmul_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::<f32>::randn(&[4, 4], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[4, 4], 1.0, &mut rng);
    let expect = naive_matmul(&a.to_f64_vec(), &b.to_f64_vec(), 4, 4, 4);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    for (got, want) in tape.value(c).to_f64_vec().iter().zip(&expect) {
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn matmul_batched_and_transposed_agree_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul_nt(av, bv).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 5]);
    for bi in 0..2 {
        let ad = &a.data()[bi * 12..(bi + 1) * 12];
        let bd = &b.data()[bi * 20..(bi + 1) * 20];
        // transpose 5×4 → 4×5
        let mut bt = vec![0.0; 20];
        for r in 0..5 {
            for c in 0..4 {
                bt[c * 5 + r] = bd[r * 4 + c];
            }
        }
        let want = naive_matmul(ad, &bt, 3, 4, 5);
        let got = &tape.value(c).data()[bi * 15..(bi + 1) * 15];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[2, 2], &[0.0, 0.0, 1.0, 0.0]));
    let y = tape.softmax_lastdim(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    let e = std::f64::consts::E;
    assert!((v[2] as f64 - e / (e + 1.0)).abs() < 1e-4);
    assert!((v[2] - 0.73106).abs() < 1e-4 && (v[3] - 0.26894).abs() < 1e-4);
}

#[test]
fn softmax_is_shift_invariant_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f32>::randn(&[3, 7], 2.0, &mut rng);
    let shifted = Tensor::new(&[3, 7], x.data().iter().map(|v| v + 12.5).collect()).unwrap();
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x), tape.constant(shifted));
    let (ya, yb) = (tape.softmax_lastdim(a).unwrap(), tape.softmax_lastdim(b).unwrap());
    assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-6);
    for row in tape.value(ya).data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

fn ln_apply(x: Tensor<f32>, eps: f32) -> crate::Result<Tensor<f32>> {
    let d = x.last_dim();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[d], 1.0));
    let b = tape.constant(Tensor::zeros(&[d]));
    let y = tape.layernorm(xv, g, b, eps)?;
    Ok(tape.value(y).clone())
}

#[test]
fn layernorm_examples() {
    let y = ln_apply(t32(&[3], &[5.0, 5.0, 5.0]), 1e-5).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    let y = ln_apply(t32(&[2], &[1.0, -1.0]), 1e-12).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);
    assert!(matches!(ln_apply(t32(&[2], &[1.0, 2.0]), 0.0), Err(Error::InvalidArgument { .. })));
}

#[test]
fn layernorm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::randn(&[4, 9], 3.0, &mut rng);
    let y = ln_apply(x.clone(), 1e-5).unwrap();
    for (xr, yr) in x.to_f64_vec().chunks(9).zip(y.to_f64_vec().chunks(9)) {
        let mean = xr.iter().sum::<f64>() / 9.0;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        for (a, b) in xr.iter().zip(yr) {
            assert!(((a - mean) / (var + 1e-5).sqrt() - b).abs() <= 1e-5);
        }
        let ym = yr.iter().sum::<f64>() / 9.0;
        let yv = yr.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / 9.0;
        assert!(ym.abs() < 1e-5 && (yv - 1.0).abs() < 1e-3);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[2, 3], 0.7).with_grad());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_half_square_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = Tensor::<f32>::randn(&[5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let l = tape.scale(s, 0.5).unwrap();
    tape.backward(l).unwrap();
    for (g, v) in tape.grad(x).unwrap().iter().zip(x0.data()) {
        assert!((g - v).abs() < 1e-6);
    }
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[2], 1.0).with_grad());
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[1], &[-3.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0]);

    let table = tape.constant(t32(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let e = tape.embedding_lookup(table, &[0], &[1]).unwrap();
    assert_eq!(tape.value(e).data(), &[1.0, 2.0]);
    assert!(tape.embedding_lookup(table, &[3], &[1]).is_err());

    let logits = tape.constant(t32(&[1, 2], &[0.0, 0.0]));
    let ce = tape.cross_entropy(logits, &[0], usize::MAX).unwrap();
    assert!((tape.value(ce).data()[0] as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    assert!(matches!(
        tape.cross_entropy(logits, &[usize::MAX], usize::MAX),
        Err(Error::AllTargetsIgnored)
    ));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[1], &[1e30]));
    assert!(matches!(tape.scale(x, 1e30), Err(Error::NonFinite { .. })));
}

#[test]
fn concat_slice_transpose_roundtrip() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t32(&[2, 1], &[9.0, 8.0]));
    let c = tape.concat_lastdim(&[a, b]).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let s = tape.slice_lastdim(c, 1, 2).unwrap();
    assert_eq!(tape.value(s).data(), &[2.0, 9.0, 4.0, 8.0]);
    let t = tape.transpose_last2(s).unwrap();
    assert_eq!(tape.value(t).data(), &[2.0, 4.0, 9.0, 8.0]);
    let h = tape.constant(t32(&[1, 2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]));
    let sh = tape.split_heads(h, 2).unwrap();
    assert_eq!(tape.value(sh).data(), &[0., 1., 4., 5., 2., 3., 6., 7.]);
    let mh = tape.merge_heads(sh).unwrap();
    assert_eq!(tape.value(mh).data(), tape.value(h).data());
}

#[test]
fn flop_total_equals_sum_of_analytic_costs() {
    let (b, n, d, v) = (2usize, 3usize, 4usize, 5usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::randn(&[b, n, d], 1.0, &mut rng).with_grad());
    let w = tape.leaf(Tensor::randn(&[d, v], 1.0, &mut rng).with_grad());
    let g = tape.constant(Tensor::full(&[d], 1.0));
    let bb = tape.constant(Tensor::zeros(&[d]));
    let h = tape.layernorm(x, g, bb, 1e-5).unwrap();
    let h = tape.gelu(h).unwrap();
    let logits = tape.matmul(h, w).unwrap();
    let p = tape.softmax_lastdim(logits).unwrap();
    let s = tape.sum(p).unwrap();
    let expect = 8 * b * n * d + 8 * b * n * d + 2 * b * n * d * v + 5 * b * n * v + b * n * v;
    assert_eq!(tape.flops().total(), expect as u64);
    assert_eq!(tape.flops().forward(), expect as u64);
    tape.backward(s).unwrap();
    assert!(tape.flops().backward() > 0);
    let kinds: u64 = FlopKind::ALL.iter().map(|&k| tape.flops().kind(k)).sum();
    assert_eq!(kinds, tape.flops().total());
}

#[test]
fn peak_bytes_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::randn(&[4, 8], 1.0, &mut rng).with_grad());
        let w = tape.leaf(Tensor::randn(&[8, 8], 1.0, &mut rng).with_grad());
        let y = tape.matmul(x, w).unwrap();
        let y = tape.relu(y).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        (tape.alloc().peak_bytes(), tape.value(s).data().to_vec())
    };
    assert_eq!(run(), run());
}

fn rand_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect()
}

fn assert_gradcheck<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var> + Copy,
{
    for seed in 0..5 {
        let inputs = rand_inputs(shapes, 100 + seed);
        let r = check_gradients(f, &inputs, 1e-3, 1e-3).unwrap();
        assert!(r.passes(1e-3), "{name} seed {seed}: {r:?}");
    }
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    assert_gradcheck("matmul", &[&[2, 3, 4], &[4, 5]], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("matmul_nt_broadcast", &[&[2, 3, 4], &[5, 4]], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("add_broadcast", &[&[2, 3], &[3]], |t, v| {
        let y = t.add(v[0], v[1])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("gelu", &[&[7]], |t, v| {
        let y = t.gelu(v[0])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("relu_scale_addscalar", &[&[6]], |t, v| {
        let y = t.add_scalar(v[0], 0.05)?;
        let y = t.relu(y)?;
        let y = t.scale(y, 1.7)?;
        let y = t.mul(y, v[0])?;
        t.sum(y)
    });
    assert_gradcheck("softmax_mask", &[&[2, 4, 4], &[2, 4, 4]], |t, v| {
        let y = t.causal_mask(v[0])?;
        let y = t.softmax_lastdim(y)?;
        let y = t.mul(y, v[1])?;
        t.sum(y)
    });
    assert_gradcheck("layernorm", &[&[3, 5], &[5], &[5], &[3, 5]], |t, v| {
        let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
        let y = t.mul(y, v[3])?;
        t.sum(y)
    });
    assert_gradcheck("concat_slice_transpose", &[&[2, 3], &[2, 2], &[3, 2]], |t, v| {
        let c = t.concat_lastdim(&[v[0], v[1]])?;
        let s = t.slice_lastdim(c, 1, 3)?;
        let tr = t.transpose_last2(s)?;
        let y = t.mul(tr, v[2])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("heads", &[&[2, 3, 4], &[2, 4, 3, 2]], |t, v| {
        let s = t.split_heads(v[0], 1)?;
        let s = t.repeat_heads(s, 2)?;
        let s = t.merge_heads(s)?;
        let s = t.split_heads(s, 4)?;
        let y = t.mul(s, v[1])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    assert_gradcheck("embedding_cross_entropy", &[&[5, 3], &[3, 5]], |t, v| {
        let e = t.embedding_lookup(v[0], &[1, 4, 1, 0], &[2, 2])?;
        let logits = t.matmul(e, v[1])?;
        t.cross_entropy(logits, &[2, usize::MAX, 0, 4], usize::MAX)
    });
}

#[test]
fn shape_must_match_payload() {
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
    assert_eq!(t.nbytes(), 24);
}

#[test]
fn randn_is_seed_deterministic() {
    let a = Tensor::<f32>::randn(&[4, 4], 0.02, &mut ChaCha8Rng::seed_from_u64(3));
    let b = Tensor::<f32>::randn(&[4, 4], 0.02, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(a, b);
}
