use rand_distr::{Distribution, StandardNormal};

use super::AttentionSpec;
use crate::error::Result;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{FlopKind, Tape, Tensor, Var};

/// `[dim, cols]` matrix with orthonormal columns: seeded Gaussian draw,
/// then Gram-Schmidt in f64.
pub fn lsh_rotation<T: Scalar>(dim: usize, cols: usize, seed: u64, name: &str) -> Tensor<T> {
    assert!(cols <= dim, "cannot orthonormalize {cols} columns in {dim} dimensions");
    let mut rng = rng::stream(seed, name);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut data = vec![T::zero(); dim * cols];
    for (c, b) in basis.iter().enumerate() {
        for (r, &x) in b.iter().enumerate() {
            data[r * cols + c] = T::lit(x);
        }
    }
    Tensor::new(&[dim, cols], data).expect("rotation shape")
}

/// Bucket of one vector: index of the first maximum of `[R·x; −R·x]`.
pub fn hash_buckets<T: Scalar>(x: &[T], rotation: &Tensor<T>) -> u32 {
    let cols = rotation.shape()[1];
    let r = rotation.data();
    let mut best = T::neg_infinity();
    let mut arg = 0;
    let proj: Vec<T> = (0..cols)
        .map(|c| x.iter().enumerate().map(|(i, &xi)| xi * r[i * cols + c]).sum())
        .collect();
    for i in 0..2 * cols {
        let p = if i < cols { proj[i] } else { -proj[i - cols] };
        if p > best {
            best = p;
            arg = i;
        }
    }
    arg as u32
}

/// Buckets of every key position, laid out `[round][row][n]`.
pub(crate) fn hash_keys<T: Scalar>(tape: &mut Tape<T>, k: Var, rotations: &[Var], spec: &AttentionSpec) -> Result<Vec<u32>> {
    let shape = tape.shape(k).to_vec();
    let (rows, n, dh) = (shape[0] * shape[1], shape[2], shape[3]);
    if spec.n_buckets < 2 {
        return Ok(vec![0; spec.n_rounds * rows * n]);
    }
    let kd = tape.value(k).data();
    let mut out = Vec::with_capacity(spec.n_rounds * rows * n);
    for &rot in rotations {
        let rot = tape.value(rot);
        for key in kd.chunks(dh) {
            out.push(hash_buckets(key, rot));
        }
    }
    let positions = (rotations.len() * rows * n) as u64;
    let nb = spec.n_buckets as u64;
    tape.count(FlopKind::Matmul, positions * dh as u64 * nb);
    tape.count(FlopKind::Elementwise, positions * 3 * nb / 2);
    Ok(out)
}
