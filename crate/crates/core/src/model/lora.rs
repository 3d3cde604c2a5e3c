//! Low-rank adaptation on plain tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(w0: &Tensor, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let [d_out, d_in] = w0.shape() else {
        return Err(Error::shape("W0 must be a matrix"));
    };
    let (&[ra, ia], &[ob, rb]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("A and B must be matrices"));
    };
    if ra != rb || ia != *d_in || ob != *d_out {
        return Err(Error::shape(format!(
            "LoRA factors A {:?} B {:?} incompatible with W0 {:?}",
            a.shape(),
            b.shape(),
            w0.shape()
        )));
    }
    Ok((*d_out, *d_in, ra))
}

/// `W0·x + (alpha/r)·B·(A·x)`.
pub fn lora_apply(w0: &Tensor, a: &Tensor, b: &Tensor, x: &[f32], alpha: f32, r: usize) -> Result<Vec<f32>> {
    let (d_out, d_in, rank) = check(w0, a, b)?;
    if rank != r {
        return Err(Error::shape(format!("rank {r} given, factors have rank {rank}")));
    }
    if x.len() != d_in {
        return Err(Error::shape(format!("x has {} entries, W0 expects {d_in}", x.len())));
    }
    let scale = alpha / r as f32;
    let ax: Vec<f32> = (0..rank).map(|k| dot(a.row(k), x)).collect();
    Ok((0..d_out)
        .map(|o| dot(w0.row(o), x) + scale * dot(b.row(o), &ax))
        .collect())
}

/// `W0 + (alpha/r)·B·A`.
pub fn merge(w0: &Tensor, a: &Tensor, b: &Tensor, alpha: f32, r: usize) -> Result<Tensor> {
    let (d_out, d_in, rank) = check(w0, a, b)?;
    if rank != r {
        return Err(Error::shape(format!("rank {r} given, factors have rank {rank}")));
    }
    let scale = alpha / r as f32;
    let mut out = w0.clone();
    for o in 0..d_out {
        for i in 0..d_in {
            let delta: f32 = (0..rank).map(|k| b.at(o, k) * a.at(k, i)).sum();
            out.data_mut()[o * d_in + i] += scale * delta;
        }
    }
    Ok(out)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;

    #[test]
    fn zero_b_is_base_product() {
        let w0 = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = Tensor::matrix(1, 2, vec![5.0, 6.0]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        assert_eq!(lora_apply(&w0, &a, &b, &[1.0, 1.0], 2.0, 1).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn rank_one_hand_case() {
        let w0 = Tensor::zeros(&[2, 2]);
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(lora_apply(&w0, &a, &b, &[3.0, 4.0], 1.0, 1).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn rank_mismatch_is_shape_error() {
        let w0 = Tensor::zeros(&[2, 2]);
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 1]);
        assert!(matches!(lora_apply(&w0, &a, &b, &[1.0, 1.0], 1.0, 1), Err(Error::Shape(_))));
        let b2 = Tensor::zeros(&[2, 2]);
        assert!(matches!(lora_apply(&w0, &a, &b2, &[1.0, 1.0], 1.0, 1), Err(Error::Shape(_))));
    }

    fn random(seed: u64, label: &str, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, SeedTree::new(seed).normal_vec(label, 0, rows * cols, 1.0)).unwrap()
    }

    proptest! {
        #[test]
        fn merged_equals_factored(seed in 0u64..10_000, d_in in 1usize..=16, d_out in 1usize..=16, r in 1usize..=16, alpha in 0.5f32..32.0) {
            let w0 = random(seed, "w0", d_out, d_in);
            let a = random(seed, "a", r, d_in);
            let b = random(seed, "b", d_out, r);
            let x = SeedTree::new(seed).normal_vec("x", 0, d_in, 1.0);
            let factored = lora_apply(&w0, &a, &b, &x, alpha, r).unwrap();
            let merged = merge(&w0, &a, &b, alpha, r).unwrap();
            let norm = factored.iter().map(|v| v * v).sum::<f32>().sqrt().max(1.0);
            for o in 0..d_out {
                let m = dot(merged.row(o), &x);
                prop_assert!((m - factored[o]).abs() <= 1e-5 * norm, "{m} vs {}", factored[o]);
            }
        }
    }
}
