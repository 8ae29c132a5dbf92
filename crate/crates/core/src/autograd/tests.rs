use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients, DEFAULT_STEP};

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// Reduces an arbitrary tensor to a scalar with non-uniform weights so that
/// every output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = rand_t(&g.value(y).shape().to_vec(), seed);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn assert_fd(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let r = check_gradients(inputs, DEFAULT_STEP, f).unwrap();
    assert!(r.max_rel_err < TOL, "finite-difference mismatch: {r:?}");
}

#[test]
fn matmul_identity_and_selector() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(y), g.value(m));

    let sel = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let col = g.constant(Tensor::from_rows(&[&[5.0], &[7.0]]));
    let y = g.matmul(sel, col).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    assert!(g.matmul_t(a, b).is_ok());
}

#[test]
fn matmul_gradients_match_finite_differences() {
    assert_fd(&[rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        g.sum(y)
    });
    assert_fd(&[rand_t(&[3, 4], 3), rand_t(&[5, 4], 4)], |g, v| {
        let y = g.matmul_t(v[0], v[1])?;
        weighted_sum(g, y, 5)
    });
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::from_rows(&[&[1000.0, 0.0]]));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).is_finite());
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[1] < 1e-300);

    // direct evaluation oracle
    let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
    let y = g.softmax(x).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((g.value(y).data()[k] - v.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&[2, 3], 9));
    let mask: Arc<[bool]> = vec![true, false, true, false, false, true].into();
    let y = g.masked_softmax(x, mask).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!((v[3], v[4], v[5]), (0.0, 0.0, 1.0));
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_gradients_match_finite_differences() {
    assert_fd(&[rand_t(&[3, 5], 11)], |g, v| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, 12)
    });
    let mask: Arc<[bool]> = (0..15).map(|i| i % 4 != 1).collect::<Vec<_>>().into();
    assert_fd(&[rand_t(&[3, 5], 13)], move |g, v| {
        let y = g.masked_softmax(v[0], mask.clone())?;
        weighted_sum(g, y, 14)
    });
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::full([3], 1.0));
    let bias = g.constant(Tensor::zeros([3]));
    let x = g.constant(Tensor::from_rows(&[&[5.0, 5.0, 5.0]]));
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let gain = g.constant(Tensor::full([2], 1.0));
    let bias = g.constant(Tensor::zeros([2]));
    let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0]]));
    let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    assert_fd(&[rand_t(&[3, 6], 21), rand_t(&[6], 22), rand_t(&[6], 23)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        weighted_sum(g, y, 24)
    });
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&[4, 3], 30));
    let mut k = Tensor::zeros([1, 3, 3]);
    for i in 0..3 {
        k.data_mut()[i * 3 + i] = 1.0;
    }
    let k = g.constant(k);
    let y = g.conv1d(x, k, 1, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x = g.constant(Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = g.constant(Tensor::new([2, 1, 1], vec![0.5, 0.5]).unwrap());
    let y = g.conv1d(x, k, 2, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, 3.5]);
}

#[test]
fn conv1d_rejects_short_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2, 1]));
    let k = g.constant(Tensor::zeros([2, 1, 1]));
    assert!(matches!(g.conv1d(x, k, 1, 2), Err(Error::DegenerateInput { .. })));
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    assert_fd(&[rand_t(&[9, 3], 31), rand_t(&[3, 3, 2], 32)], |g, v| {
        let y = g.conv1d(v[0], v[1], 1, 2)?;
        weighted_sum(g, y, 33)
    });
    assert_fd(&[rand_t(&[8, 2], 34), rand_t(&[3, 2, 4], 35)], |g, v| {
        let y = g.conv1d(v[0], v[1], 3, 1)?;
        weighted_sum(g, y, 36)
    });
}

#[test]
fn conv_transpose_inverts_shape_and_matches_fd() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&[3, 2], 40));
    let k = g.constant(rand_t(&[3, 2, 2], 41));
    let y = g.conv_transpose1d(x, k, 3).unwrap();
    assert_eq!(g.value(y).shape(), &[9, 2]);
    assert_fd(&[rand_t(&[3, 2], 42), rand_t(&[2, 2, 3], 43)], |g, v| {
        let y = g.conv_transpose1d(v[0], v[1], 2)?;
        weighted_sum(g, y, 44)
    });
}

#[test]
fn pool1d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([2, 1], vec![2.0, 4.0]).unwrap());
    let mean = g.pool1d(x, PoolKind::Mean, 2, 2).unwrap();
    let max = g.pool1d(x, PoolKind::Max, 2, 2).unwrap();
    assert_eq!(g.value(mean).data(), &[3.0]);
    assert_eq!(g.value(max).data(), &[4.0]);
    for kind in [PoolKind::Mean, PoolKind::Max] {
        let y = g.pool1d(x, kind, 1, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
    assert!(matches!(
        g.pool1d(x, PoolKind::Mean, 3, 3),
        Err(Error::DegenerateInput { .. })
    ));
}

#[test]
fn max_pool_routes_gradient_to_first_maximum() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new([3, 1], vec![7.0, 7.0, 1.0]).unwrap());
    let y = g.pool1d(x, PoolKind::Max, 3, 3).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn pool_gradients_match_finite_differences() {
    for kind in [PoolKind::Mean, PoolKind::Max] {
        assert_fd(&[rand_t(&[7, 3], 50)], |g, v| {
            let y = g.pool1d(v[0], kind, 3, 2)?;
            weighted_sum(g, y, 51)
        });
    }
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(2.0));
    let w = g.variable(Tensor::scalar(3.0));
    let sx = g.stop_gradient(x);
    let y = g.mul(sx, w).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(x).is_none(), "d y / d x must be exactly zero");
    assert_eq!(g.grad(w).unwrap().item(), 2.0);

    // nested stop_gradient behaves like a single one
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(2.0));
    let w = g.variable(Tensor::scalar(3.0));
    let s1 = g.stop_gradient(x);
    let s2 = g.stop_gradient(s1);
    let y = g.mul(s2, w).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.value(s2), g.value(x));
    assert_eq!(g.grad(w).unwrap().item(), 2.0);
}

#[test]
fn backward_examples_and_accumulation() {
    let mut g = Graph::<f64>::new();
    let w = g.variable(rand_t(&[2, 3], 60));
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0; 6]);
    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0; 6]);
    g.zero_grads();
    assert!(g.grad(w).is_none());

    let mut g = Graph::<f64>::new();
    let w = g.variable(Tensor::scalar(3.0));
    let y = g.mul(w, w).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(w).unwrap().item(), 6.0);
}

#[test]
fn backward_from_non_scalar_is_contract_error() {
    let mut g = Graph::<f64>::new();
    let w = g.variable(Tensor::zeros([2]));
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn remaining_ops_match_finite_differences() {
    // gelu, add_row, scale, sub, concat/slice, gather, select, norm, cross-entropy
    assert_fd(&[rand_t(&[3, 4], 70), rand_t(&[4], 71)], |g, v| {
        let a = g.add_row(v[0], v[1])?;
        let a = g.gelu(a)?;
        let a = g.scale(a, 1.7)?;
        let b = g.sub(a, v[0])?;
        weighted_sum(g, b, 72)
    });
    assert_fd(&[rand_t(&[3, 4], 73), rand_t(&[2, 4], 74)], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]])?;
        let s = g.slice_rows(c, 1, 3)?;
        let s = g.slice_cols(s, 1, 2)?;
        let t = g.concat_cols(&[s, s])?;
        weighted_sum(g, t, 75)
    });
    let index: Arc<[usize]> = vec![0, 2, 2, 1, 3, 0].into();
    assert_fd(&[rand_t(&[2, 4], 76)], move |g, v| {
        let y = g.gather_cols(v[0], index.clone(), 3)?;
        let z = g.select_rows(y, &[1, 0, 1])?;
        weighted_sum(g, z, 77)
    });
    assert_fd(&[rand_t(&[3, 3], 78)], |g, v| g.norm(v[0]));
    assert_fd(&[rand_t(&[4, 5], 79)], |g, v| {
        g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)], Reduction::Mean)
    });
    assert_fd(&[rand_t(&[4, 5], 80)], |g, v| {
        g.cross_entropy(v[0], &[Some(2), Some(3), None, Some(0)], Reduction::Sum)
    });
}

#[test]
fn norm_at_origin_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros([2, 2]));
    let n = g.norm(x).unwrap();
    g.backward(n).unwrap();
    assert_eq!(g.value(n).item(), 0.0);
    assert_eq!(g.grad(x).unwrap().data(), &[0.0; 4]);
}

#[test]
fn results_are_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let a = g.variable(Tensor::uniform([16, 24], -1.0, 1.0, &mut rng(5)));
        let b = g.variable(Tensor::uniform([24, 8], -1.0, 1.0, &mut rng(6)));
        let y = g.matmul(a, b).unwrap();
        let y = g.softmax(y).unwrap();
        let s = g.norm(y).unwrap();
        g.backward(s).unwrap();
        (g.value(y).clone(), g.grad(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new([3, 4], vals).unwrap());
            let y = g.softmax(x).unwrap();
            for i in 0..3 {
                let row = g.value(y).row(i);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 5), shift in -100.0f64..100.0) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new([1, 5], vals.clone()).unwrap());
            let xs = g.constant(Tensor::new([1, 5], vals.iter().map(|v| v + shift).collect()).unwrap());
            let (a, b) = (g.softmax(x).unwrap(), g.softmax(xs).unwrap());
            for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
