use absa_core::gradcheck::{check_inputs, DEFAULT_STEP};
use absa_core::tensor::{layer_norm, logsumexp, matmul, softmax, Graph, Tensor};
use absa_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.dims2().unwrap().1;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, k, n) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    match matmul(&a, &b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

type Loss = fn(&mut Graph, &[absa_core::tensor::Var]) -> absa_core::Result<absa_core::tensor::Var>;

fn gradcheck(shapes: &[&[usize]], f: Loss) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
    let err = check_inputs(&inputs, f, DEFAULT_STEP).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

// Each check reduces the op's output to a scalar with a fixed random
// weighting, so every output coordinate reaches the loss.
fn weighted_sum(g: &mut Graph, x: absa_core::tensor::Var) -> absa_core::Result<absa_core::tensor::Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect())?;
    let w = g.constant(w);
    g.dot(x, w)
}

#[test]
fn gradient_matmul() {
    gradcheck(&[&[3, 4], &[4, 2]], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y)
    });
}

#[test]
fn gradient_elementwise() {
    gradcheck(&[&[2, 3], &[2, 3]], |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        let s = g.sub(m, v[0])?;
        let s = g.scale(s, 1.7);
        weighted_sum(g, s)
    });
}

#[test]
fn gradient_add_row() {
    gradcheck(&[&[3, 4], &[4]], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        weighted_sum(g, y)
    });
}

#[test]
fn gradient_gelu() {
    gradcheck(&[&[2, 5]], |g, v| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y)
    });
}

#[test]
fn gradient_softmax_both_axes() {
    gradcheck(&[&[3, 4]], |g, v| {
        let a = g.softmax(v[0], 1)?;
        let b = g.softmax(v[0], 0)?;
        let s = g.add(a, b)?;
        weighted_sum(g, s)
    });
}

#[test]
fn gradient_logsumexp() {
    gradcheck(&[&[3, 4]], |g, v| {
        let y = g.logsumexp(v[0], 1)?;
        weighted_sum(g, y)
    });
}

#[test]
fn gradient_layer_norm() {
    gradcheck(&[&[3, 5], &[5], &[5]], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y)
    });
}

#[test]
fn gradient_structural_ops() {
    gradcheck(&[&[4, 6]], |g, v| {
        let t = g.transpose(v[0])?;
        let t = g.reshape(t, vec![4, 6])?;
        let a = g.slice_cols(t, 1, 3)?;
        let b = g.slice_cols(t, 4, 2)?;
        let c = g.concat_cols(&[b, a])?;
        let r = g.select_rows(c, &[3, 0, 3])?;
        weighted_sum(g, r)
    });
}

#[test]
fn gradient_embedding_lookup() {
    gradcheck(&[&[5, 3]], |g, v| {
        let e = g.embedding_lookup(v[0], &[4, 1, 1, 0])?;
        weighted_sum(g, e)
    });
}

#[test]
fn gradient_cross_entropy_and_scalar_sum() {
    gradcheck(&[&[1, 3], &[2, 2]], |g, v| {
        let ce = g.cross_entropy(v[0], 2)?;
        let s = g.sum(v[1]);
        g.add_scalars(&[ce, s, ce])
    });
}

#[test]
fn gradient_attention_pattern() {
    // scores = softmax(Q Kᵀ / √d + mask) V with one masked key column.
    gradcheck(&[&[3, 4], &[3, 4], &[3, 2]], |g, v| {
        let kt = g.transpose(v[1])?;
        let s = g.matmul(v[0], kt)?;
        let s = g.scale(s, 0.5);
        let row = [0.0, 0.0, f64::NEG_INFINITY];
        let mask = g.constant(Tensor::new(vec![3, 3], row.repeat(3))?);
        let s = g.add(s, mask)?;
        let p = g.softmax(s, 1)?;
        let o = g.matmul(p, v[2])?;
        weighted_sum(g, o)
    });
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in small_matrix(4, 5)) {
        let p = softmax(&x, 1).unwrap();
        for r in 0..4 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in small_matrix(2, 6), c in -50.0f64..50.0) {
        let shifted = Tensor::new(vec![2, 6], x.data().iter().map(|v| v + c).collect()).unwrap();
        let d = softmax(&x, 1).unwrap().max_abs_diff(&softmax(&shifted, 1).unwrap());
        prop_assert!(d < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive(x in small_matrix(3, 4)) {
        let l = logsumexp(&x, 1).unwrap();
        for r in 0..3 {
            let naive = x.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
            prop_assert!((l.data()[r] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(x in small_matrix(3, 8)) {
        let ones = Tensor::full(&[8], 1.0);
        let zeros = Tensor::zeros(&[8]);
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - row.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let mean: f64 = y.row(r).iter().sum::<f64>() / 8.0;
            let var: f64 = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_survives_large_logits() {
    let x = Tensor::new(vec![1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap();
    let p = softmax(&x, 1).unwrap();
    assert!((p.data()[0] - 0.5).abs() < 1e-12);
    assert_eq!(p.data()[2], 0.0);
}
