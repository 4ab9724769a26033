use super::Tensor;
use crate::error::Error;
use crate::gradcheck::finite_difference_check;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::param(data, shape).unwrap()
}

#[test]
fn matmul_identity() {
    let i2 = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
    let c = i2.matmul(&b).unwrap();
    assert_eq!(c.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_case() {
    let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = Tensor::new(vec![3.0, 4.0], &[2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.to_vec(), vec![11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::new(vec![0.0; 6], &[2, 3]).unwrap();
    let b = Tensor::new(vec![0.0; 8], &[4, 2]).unwrap();
    match a.matmul(&b) {
        Err(Error::DimensionMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, &[5, 7]);
    let b = randn(&mut rng, &[7, 3]);
    let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
    let report =
        finite_difference_check(&params, || Ok(a.matmul(&b)?.sum()), 1e-6).unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn softmax_symmetry() {
    let x = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
    let y = x.softmax_rows().unwrap();
    assert_eq!(y.to_vec(), vec![0.5, 0.5]);
}

#[test]
fn softmax_large_input_no_overflow() {
    let x = Tensor::new(vec![1000.0, 0.0], &[2]).unwrap();
    let y = x.softmax_rows().unwrap().to_vec();
    assert!(y[0] > 0.999_999 && y[0] <= 1.0);
    assert!(y[1] >= 0.0 && y[1] < 1e-6);
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_matches_brute_force() {
    let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let y = x.softmax_rows().unwrap().to_vec();
    // Independent exp/sum evaluation.
    let exps = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
    let sum: f64 = exps.iter().sum();
    for (a, e) in y.iter().zip(exps.iter()) {
        assert!((a - e / sum).abs() < 1e-12);
    }
}

#[test]
fn softmax_nan_input_is_error() {
    let x = Tensor::new(vec![f64::NAN, 0.0], &[2]).unwrap();
    assert!(matches!(x.softmax_rows(), Err(Error::NonFinite(_))));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = randn(&mut rng, &[4, 6]);
        let y = x.softmax_rows().unwrap().to_vec();
        for r in 0..4 {
            let s: f64 = y[r * 6..(r + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn relu_basic() {
    let x = Tensor::new(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
    assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn relu_all_negative_zero_output_and_grad() {
    let x = Tensor::param(vec![-1.0, -2.0, -3.0], &[3]).unwrap();
    let y = x.relu();
    assert_eq!(y.to_vec(), vec![0.0; 3]);
    y.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[4, 5]);
    let params = vec![("x".to_string(), x.clone())];
    let report = finite_difference_check(&params, || Ok(x.relu().sum()), 1e-6).unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn cross_entropy_uniform_two_way() {
    let logits = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
    let loss = logits.cross_entropy(&[0]).unwrap().item().unwrap();
    assert!((loss - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_target_near_zero() {
    let logits = Tensor::new(vec![1e6, 0.0, 0.0], &[1, 3]).unwrap();
    let loss = logits.cross_entropy(&[0]).unwrap().item().unwrap();
    assert!(loss.abs() < 1e-9);
}

#[test]
fn cross_entropy_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets = [3usize, 0, 9, 7];
    let logits = Tensor::new(data.clone(), &[4, 10]).unwrap();
    let loss = logits.cross_entropy(&targets).unwrap().item().unwrap();
    // Direct oracle: -mean log(exp(x_t)/sum exp(x_j)) without max shifting.
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &data[r * 10..(r + 1) * 10];
        let sum: f64 = row.iter().map(|x| x.exp()).sum();
        expected += -(row[t].exp() / sum).ln();
    }
    expected /= 4.0;
    assert!((loss - expected).abs() < 1e-10);
}

#[test]
fn cross_entropy_out_of_range_target() {
    let logits = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
    assert!(matches!(
        logits.cross_entropy(&[2]),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::param(vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0], &[2, 3]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_quadratic() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_non_scalar_is_error() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.relu();
    assert!(matches!(y.backward(), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_across_calls() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let loss = x.sum();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn shared_input_accumulates_both_paths() {
    let x = Tensor::param(vec![3.0], &[1]).unwrap();
    // loss = x*x + x  => dloss/dx = 2x + 1 = 7
    let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![7.0]);
}

#[test]
fn composite_ops_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&mut rng, &[3, 4]);
    let w = randn(&mut rng, &[4, 4]);
    let gamma = Tensor::param(vec![1.0; 4], &[4]).unwrap();
    let beta = Tensor::param(vec![0.0; 4], &[4]).unwrap();
    let bias = randn(&mut rng, &[4]);
    let params = vec![
        ("x".to_string(), x.clone()),
        ("w".to_string(), w.clone()),
        ("gamma".to_string(), gamma.clone()),
        ("beta".to_string(), beta.clone()),
        ("bias".to_string(), bias.clone()),
    ];
    let loss_fn = || {
        let h = x.matmul(&w)?.add_row(&bias)?;
        let h = h.layer_norm_rows(&gamma, &beta, 1e-5)?;
        let h = h.softmax_rows()?;
        let left = h.slice_cols(0, 2)?;
        let right = h.slice_cols(2, 2)?;
        let cat = left.concat_rows(&right)?;
        let pooled = cat.mean_rows()?;
        Ok(pooled.sigmoid().sum())
    };
    let report = finite_difference_check(&params, loss_fn, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn gather_and_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let table = randn(&mut rng, &[6, 3]);
    let params = vec![("table".to_string(), table.clone())];
    let loss_fn = || {
        let rows = table.gather_rows(&[0, 2, 2, 5])?;
        let t = rows.transpose()?;
        Ok(t.matmul(&rows)?.sum())
    };
    let report = finite_difference_check(&params, loss_fn, 1e-6).unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn im2col_conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let img = randn(&mut rng, &[2, 6, 6]);
    let weight = randn(&mut rng, &[2 * 3 * 3, 4]);
    let bias = randn(&mut rng, &[4]);
    let params = vec![
        ("img".to_string(), img.clone()),
        ("weight".to_string(), weight.clone()),
        ("bias".to_string(), bias.clone()),
    ];
    let loss_fn = || {
        let cols = img.im2col(3, 2, 1)?;
        let out = cols.matmul(&weight)?.add_row(&bias)?.relu();
        Ok(out.sum())
    };
    let report = finite_difference_check(&params, loss_fn, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn bce_with_logits_matches_direct_evaluation() {
    let z = Tensor::param(vec![0.3, -1.2, 2.0], &[3]).unwrap();
    let y = [1.0, 0.0, 1.0];
    let loss = z.bce_with_logits(&y).unwrap().item().unwrap();
    let mut expected = 0.0;
    for (zi, yi) in z.to_vec().iter().zip(y.iter()) {
        let p = 1.0 / (1.0 + (-zi).exp());
        expected += -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln());
    }
    expected /= 3.0;
    assert!((loss - expected).abs() < 1e-12);

    let params = vec![("z".to_string(), z.clone())];
    let report =
        finite_difference_check(&params, || z.bce_with_logits(&y), 1e-6).unwrap();
    assert!(report.max_rel_err < 1e-8);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let a = randn(&mut rng, &[8, 8]);
    let b = randn(&mut rng, &[8, 8]);
    let r1 = a.matmul(&b).unwrap().softmax_rows().unwrap().to_vec();
    let r2 = a.matmul(&b).unwrap().softmax_rows().unwrap().to_vec();
    assert_eq!(r1, r2);
}
