use mmgs_diffgrad::nn::{Init, Linear, Mlp, Module};
use mmgs_diffgrad::{
    adam_step, conv2d_3x3, grad_check, grad_check_param, masked_attention, AdamConfig, AdamState,
    GradCheckError, GradError, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Weighted sum with fixed random weights so every output entry matters.
fn probe(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(t.shape(), &mut rng);
    t.mul(&w).sum()
}

#[test]
fn sum_gradient_is_ones() {
    let x = Tensor::<f64>::param(&[3], vec![0.3, -2.0, 5.0]);
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn sum_of_squares_gradient() {
    let x = Tensor::<f64>::param(&[2], vec![2.0, -1.0]);
    x.mul(&x).sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, -2.0]);
}

#[test]
fn matvec_gradient_is_column_sums() {
    // loss = sum(A x) -> d/dx_j = sum_i A_ij
    let a = Tensor::<f64>::new(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.5, 6.0]);
    let x = Tensor::param(&[3, 1], vec![0.1, 0.2, 0.3]);
    a.matmul(&x).sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![-3.0, 2.5, 9.0]);

    let report = grad_check(|x| a.matmul(x).sum(), &Tensor::new(&[3, 1], vec![0.1, 0.2, 0.3]), 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn non_scalar_backward_is_rejected() {
    let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
    let err = x.scale(2.0).backward().unwrap_err();
    assert_eq!(err, GradError::NonScalarLoss { shape: vec![2] });
}

#[test]
fn backward_accumulates_across_calls() {
    let x = Tensor::<f64>::param(&[2], vec![1.0, 3.0]);
    let y = x.square().sum();
    y.backward().unwrap();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, 12.0]);
}

#[test]
fn intermediate_tensors_receive_gradients() {
    let x = Tensor::<f64>::param(&[2], vec![1.0, 3.0]);
    let h = x.scale(2.0);
    h.sum().backward().unwrap();
    assert_eq!(h.grad().unwrap(), vec![1.0, 1.0]);
}

#[test]
fn grad_check_quadratic_is_tight() {
    let r = grad_check(|x| x.square().sum(), &Tensor::new(&[2], vec![1.0, 2.0]), 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_constant_function() {
    let r = grad_check(|_| Tensor::scalar(3.0), &Tensor::new(&[2], vec![1.0, 2.0]), 1e-5).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn grad_check_reports_non_finite() {
    let f = |x: &Tensor<f64>| {
        let v = x.to_vec();
        // blows up once coordinate 1 moves up
        if v[1] > 2.0 {
            Tensor::scalar(f64::NAN)
        } else {
            x.sum()
        }
    };
    let err = grad_check(f, &Tensor::new(&[2], vec![1.0, 2.0]), 1e-3).unwrap_err();
    assert!(matches!(err, GradCheckError::NonFinite { coord: 1, .. }), "{err:?}");
}

#[test]
fn every_elementwise_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random(&[3, 4], &mut rng);
    let q = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    type Case = Box<dyn Fn(&Tensor<f64>) -> Tensor<f64>>;
    let (q1, q2, r1, r2) = (q.clone(), q.clone(), row.clone(), row.clone());
    let cases: Vec<(&str, Case)> = vec![
        ("add", Box::new(move |x| probe(&x.add(&q1), 1))),
        ("sub", Box::new(move |x| probe(&q2.sub(x), 1))),
        ("mul", Box::new(|x| probe(&x.mul(x), 1))),
        ("scale", Box::new(|x| probe(&x.scale(-1.7), 1))),
        ("add_row", Box::new(move |x| probe(&x.add_row(&r1), 1))),
        ("mul_row", Box::new(move |x| probe(&x.mul_row(&r2), 1))),
        ("relu", Box::new(|x| probe(&x.relu(), 1))),
        ("leaky_relu", Box::new(|x| probe(&x.leaky_relu(0.2), 1))),
        ("elu", Box::new(|x| probe(&x.elu(), 1))),
        ("tanh", Box::new(|x| probe(&x.tanh(), 1))),
        ("sigmoid", Box::new(|x| probe(&x.sigmoid(), 1))),
        ("exp", Box::new(|x| probe(&x.exp(), 1))),
        ("abs", Box::new(|x| probe(&x.abs(), 1))),
        ("softmax_rows", Box::new(|x| probe(&x.softmax_rows(), 1))),
        ("normalize_rows", Box::new(|x| probe(&x.normalize_rows(), 1))),
        ("mean_rows", Box::new(|x| probe(&x.mean_rows(), 2))),
        ("mean", Box::new(|x| x.mean())),
        ("slice_cols", Box::new(|x| probe(&x.slice_cols(1, 3), 2))),
        ("concat_cols", Box::new(|x| probe(&Tensor::concat_cols(&[x, &x.square()]), 2))),
        ("concat_rows", Box::new(|x| probe(&Tensor::concat_rows(&[&x.exp(), x]), 2))),
        ("gather_rows", Box::new(|x| probe(&x.gather_rows(&[2, 0, 2]), 2))),
        ("reshape", Box::new(|x| probe(&x.reshape(&[2, 6]), 2))),
        ("broadcast_rows", Box::new(|x| probe(&x.mean_rows().broadcast_rows(5), 2))),
        ("matmul_lhs", Box::new(|x| probe(&x.matmul(&x.reshape(&[4, 3])), 2))),
    ];
    for (name, f) in cases {
        let r = grad_check(&f, &p, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-3, "{name}: {r:?}");
    }
}

#[test]
fn conv_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random(&[5, 4, 2], &mut rng);
    let w = random(&[3, 3, 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let (w1, b1) = (w.clone(), b.clone());
    let r = grad_check(move |x| probe(&conv2d_3x3(x, &w1, &b1), 9), &img, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-3, "input: {r:?}");
    let (i2, b2) = (img.clone(), b.clone());
    let r = grad_check(move |w| probe(&conv2d_3x3(&i2, w, &b2), 9), &w, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-3, "weight: {r:?}");
    let r = grad_check(move |b| probe(&conv2d_3x3(&img, &w, b), 9), &b, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-3, "bias: {r:?}");
}

#[test]
fn conv_of_zero_image_with_zero_bias_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random(&[3, 3, 3, 4], &mut rng);
    let out = conv2d_3x3(&Tensor::zeros(&[6, 6, 3]), &w, &Tensor::zeros(&[4]));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn masked_attention_grad_and_normalisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nb = vec![vec![0, 1], vec![1, 0, 2], vec![2], vec![3, 2]];
    let src = random(&[4], &mut rng);
    let dst = random(&[4], &mut rng);
    let a = masked_attention(&src, &dst, &nb, 0.2);
    let d = a.data();
    for (i, n) in nb.iter().enumerate() {
        let s: f64 = n.iter().map(|&p| d[i * 4 + p]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(d[2 * 4 + 2], 1.0);
    drop(d);
    let (nb1, d1) = (nb.clone(), dst.clone());
    let r = grad_check(move |s| probe(&masked_attention(s, &d1, &nb1, 0.2), 4), &src, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
    let r = grad_check(move |d| probe(&masked_attention(&src, d, &nb, 0.2), 4), &dst, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn mlp_parameters_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mlp = Mlp::<f64>::new(&[3, 5, 2], Init::GlorotUniform, &mut rng);
    let x = random(&[4, 3], &mut rng);
    for (name, p) in mlp.named_params("mlp") {
        let r = grad_check_param(&p, || mlp.forward(&x).tanh().sum(), 1e-4, None).unwrap();
        assert!(r.max_rel_error < 1e-3, "{name}: {r:?}");
    }
}

#[test]
fn dropout_is_identity_in_eval_and_unbiased_scaling_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::new(&[1000], vec![1.0; 1000]);
    let y = x.dropout(0.1, &mut rng, false);
    assert!(y.ptr_eq(&x));
    let y = x.dropout(0.1, &mut rng, true);
    for &v in y.data().iter() {
        assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12);
    }
    let mut a = ChaCha8Rng::seed_from_u64(4);
    let mut b = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(x.dropout(0.5, &mut a, true).to_vec(), x.dropout(0.5, &mut b, true).to_vec());
}

#[test]
fn adam_zero_gradient_is_identity() {
    let p = Tensor::<f64>::param(&[3], vec![0.5, -1.0, 2.0]).named("p");
    p.zero_grad();
    let mut st = AdamState::new(AdamConfig::default());
    adam_step(&[p.clone()], &mut st).unwrap();
    assert_eq!(p.to_vec(), vec![0.5, -1.0, 2.0]);
    assert_eq!(st.step_count, 1);
    assert!(p.grad().is_none());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let p = Tensor::<f64>::param(&[1], vec![1.0]);
    p.sum().backward().unwrap();
    let mut st = AdamState::new(AdamConfig::default());
    adam_step(&[p.clone()], &mut st).unwrap();
    // m_hat = 1, v_hat = 1 -> step lr / (1 + eps)
    let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
    assert!((p.item() - expected).abs() < 1e-15);
}

#[test]
fn adam_missing_grad_names_parameter() {
    let a = Tensor::<f64>::param(&[1], vec![1.0]).named("encoder.w");
    let mut st = AdamState::new(AdamConfig::default());
    let err = adam_step(&[a], &mut st).unwrap_err();
    assert_eq!(err, GradError::MissingGrad { name: "encoder.w".into() });
}

#[test]
fn adam_descends_convex_quadratic() {
    let target = [0.3, -0.7];
    let p = Tensor::<f64>::param(&[2], vec![2.0, 2.0]);
    let t = Tensor::new(&[2], target.to_vec());
    let loss = |p: &Tensor<f64>| p.sub(&t).square().sum();
    let mut st = AdamState::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
    let mut values = vec![loss(&p).item()];
    for _ in 0..2 {
        loss(&p).backward().unwrap();
        adam_step(&[p.clone()], &mut st).unwrap();
        values.push(loss(&p).item());
    }
    assert!(values[1] < values[0] && values[2] < values[1], "{values:?}");
}

#[test]
fn linear_zero_init_outputs_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = Linear::<f32>::new(4, 3, Init::Zeros, &mut rng);
    let y = l.forward(&Tensor::new(&[2, 4], vec![1.0; 8]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn backward_is_bit_reproducible(vals in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let run = || {
            let x = Tensor::param(&[2, 3], vals.clone());
            let y = x.tanh().matmul(&x.reshape(&[3, 2])).softmax_rows().square().sum();
            y.backward().unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 8)) {
        let y = Tensor::new(&[2, 4], vals).softmax_rows();
        for r in y.data().chunks(4) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rows_is_idempotent(vals in proptest::collection::vec(-2.0f32..2.0, 4)) {
        prop_assume!(vals.iter().map(|v| v * v).sum::<f32>() > 1e-3);
        let once = Tensor::new(&[1, 4], vals).normalize_rows();
        let twice = once.normalize_rows();
        prop_assert_eq!(once.to_vec(), twice.to_vec());
        let n: f32 = once.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
    }
}
