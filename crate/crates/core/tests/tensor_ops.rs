use proptest::prelude::*;
use thinvlad::tensor::{
    conv_output_len, grad_check, BatchNormMode, Graph, Padding, Tensor, TensorError,
};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct NHWC convolution used as the reference.
fn naive_conv(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> Vec<f64> {
    let [n, h, w, cin] = x.shape()[..] else { unreachable!() };
    let [kh, kw, _, cout] = k.shape()[..] else { unreachable!() };
    let (oh, ow) = out_hw;
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride.0 + dy) as isize - pad.0 as isize;
                            let ix = (ox * stride.1 + dx) as isize - pad.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((b * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k.data()[((dy * kw + dx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: (usize, usize), padding: Padding) -> Result<Tensor<f64>, TensorError> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let y = g.conv2d(xv, kv, stride, padding)?;
    Ok(g.value(y).clone())
}

#[test]
fn ones_kernel_over_ones_is_nine() {
    let x = Tensor::full([1, 3, 3, 1], 1.0);
    let k = Tensor::full([3, 3, 1, 1], 1.0);
    let y = conv(&x, &k, (1, 1), Padding::Valid).unwrap();
    assert_eq!(y.shape(), [1, 1, 1, 1]);
    assert_eq!(y.data(), [9.0]);
}

#[test]
fn identity_kernel_same_padding() {
    let x = Tensor::from_fn([2, 4, 5, 3], |i| (i as f64 * 0.37).sin());
    let k = Tensor::from_fn([1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let y = conv(&x, &k, (1, 1), Padding::Same).unwrap();
    assert_eq!(y, x);
}

#[test]
fn channel_mismatch_is_rejected() {
    let x = Tensor::<f64>::zeros([1, 4, 4, 2]);
    let k = Tensor::<f64>::zeros([3, 3, 3, 1]);
    assert!(matches!(conv(&x, &k, (1, 1), Padding::Same), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn batchnorm_examples() {
    // Channel already standardized over the batch: values ±1, mean 0, var 1.
    let x = t(&[1, 2, 2, 1], vec![1.0, -1.0, 1.0, -1.0]);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let gamma = g.constant(t(&[1], vec![1.0]));
    let beta = g.constant(t(&[1], vec![0.0]));
    let (y, stats) = g.batch_norm(xv, gamma, beta, BatchNormMode::Train, None).unwrap();
    for (a, b) in g.data(y).iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    let stats = stats.unwrap();
    assert!(stats.mean[0].abs() < 1e-15);
    assert!((stats.var[0] - 1.0).abs() < 1e-15);

    let x = Tensor::from_fn([2, 3, 3, 2], |i| (i as f64).cos() * 4.0);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let gamma = g.constant(t(&[2], vec![0.0, 0.0]));
    let beta = g.constant(t(&[2], vec![0.5, -2.0]));
    let (y, _) = g.batch_norm(xv, gamma, beta, BatchNormMode::Train, None).unwrap();
    for row in g.data(y).chunks_exact(2) {
        assert_eq!(row, [0.5, -2.0]);
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let x = t(&[1, 1, 2, 1], vec![3.0, 5.0]);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let gamma = g.constant(t(&[1], vec![2.0]));
    let beta = g.constant(t(&[1], vec![1.0]));
    let mean = [1.0];
    let var = [4.0];
    let (y, stats) = g
        .batch_norm(xv, gamma, beta, BatchNormMode::Eval, Some((&mean, &var)))
        .unwrap();
    assert!(stats.is_none());
    let denom = (4.0f64 + 1e-5).sqrt();
    let expected = [2.0 * 2.0 / denom + 1.0, 2.0 * 4.0 / denom + 1.0];
    for (a, b) in g.data(y).iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn relu_and_maxpool() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[3], vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.data(r), [0.0, 0.0, 2.0]);

    let x = g.constant(t(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
    let p = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
    assert_eq!(g.shape(p), [1, 1, 1, 1]);
    assert_eq!(g.data(p), [4.0]);
}

#[test]
fn maxpool_tie_routes_gradient_to_one_input() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 2, 2, 1], vec![7.0, 7.0, 7.0, 7.0]));
    let p = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad.iter().sum::<f64>(), 1.0);
    assert_eq!(grad.iter().filter(|&&v| v == 1.0).count(), 1);
}

#[test]
fn linear_matches_hand_product() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
    let w = g.constant(t(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
    let b = g.constant(t(&[2], vec![0.5, -0.5]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.shape(y), [2, 2]);
    assert_eq!(g.data(y), [4.5, 4.5, 0.5, 0.5]);
}

#[test]
fn softmax_rows_examples() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
    let s = g.softmax_rows(x);
    let d = g.data(s);
    for v in &d[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(&d[3..], [1.0, 0.0, 0.0]);
}

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]));
    let y = g.l2_normalize(x, 1).unwrap();
    let d = g.data(y);
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    assert_eq!(&d[2..], [0.0, 0.0]);
}

#[test]
fn grad_check_examples() {
    let x = t(&[2], vec![1.0, 2.0]);
    let report = grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");

    let x = t(&[2], vec![-1.0, 1.0]);
    let report = grad_check(
        |g, v| {
            let r = g.relu(v[0]);
            Ok(g.sum(r))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

fn small_dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize)> {
    // (h, w, cin, cout, kh, kw, stride)
    (1usize..7, 1usize..7, 1usize..3, 1usize..3, 1usize..4, 1usize..4, 1usize..3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_extents_follow_padding_algebra((h, w, cin, cout, kh, kw, s) in small_dims()) {
        let x = Tensor::<f64>::zeros([1, h, w, cin]);
        let k = Tensor::<f64>::zeros([kh, kw, cin, cout]);
        let same = conv(&x, &k, (s, s), Padding::Same).unwrap();
        prop_assert_eq!(same.shape(), [1, h.div_ceil(s), w.div_ceil(s), cout]);
        let valid = conv(&x, &k, (s, s), Padding::Valid);
        if kh <= h && kw <= w {
            let valid = valid.unwrap();
            prop_assert_eq!(valid.shape(), [1, (h - kh) / s + 1, (w - kw) / s + 1, cout]);
        } else {
            prop_assert!(valid.is_err());
        }
    }

    #[test]
    fn conv_matches_direct_sum((h, w, cin, cout, kh, kw, s) in small_dims(), seed in 0u64..1000) {
        let x = Tensor::from_fn([2, h, w, cin], |i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0);
        let k = Tensor::from_fn([kh, kw, cin, cout], |i| ((i as u64 * 7 + seed) % 5) as f64 - 2.0);
        let (oh, ph) = conv_output_len(h, kh, s, Padding::Same).unwrap();
        let (ow, pw) = conv_output_len(w, kw, s, Padding::Same).unwrap();
        let y = conv(&x, &k, (s, s), Padding::Same).unwrap();
        let expected = naive_conv(&x, &k, (s, s), (ph, pw), (oh, ow));
        prop_assert_eq!(y.data(), &expected[..]);
    }

    #[test]
    fn conv_is_linear_in_input(
        (h, w, cin, cout, kh, kw, s) in small_dims(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x1 = Tensor::from_fn([1, h, w, cin], |i| (i as f64 * 0.7).sin());
        let x2 = Tensor::from_fn([1, h, w, cin], |i| (i as f64 * 1.3).cos());
        let k = Tensor::from_fn([kh, kw, cin, cout], |i| (i as f64 * 0.9).sin());
        let mix = Tensor::new(
            x1.shape().to_vec(),
            x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect(),
        ).unwrap();
        let y1 = conv(&x1, &k, (s, s), Padding::Same).unwrap();
        let y2 = conv(&x2, &k, (s, s), Padding::Same).unwrap();
        let ym = conv(&mix, &k, (s, s), Padding::Same).unwrap();
        for ((m, p), q) in ym.data().iter().zip(y1.data()).zip(y2.data()) {
            prop_assert!((m - (a * p + b * q)).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::inference();
        let x = g.constant(t(&[3, 4], vals));
        let s = g.softmax_rows(x);
        for row in g.data(s).chunks_exact(4) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_rows_are_unit_or_zero(vals in prop::collection::vec(-10.0f64..10.0, 8)) {
        let mut g = Graph::inference();
        let x = g.constant(t(&[2, 4], vals));
        let y = g.l2_normalize(x, 1).unwrap();
        for row in g.data(y).chunks_exact(4) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12 || n == 0.0);
        }
    }
}
