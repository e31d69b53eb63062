use nfcs_tensor::ops::{bilinear_resize_forward, conv2d_forward, deform_conv2d_forward, same_padding};
use nfcs_tensor::{Conv2dOptions, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_1x1_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
    let mut w = vec![0.0; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let w = Tensor::new(&[3, 3, 1, 1], w).unwrap();
    let y = conv2d_forward(&x, &w, None, Conv2dOptions::default()).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn dilated_receptive_field() {
    // A single impulse spreads over (k - 1) * d + 1 = 7 positions.
    let mut x = vec![0.0; 15 * 15];
    x[7 * 15 + 7] = 1.0;
    let x = Tensor::new(&[1, 1, 15, 15], x).unwrap();
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    let opts = Conv2dOptions {
        dilation: 3,
        ..Default::default()
    };
    let y = conv2d_forward(&x, &w, None, opts).unwrap();
    let rows: Vec<usize> = (0..15).filter(|&r| (0..15).any(|c| y.data()[r * 15 + c] != 0.0)).collect();
    assert_eq!(rows, vec![4, 7, 10]);
    assert_eq!(rows.last().unwrap() - rows[0] + 1, 7);
}

#[test]
fn same_padding_shapes() {
    assert_eq!(same_padding(16, 3, 1, 1), (16, 1));
    assert_eq!(same_padding(16, 3, 2, 1), (8, 0));
    assert_eq!(same_padding(5, 3, 2, 1), (3, 1));
    assert_eq!(same_padding(16, 5, 1, 6), (16, 12));
    let x = Tensor::<f64>::ones(&[1, 2, 7, 9]);
    let w = Tensor::<f64>::ones(&[4, 2, 3, 3]);
    let y = conv2d_forward(&x, &w, None, Conv2dOptions::stride(2)).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 5]);
}

#[test]
fn depthwise_keeps_channels_apart() {
    let x = Tensor::new(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
    let w = Tensor::new(&[2, 1, 1, 1], vec![10.0, 100.0]).unwrap();
    let y = conv2d_forward(&x, &w, None, Conv2dOptions::depthwise(2, 1)).unwrap();
    assert_eq!(y.data(), &[20.0, 300.0]);
}

#[test]
fn conv_shape_errors() {
    let x = Tensor::<f64>::ones(&[1, 3, 4, 4]);
    let w = Tensor::<f64>::ones(&[2, 2, 3, 3]);
    assert!(conv2d_forward(&x, &w, None, Conv2dOptions::default()).is_err());
    let x0 = Tensor::<f64>::zeros(&[1, 3, 0, 4]);
    let w = Tensor::<f64>::ones(&[2, 3, 3, 3]);
    assert!(conv2d_forward(&x0, &w, None, Conv2dOptions::default()).is_err());
}

#[test]
fn deform_with_zero_offsets_is_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 5]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let off = Tensor::zeros(&[2, 18, 6, 5]);
    let d = deform_conv2d_forward(&x, &off, &w, Some(&b)).unwrap();
    let c = conv2d_forward(&x, &w, Some(&b), Conv2dOptions::default()).unwrap();
    assert!(d.max_abs_diff(&c) < 1e-12);
}

#[test]
fn deform_with_integer_shift_is_shifted_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (8, 8);
    let x = rand_tensor(&mut rng, &[1, 2, h, w]);
    let wt = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    // Every tap moves one row down and two columns left.
    let mut off = vec![0.0; 18 * h * w];
    for t in 0..9 {
        for p in 0..h * w {
            off[(2 * t) * h * w + p] = 1.0;
            off[(2 * t + 1) * h * w + p] = -2.0;
        }
    }
    let off = Tensor::new(&[1, 18, h, w], off).unwrap();
    let d = deform_conv2d_forward(&x, &off, &wt, None).unwrap();
    let c = conv2d_forward(&x, &wt, None, Conv2dOptions::default()).unwrap();
    // d(y, x) == c(y + 1, x - 2) wherever both windows stay inside.
    for o in 0..3 {
        for y in 1..h - 2 {
            for xx in 3..w - 1 {
                let a = d.data()[(o * h + y) * w + xx];
                let b = c.data()[(o * h + y + 1) * w + xx - 2];
                assert!((a - b).abs() < 1e-12, "o={o} y={y} x={xx}");
            }
        }
    }
}

#[test]
fn deform_offset_channel_mismatch() {
    let x = Tensor::<f64>::ones(&[1, 2, 4, 4]);
    let w = Tensor::<f64>::ones(&[1, 2, 3, 3]);
    let off = Tensor::zeros(&[1, 16, 4, 4]);
    assert!(deform_conv2d_forward(&x, &off, &w, None).is_err());
}

#[test]
fn group_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 8, 5, 5]).map(|v| 3.0 * v + 1.5);
    let g = Graph::new();
    let y = g
        .constant(x)
        .group_norm(g.constant(Tensor::ones(&[8])), g.constant(Tensor::zeros(&[8])), 4)
        .unwrap()
        .value();
    for chunk in y.data().chunks(2 * 25) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5 + 1e-4, "var {var}");
    }
}

#[test]
fn group_norm_per_channel_is_instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 3, 4, 4]);
    let g = Graph::new();
    let y = g
        .constant(x)
        .group_norm(g.constant(Tensor::ones(&[3])), g.constant(Tensor::zeros(&[3])), 3)
        .unwrap()
        .value();
    for chunk in y.data().chunks(16) {
        assert!(chunk.iter().sum::<f64>().abs() < 1e-9);
    }
}

#[test]
fn group_norm_divisibility() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 6, 2, 2]));
    let r = x.group_norm(g.constant(Tensor::ones(&[6])), g.constant(Tensor::zeros(&[6])), 4);
    assert!(r.is_err());
}

#[test]
fn batch_norm_train_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 3, 3, 3]).map(|v| v * 2.0 - 0.7);
    let g = Graph::new();
    let (y, stats) = g
        .constant(x.clone())
        .batch_norm_train(g.constant(Tensor::ones(&[3])), g.constant(Tensor::zeros(&[3])))
        .unwrap();
    let y = y.value();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 9..(n * 3 + c + 1) * 9].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 36.0;
        assert!(mean.abs() < 1e-9);
        let raw: Vec<f64> = (0..4).flat_map(|n| x.data()[(n * 3 + c) * 9..(n * 3 + c + 1) * 9].to_vec()).collect();
        let rm = raw.iter().sum::<f64>() / 36.0;
        assert!((stats.mean[c] - rm).abs() < 1e-12);
    }
}

#[test]
fn resize_constant_stays_constant() {
    let x = Tensor::<f64>::full(&[1, 2, 3, 5], 0.75);
    for (oh, ow) in [(6, 10), (2, 2), (7, 3), (1, 1)] {
        let y = bilinear_resize_forward(&x, oh, ow).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }
}

#[test]
fn resize_2x_delta_gives_tent() {
    // Half-pixel centers: output i samples input (i + 0.5) / 2 - 0.5, so a
    // delta at input 3 spreads as 1/4, 3/4, 3/4, 1/4 over outputs 5..=8.
    let mut v = vec![0.0; 8];
    v[3] = 1.0;
    let x = Tensor::new(&[1, 1, 1, 8], v).unwrap();
    let y = bilinear_resize_forward(&x, 1, 16).unwrap();
    let mut want = vec![0.0f64; 16];
    want[5] = 0.25;
    want[6] = 0.75;
    want[7] = 0.75;
    want[8] = 0.25;
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15, "{:?}", y.data());
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[5, 7]).map(|v| v * 30.0);
    let g = Graph::new();
    let y = g.constant(x).softmax().value();
    for row in y.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn elementwise_identities() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(x.exp().log().value().data(), x.value().data());
    assert_eq!(x.sigmoid().value().data()[1], 0.5);
    let z = g.constant(Tensor::zeros(&[3]));
    assert_eq!(x.add(z).unwrap().value().data(), x.value().data());
    assert_eq!(x.mul(z).unwrap().value().sum(), 0.0);
    assert_eq!(x.mean().value().item(), 1.0 / 3.0);
    let cat = nfcs_tensor::Var::concat(&[x, z], 0).unwrap();
    assert_eq!(cat.shape(), vec![6]);
}

#[test]
fn lstm_zero_weights() {
    // Zero weights: every gate is sigmoid(0) = 0.5 and the cell input is 0,
    // so c' = c / 2 and h' = tanh(c') / 2.
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 2]));
    let h = g.constant(Tensor::zeros(&[1, 3]));
    let c = g.constant(Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap());
    let w = g.constant(Tensor::zeros(&[5, 12]));
    let b = g.constant(Tensor::zeros(&[12]));
    let s = x.lstm_cell(nfcs_tensor::LstmState { h, c }, w, b).unwrap();
    assert_eq!(s.c.value().data(), &[0.5, -1.0, 0.25]);
    for (hv, cv) in s.h.value().data().iter().zip(s.c.value().data()) {
        assert!((hv - 0.5 * cv.tanh()).abs() < 1e-15);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 4, 9, 9]).cast::<f32>();
    let w = rand_tensor(&mut rng, &[8, 4, 3, 3]).cast::<f32>();
    let a = conv2d_forward(&x, &w, None, Conv2dOptions::default()).unwrap();
    let b = conv2d_forward(&x, &w, None, Conv2dOptions::default()).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn backward_needs_scalar_root() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(&[2]));
    assert!(g.backward(x.exp()).is_err());
}
