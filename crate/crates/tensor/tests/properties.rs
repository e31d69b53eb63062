use nfcs_tensor::checkpoint::{decode, encode};
use nfcs_tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let g = Graph::new();
        let y = g.constant(x).softmax().value();
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn checkpoint_round_trip(entries in prop::collection::vec((prop::collection::vec(1usize..4, 0..4), any::<u64>()), 0..6)) {
        let mut s = ParamStore::<f64>::new();
        for (i, (shape, seed)) in entries.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|k| f64::from_bits(seed.rotate_left(k as u32) & 0x7fef_ffff_ffff_ffff)).collect();
            s.insert(format!("t{i}"), Tensor::new(shape, data).unwrap());
        }
        let bytes = encode(&s);
        let back: ParamStore<f64> = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn relu_never_negative(vals in prop::collection::vec(-1e6f64..1e6, 1..64)) {
        let n = vals.len();
        let g = Graph::new();
        let y = g.constant(Tensor::new(&[n], vals).unwrap()).relu().value();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn resize_preserves_range(vals in prop::collection::vec(-5.0f64..5.0, 12), oh in 1usize..9, ow in 1usize..9) {
        let x = Tensor::new(&[1, 1, 3, 4], vals.clone()).unwrap();
        let y = nfcs_tensor::ops::bilinear_resize_forward(&x, oh, ow).unwrap();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}
