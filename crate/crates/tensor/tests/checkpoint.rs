use nfcs_tensor::checkpoint::{decode, encode, load, save, FORMAT_VERSION};
use nfcs_tensor::{ParamStore, Tensor, TensorError};

fn sample() -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("fpn.b1.op1.w", Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap());
    s.insert("head.cls.b", Tensor::new(&[3], vec![-4.59, 0.0, f32::MIN_POSITIVE]).unwrap());
    s.insert("scalar", Tensor::scalar(7.25f32));
    s
}

#[test]
fn round_trip_preserves_names_order_and_bits() {
    let s = sample();
    let bytes = encode(&s);
    assert_eq!(&bytes[..4], b"NFCS");
    let back: ParamStore<f32> = decode(&bytes).unwrap();
    let a: Vec<_> = s.iter().collect();
    let b: Vec<_> = back.iter().collect();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        assert_eq!(ta.data(), tb.data());
    }
    assert_eq!(encode(&back), bytes);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.nfcs");
    save(&path, &sample()).unwrap();
    let back: ParamStore<f32> = load(&path).unwrap();
    assert_eq!(back.len(), 3);
}

#[test]
fn version_mismatch_is_explicit() {
    let mut bytes = encode(&sample());
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match decode::<f32>(&bytes) {
        Err(TensorError::Version { found, expected }) => {
            assert_eq!(found, FORMAT_VERSION + 1);
            assert_eq!(expected, FORMAT_VERSION);
        }
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn rejects_corruption() {
    let bytes = encode(&sample());
    assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode::<f32>(&bad).is_err());
    assert!(decode::<f64>(&bytes).is_err());
}
