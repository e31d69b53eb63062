use nfcs_tensor::gradcheck::{check, run_suite};
use nfcs_tensor::Tensor;

#[test]
fn every_op_matches_finite_differences() {
    let report = run_suite(20).unwrap();
    assert!(report.len() >= 30);
    for entry in &report {
        assert_eq!(entry.cases, 20);
        eprintln!("{:<18} worst {:.2e}", entry.op, entry.worst);
        assert!(entry.worst < 1e-4, "{}: relative error {:.3e}", entry.op, entry.worst);
    }
}

#[test]
fn square_gradient_is_exact() {
    let x = Tensor::from_f64(&[3], &[0.5, -0.25, 2.0]).unwrap();
    let res = check(&[x], 1e-5, |_, v| Ok(v[0].mul(v[0])?.sum())).unwrap();
    assert!(res.max_error() < 1e-8);
}

#[test]
fn composite_chain() {
    let x = Tensor::from_f64(&[2, 3], &[0.1, -0.4, 0.9, 1.2, -0.7, 0.3]).unwrap();
    let w = Tensor::from_f64(&[3, 2], &[0.5, -0.2, 0.3, 0.8, -0.6, 0.1]).unwrap();
    let res = check(&[x, w], 1e-5, |_, v| {
        let y = v[0].matmul(v[1])?.tanh().log_softmax();
        Ok(y.mul(y)?.mean())
    })
    .unwrap();
    assert!(res.max_error() < 1e-6, "{res:?}");
}
