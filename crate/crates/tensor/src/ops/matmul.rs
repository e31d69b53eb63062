use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// `[m, k] @ [k, n]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), rhs.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return shape_err("matmul", a.shape(), b.shape());
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        let (la, lb, lc) = (
            MatLayout::row_major(m, k),
            MatLayout::row_major(k, n),
            MatLayout::row_major(m, n),
        );
        gemm(a.data(), la, b.data(), lb, T::zero(), &mut out, lc);
        Ok(self.graph.record(
            Tensor::from_parts(vec![m, n], out),
            &[self, rhs],
            move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(g.data(), lc, b.data(), lb.t(), T::zero(), &mut ga, la);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(a.data(), la.t(), g.data(), lc, T::zero(), &mut gb, lb);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            },
        ))
    }
}
