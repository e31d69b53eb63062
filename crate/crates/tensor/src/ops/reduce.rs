use crate::error::{invalid, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

impl<'g, T: Scalar> Var<'g, T> {
    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.graph.record(y, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::c(1.0 / n as f64))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.ndim() {
            return invalid("sum_axis", format!("axis {axis} out of range for {:?}", x.shape()));
        }
        let shape = x.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = x.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self
            .graph
            .record(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }))
    }

    /// Reduces every axis after the first, giving a `[N]` vector.
    pub fn sum_per_item(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.is_empty() {
            return invalid("sum_per_item", "scalar input");
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(&[shape[0], rest])?.sum_axis(1)
    }
}
