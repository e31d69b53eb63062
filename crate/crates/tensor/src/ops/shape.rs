use crate::error::{invalid, shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.reshape(shape)?;
        Ok(self.graph.record(y, &[self], move |g, _| {
            vec![Some(g.reshape(&old).expect("reshape back"))]
        }))
    }

    /// Concatenates along `axis`. All other extents must agree.
    pub fn concat(items: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = *items.first().expect("concat of empty list");
        let base = first.shape();
        if axis >= base.len() {
            return invalid("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let values: Vec<Tensor<T>> = items.iter().map(|v| v.value()).collect();
        let mut lens = Vec::with_capacity(items.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", &base, s);
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(first
            .graph
            .record(Tensor::from_parts(shape, out), items, move |g, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for (k, &len) in lens.iter().enumerate() {
                    if needs[k] {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        let mut s = base.clone();
                        s[axis] = len;
                        grads.push(Some(Tensor::from_parts(s, part)));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self
            .graph
            .record(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
                let mut gx = vec![T::zero(); outer * full * inner];
                let gd = g.data();
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }))
    }

    /// Adds a vector to every row: `x[..., f] + b[f]`.
    pub fn add_row(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, b) = (self.value(), bias.value());
        let f = *x.shape().last().unwrap_or(&0);
        if b.shape() != [f] {
            return shape_err("add_row", [f], b.shape());
        }
        let mut out = x.to_vec();
        for row in out.chunks_mut(f.max(1)) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v = *v + bb;
            }
        }
        Ok(self.graph.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, bias],
            move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); f];
                    for row in g.data().chunks(f.max(1)) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::from_parts(vec![f], acc)
                });
                vec![Some(g.clone()), gb]
            },
        ))
    }
}
