use crate::error::{invalid, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rows<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    let f = *x.shape().last().unwrap_or(&1);
    (x.numel() / f.max(1), f)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let (n, f) = rows(&x);
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..n {
            let row = &x.data()[r * f..(r + 1) * f];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in out[r * f..(r + 1) * f].iter_mut().zip(row) {
                *o = (v - m).exp();
                s = s + *o;
            }
            for o in &mut out[r * f..(r + 1) * f] {
                *o = *o / s;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        let ys = y.clone();
        self.graph.record(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.numel()];
            for r in 0..n {
                let yr = &ys.data()[r * f..(r + 1) * f];
                let gr = &g.data()[r * f..(r + 1) * f];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for i in 0..f {
                    gx[r * f + i] = yr[i] * (gr[i] - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g, T> {
        let x = self.value();
        let (n, f) = rows(&x);
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..n {
            let row = &x.data()[r * f..(r + 1) * f];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (o, &v) in out[r * f..(r + 1) * f].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        let ys = y.clone();
        self.graph.record(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.numel()];
            for r in 0..n {
                let yr = &ys.data()[r * f..(r + 1) * f];
                let gr = &g.data()[r * f..(r + 1) * f];
                let gs: T = gr.iter().copied().sum();
                for i in 0..f {
                    gx[r * f + i] = gr[i] - yr[i].exp() * gs;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    /// Picks one entry per row of a `[n, f]` matrix: `out[r] = x[r, idx[r]]`.
    pub fn pick(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.ndim() != 2 || x.shape()[0] != indices.len() {
            return invalid("pick", format!("{:?} with {} indices", x.shape(), indices.len()));
        }
        let f = x.shape()[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= f) {
            return invalid("pick", format!("index {bad} out of range {f}"));
        }
        let out: Vec<T> = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| x.data()[r * f + i])
            .collect();
        let idx = indices.to_vec();
        let shape = x.shape().to_vec();
        Ok(self
            .graph
            .record(Tensor::from_parts(vec![idx.len()], out), &[self], move |g, _| {
                let mut gx = vec![T::zero(); shape[0] * shape[1]];
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * f + i] = g.data()[r];
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }))
    }
}
