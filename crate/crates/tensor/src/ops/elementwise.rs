use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        // df(x, y) is the local derivative given input x and output y.
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x.clone(), y.clone());
        self.graph.record(y, &[self], move |g, _| {
            let data: Vec<T> = g
                .data()
                .iter()
                .zip(xs.data().iter().zip(ys.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    fn check_same(self, rhs: Var<'g, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), rhs.shape());
        if a != b {
            return shape_err(op, a, b);
        }
        Ok(())
    }

    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same(rhs, "add")?;
        let y = self.value().add(&rhs.value())?;
        Ok(self
            .graph
            .record(y, &[self, rhs], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    /// Sums any number of equally shaped vars.
    pub fn add_n(items: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = *items.first().expect("add_n of empty list");
        let shape = first.shape();
        let mut acc = first.value().to_vec();
        for v in &items[1..] {
            if v.shape() != shape {
                return shape_err("add_n", &shape, v.shape());
            }
            for (a, b) in acc.iter_mut().zip(v.value().data()) {
                *a = *a + *b;
            }
        }
        let n = items.len();
        Ok(first
            .graph
            .record(Tensor::from_parts(shape, acc), items, move |g, _| {
                vec![Some(g.clone()); n]
            }))
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same(rhs, "sub")?;
        let y = self.value().zip_map(&rhs.value(), |a, b| a - b)?;
        Ok(self.graph.record(y, &[self, rhs], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same(rhs, "mul")?;
        let (a, b) = (self.value(), rhs.value());
        let y = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.record(y, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, b| g * b).unwrap()),
                needs[1].then(|| g.zip_map(&a, |g, a| g * a).unwrap()),
            ]
        }))
    }

    /// Elementwise minimum; the gradient goes to the smaller input (the left
    /// one on ties).
    pub fn minimum(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same(rhs, "minimum")?;
        let (a, b) = (self.value(), rhs.value());
        let y = a.zip_map(&b, |x, y| if x <= y { x } else { y })?;
        Ok(self.graph.record(y, &[self, rhs], move |g, _| {
            let mut ga = vec![T::zero(); g.numel()];
            let mut gb = vec![T::zero(); g.numel()];
            for i in 0..g.numel() {
                if a.data()[i] <= b.data()[i] {
                    ga[i] = g.data()[i];
                } else {
                    gb[i] = g.data()[i];
                }
            }
            vec![
                Some(Tensor::from_parts(g.shape().to_vec(), ga)),
                Some(Tensor::from_parts(g.shape().to_vec(), gb)),
            ]
        }))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let y = self.value().scale(s);
        self.graph
            .record(y, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let y = self.value().map(|v| v + s);
        self.graph.record(y, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(|v| v.ln(), |x, _| x.recip())
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        self.unary(
            move |v| v.powf(p),
            move |x, _| {
                if p == T::zero() {
                    T::zero()
                } else {
                    p * x.powf(p - T::one())
                }
            },
        )
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
