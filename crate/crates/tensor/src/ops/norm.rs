use crate::error::{invalid, shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance epsilon shared by group and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// A normalization set is a list of contiguous `(start, len)` segments of
/// the flat `[N, C, H, W]` buffer that share one mean and variance.
type Segments = Vec<(usize, usize)>;

fn dims<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 4 {
        return shape_err(op, "[N, C, H, W]", x.shape());
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2] * s[3]))
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>, op: &'static str) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(op, [c], (gamma.shape(), beta.shape()));
    }
    Ok(())
}

struct Normalized<T> {
    y: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

fn normalize<T: Scalar>(
    x: &[T],
    sets: &[Segments],
    c: usize,
    p: usize,
    gamma: &[T],
    beta: &[T],
) -> Normalized<T> {
    let eps = T::c(NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(sets.len());
    let mut means = Vec::with_capacity(sets.len());
    let mut vars = Vec::with_capacity(sets.len());
    for segs in sets {
        let count = T::c(segs.iter().map(|s| s.1).sum::<usize>() as f64);
        let mean = segs
            .iter()
            .map(|&(s, l)| x[s..s + l].iter().copied().sum::<T>())
            .sum::<T>()
            / count;
        let var = segs
            .iter()
            .map(|&(s, l)| x[s..s + l].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / count;
        let is = (var + eps).sqrt().recip();
        for &(s, l) in segs {
            for idx in s..s + l {
                let ch = (idx / p) % c;
                let xh = (x[idx] - mean) * is;
                xhat[idx] = xh;
                y[idx] = xh * gamma[ch] + beta[ch];
            }
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    Normalized {
        y,
        xhat,
        inv_std,
        mean: means,
        var: vars,
    }
}

#[allow(clippy::too_many_arguments)]
fn normalize_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    sets: &[Segments],
    c: usize,
    p: usize,
    gamma: &[T],
    needs: &[bool],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let mut gx = needs[0].then(|| vec![T::zero(); g.len()]);
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for (segs, &is) in sets.iter().zip(inv_std) {
        let count = T::c(segs.iter().map(|s| s.1).sum::<usize>() as f64);
        let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
        for &(s, l) in segs {
            for idx in s..s + l {
                let ch = (idx / p) % c;
                let d = g[idx] * gamma[ch];
                sum_d = sum_d + d;
                sum_dx = sum_dx + d * xhat[idx];
                ggamma[ch] = ggamma[ch] + g[idx] * xhat[idx];
                gbeta[ch] = gbeta[ch] + g[idx];
            }
        }
        if let Some(gx) = gx.as_mut() {
            let (md, mdx) = (sum_d / count, sum_dx / count);
            for &(s, l) in segs {
                for idx in s..s + l {
                    let ch = (idx / p) % c;
                    gx[idx] = is * (g[idx] * gamma[ch] - md - xhat[idx] * mdx);
                }
            }
        }
    }
    (gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta))
}

/// Batch statistics returned by [`Var::batch_norm_train`].
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Group normalization over `[N, C, H, W]` with per-channel affine.
    pub fn group_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, groups: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, p) = dims(&x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return invalid("group_norm", format!("{c} channels not divisible into {groups} groups"));
        }
        let (gm, bt) = (gamma.value(), beta.value());
        check_affine(c, &gm, &bt, "group_norm")?;
        let cpg = c / groups;
        let sets: Vec<Segments> = (0..n)
            .flat_map(|ni| (0..groups).map(move |gi| vec![((ni * c + gi * cpg) * p, cpg * p)]))
            .collect();
        Ok(self.normalized(x, gm, bt, sets, gamma, beta, c, p).0)
    }

    /// Batch normalization using the statistics of this batch. Returns the
    /// per-channel mean and biased variance for running-average bookkeeping.
    pub fn batch_norm_train(self, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<(Var<'g, T>, BatchStats<T>)> {
        let x = self.value();
        let (n, c, p) = dims(&x, "batch_norm")?;
        let (gm, bt) = (gamma.value(), beta.value());
        check_affine(c, &gm, &bt, "batch_norm")?;
        let sets: Vec<Segments> = (0..c)
            .map(|ci| (0..n).map(|ni| ((ni * c + ci) * p, p)).collect())
            .collect();
        let (y, mean, var) = self.normalized(x, gm, bt, sets, gamma, beta, c, p);
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, p) = dims(&x, "batch_norm_eval")?;
        let (gm, bt) = (gamma.value(), beta.value());
        check_affine(c, &gm, &bt, "batch_norm_eval")?;
        check_affine(c, running_mean, running_var, "batch_norm_eval stats")?;
        let eps = T::c(NORM_EPS);
        let inv: Vec<T> = running_var.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mean = running_mean.to_vec();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut y = vec![T::zero(); x.numel()];
        for (idx, &v) in x.data().iter().enumerate() {
            let ch = (idx / p) % c;
            xhat[idx] = (v - mean[ch]) * inv[ch];
            y[idx] = xhat[idx] * gm.data()[ch] + bt.data()[ch];
        }
        let shape = x.shape().to_vec();
        let _ = n;
        Ok(self.graph.record(
            Tensor::from_parts(shape.clone(), y),
            &[self, gamma, beta],
            move |g, needs| {
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let mut gx = vec![T::zero(); g.numel()];
                for (idx, &gv) in g.data().iter().enumerate() {
                    let ch = (idx / p) % c;
                    gx[idx] = gv * gm.data()[ch] * inv[ch];
                    gg[ch] = gg[ch] + gv * xhat[idx];
                    gb[ch] = gb[ch] + gv;
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(shape.clone(), gx)),
                    needs[1].then(|| Tensor::from_parts(vec![c], gg)),
                    needs[2].then(|| Tensor::from_parts(vec![c], gb)),
                ]
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalized(
        self,
        x: Tensor<T>,
        gm: Tensor<T>,
        bt: Tensor<T>,
        sets: Vec<Segments>,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        c: usize,
        p: usize,
    ) -> (Var<'g, T>, Vec<T>, Vec<T>) {
        let Normalized {
            y,
            xhat,
            inv_std,
            mean,
            var,
        } = normalize(x.data(), &sets, c, p, gm.data(), bt.data());
        let shape = x.shape().to_vec();
        let out = self.graph.record(
            Tensor::from_parts(shape.clone(), y),
            &[self, gamma, beta],
            move |g, needs| {
                let (gx, gg, gb) =
                    normalize_backward(g.data(), &xhat, &inv_std, &sets, c, p, gm.data(), needs);
                vec![
                    gx.map(|d| Tensor::from_parts(shape.clone(), d)),
                    gg.map(|d| Tensor::from_parts(vec![c], d)),
                    gb.map(|d| Tensor::from_parts(vec![c], d)),
                ]
            },
        );
        (out, mean, var)
    }
}
