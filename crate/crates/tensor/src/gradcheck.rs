//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is an
//! independent oracle for the backward closures registered by each op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`check`]: one relative error per input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`. The error of each input is
/// `|analytic - numeric| / max(|analytic|, |numeric|)` in the L2 norm
/// (zero when both vanish).
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&graph, &vars)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().item())
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = input.to_vec();
            plus[i] += h;
            probe[k] = Tensor::from_parts(input.shape().to_vec(), plus);
            let fp = eval(&probe)?;
            let mut minus = input.to_vec();
            minus[i] -= h;
            probe[k] = Tensor::from_parts(input.shape().to_vec(), minus);
            let fm = eval(&probe)?;
            *slot = (fp - fm) / (2.0 * h);
        }
        let a = analytic[k].data();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        relative_errors.push(if scale < 1e-12 { 0.0 } else { norm(&diff) / scale });
    }
    Ok(GradCheck { relative_errors })
}

/// `sum(out * weights)`, a scalar probe for checking non-scalar ops.
pub fn project<'g>(out: Var<'g, f64>, weights: &Tensor<f64>) -> Result<Var<'g, f64>> {
    let w = out.graph().constant(weights.clone());
    Ok(out.mul(w)?.sum())
}

type Probe = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    probe: Probe,
}

/// Worst relative error of one op over all generated cases.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero, so kinks at 0 stay out of reach of `h`.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Wraps `f` so that its (arbitrary-shape) output is dotted with fixed
/// random weights. `out_weights` may be longer than the output.
fn projected<F>(out_weights: Tensor<f64>, f: F) -> Probe
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + 'static,
{
    Box::new(move |g, v| {
        let out = f(g, v)?;
        let shape = out.shape();
        let n: usize = shape.iter().product();
        let w = Tensor::new(&shape, out_weights.data()[..n].to_vec())?;
        project(out, &w)
    })
}

fn weights_for(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    uniform(rng, &[n], -1.0, 1.0)
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    positive: bool,
    f: fn(Var<'_, f64>) -> Var<'_, f64>,
) -> Case {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
    let x = if positive {
        uniform(rng, &shape, 0.2, 2.0)
    } else {
        signed_away(rng, &shape)
    };
    let w = weights_for(rng, x.numel());
    Case {
        inputs: vec![x],
        probe: projected(w, move |_, v| Ok(f(v[0]))),
    }
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    f: for<'g> fn(Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) -> Case {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3)];
    let a = signed_away(rng, &shape);
    // Keep the two operands apart so `minimum` never sits on a tie.
    let b = a.zip_map(&uniform(rng, &shape, 0.1, 1.0), |x, d| if d > 0.55 { x + d } else { x - d })
        .expect("same shape");
    let w = weights_for(rng, a.numel());
    Case {
        inputs: vec![a, b],
        probe: projected(w, move |_, v| f(v[0], v[1])),
    }
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let groups = *[1usize, 2].get(rng.random_range(0..2)).unwrap_or(&1);
    let c = groups * dim(rng, 1, 2);
    let o = groups * dim(rng, 1, 2);
    let k = [1usize, 3][rng.random_range(0..2)];
    let stride = dim(rng, 1, 2);
    let dilation = if k == 3 { dim(rng, 1, 2) } else { 1 };
    let (n, h, wd) = (dim(rng, 1, 2), dim(rng, 3, 6), dim(rng, 3, 6));
    let x = uniform(rng, &[n, c, h, wd], -1.0, 1.0);
    let w = uniform(rng, &[o, c / groups, k, k], -1.0, 1.0);
    let b = uniform(rng, &[o], -1.0, 1.0);
    let opts = crate::ops::Conv2dOptions {
        stride,
        dilation,
        groups,
    };
    let out_n = n * o * h.div_ceil(stride) * wd.div_ceil(stride);
    let pw = weights_for(rng, out_n);
    Case {
        inputs: vec![x, w, b],
        probe: projected(pw, move |_, v| v[0].conv2d(v[1], Some(v[2]), opts)),
    }
}

fn deform_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 2));
    let (h, wd) = (dim(rng, 3, 5), dim(rng, 3, 5));
    let x = uniform(rng, &[n, c, h, wd], -1.0, 1.0);
    // Offsets stay off the integer lattice, where bilinear weights kink.
    let off = uniform(rng, &[n, 18, h, wd], -1.5, 1.5).map(|v| {
        let frac = v - v.floor();
        if frac < 0.05 { v + 0.1 } else if frac > 0.95 { v - 0.1 } else { v }
    });
    let w = uniform(rng, &[o, c, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[o], -1.0, 1.0);
    let pw = weights_for(rng, n * o * h * wd);
    Case {
        inputs: vec![x, off, w, b],
        probe: projected(pw, |_, v| v[0].deform_conv2d(v[1], v[2], Some(v[3]))),
    }
}

fn norm_case(rng: &mut ChaCha8Rng, kind: u8) -> Case {
    let groups = dim(rng, 1, 2);
    let c = groups * dim(rng, 1, 2);
    let (n, h, wd) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 3));
    let n = if kind == 1 { n.max(2) } else { n };
    let x = uniform(rng, &[n, c, h, wd], -2.0, 2.0);
    let gamma = uniform(rng, &[c], 0.5, 1.5);
    let beta = uniform(rng, &[c], -0.5, 0.5);
    let mean = uniform(rng, &[c], -0.5, 0.5);
    let var = uniform(rng, &[c], 0.5, 2.0);
    let pw = weights_for(rng, x.numel());
    let probe: Probe = match kind {
        0 => projected(pw, move |_, v| v[0].group_norm(v[1], v[2], groups)),
        1 => projected(pw, |_, v| Ok(v[0].batch_norm_train(v[1], v[2])?.0)),
        _ => projected(pw, move |_, v| v[0].batch_norm_eval(v[1], v[2], &mean, &var)),
    };
    Case {
        inputs: vec![x, gamma, beta],
        probe,
    }
}

fn resize_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c) = (dim(rng, 1, 2), dim(rng, 1, 2));
    let (h, wd) = (dim(rng, 1, 6), dim(rng, 1, 6));
    let (oh, ow) = (dim(rng, 1, 8), dim(rng, 1, 8));
    let x = uniform(rng, &[n, c, h, wd], -1.0, 1.0);
    let pw = weights_for(rng, n * c * oh * ow);
    Case {
        inputs: vec![x],
        probe: projected(pw, move |_, v| v[0].bilinear_resize(oh, ow)),
    }
}

fn lstm_case(rng: &mut ChaCha8Rng) -> Case {
    let (b, i, hd) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    let x = uniform(rng, &[b, i], -1.0, 1.0);
    let h = uniform(rng, &[b, hd], -1.0, 1.0);
    let c = uniform(rng, &[b, hd], -1.0, 1.0);
    let w = uniform(rng, &[i + hd, 4 * hd], -1.0, 1.0);
    let bias = uniform(rng, &[4 * hd], -0.5, 0.5);
    let (ph, pc) = (weights_for(rng, b * hd), weights_for(rng, b * hd));
    Case {
        inputs: vec![x, h, c, w, bias],
        probe: Box::new(move |_, v| {
            let s = v[0].lstm_cell(crate::ops::LstmState { h: v[1], c: v[2] }, v[3], v[4])?;
            let a = project(s.h, &ph.reshape(&s.h.shape())?)?;
            let b = project(s.c, &pc.reshape(&s.c.shape())?)?;
            a.add(b)
        }),
    }
}

type Generator = fn(&mut ChaCha8Rng) -> Case;

fn generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("add", |r| binary_case(r, |a, b| a.add(b))),
        ("sub", |r| binary_case(r, |a, b| a.sub(b))),
        ("mul", |r| binary_case(r, |a, b| a.mul(b))),
        ("minimum", |r| binary_case(r, |a, b| a.minimum(b))),
        ("add_n", |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 4)];
            let k = dim(r, 1, 4);
            let inputs: Vec<_> = (0..k).map(|_| uniform(r, &shape, -1.0, 1.0)).collect();
            let w = weights_for(r, shape[0] * shape[1]);
            Case { inputs, probe: projected(w, |_, v| Var::add_n(v)) }
        }),
        ("neg", |r| unary_case(r, false, |v| v.neg())),
        ("scale", |r| unary_case(r, false, |v| v.scale(-1.7))),
        ("add_scalar", |r| unary_case(r, false, |v| v.add_scalar(0.3))),
        ("relu", |r| unary_case(r, false, |v| v.relu())),
        ("exp", |r| unary_case(r, false, |v| v.exp())),
        ("log", |r| unary_case(r, true, |v| v.log())),
        ("sigmoid", |r| unary_case(r, false, |v| v.sigmoid())),
        ("tanh", |r| unary_case(r, false, |v| v.tanh())),
        ("powf", |r| unary_case(r, true, |v| v.powf(1.5))),
        ("clamp", |r| unary_case(r, false, |v| v.clamp(-0.6, 0.7))),
        ("sum", |r| unary_case(r, false, |v| v.sum())),
        ("mean", |r| unary_case(r, false, |v| v.mean())),
        ("sum_axis", |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let axis = r.random_range(0..3);
            let x = uniform(r, &shape, -1.0, 1.0);
            let w = weights_for(r, x.numel() / shape[axis]);
            Case { inputs: vec![x], probe: projected(w, move |_, v| v[0].sum_axis(axis)) }
        }),
        ("sum_per_item", |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let x = uniform(r, &shape, -1.0, 1.0);
            let w = weights_for(r, shape[0]);
            Case { inputs: vec![x], probe: projected(w, |_, v| v[0].sum_per_item()) }
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            let x = uniform(r, &[a, b], -1.0, 1.0);
            let w = weights_for(r, a * b);
            Case { inputs: vec![x], probe: projected(w, move |_, v| v[0].reshape(&[b, a])) }
        }),
        ("concat", |r| {
            let axis = r.random_range(0..2);
            let k = dim(r, 1, 3);
            let other = dim(r, 1, 3);
            let mut total = 0;
            let inputs: Vec<_> = (0..k)
                .map(|_| {
                    let len = dim(r, 1, 3);
                    total += len;
                    let shape = if axis == 0 { [len, other] } else { [other, len] };
                    uniform(r, &shape, -1.0, 1.0)
                })
                .collect();
            let w = weights_for(r, total * other);
            Case { inputs, probe: projected(w, move |_, v| Var::concat(v, axis)) }
        }),
        ("slice", |r| {
            let shape = [dim(r, 1, 3), dim(r, 2, 6)];
            let len = dim(r, 1, shape[1] - 1);
            let start = r.random_range(0..=shape[1] - len);
            let x = uniform(r, &shape, -1.0, 1.0);
            let w = weights_for(r, shape[0] * len);
            Case { inputs: vec![x], probe: projected(w, move |_, v| v[0].slice(1, start, len)) }
        }),
        ("add_row", |r| {
            let shape = [dim(r, 1, 4), dim(r, 1, 4)];
            let x = uniform(r, &shape, -1.0, 1.0);
            let b = uniform(r, &shape[1..], -1.0, 1.0);
            let w = weights_for(r, x.numel());
            Case { inputs: vec![x, b], probe: projected(w, |_, v| v[0].add_row(v[1])) }
        }),
        ("softmax", |r| unary_case(r, false, |v| v.softmax())),
        ("log_softmax", |r| unary_case(r, false, |v| v.log_softmax())),
        ("pick", |r| {
            let shape = [dim(r, 1, 4), dim(r, 1, 5)];
            let idx: Vec<usize> = (0..shape[0]).map(|_| r.random_range(0..shape[1])).collect();
            let x = uniform(r, &shape, -1.0, 1.0);
            let w = weights_for(r, shape[0]);
            Case { inputs: vec![x], probe: projected(w, move |_, v| v[0].pick(&idx)) }
        }),
        ("matmul", |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &[k, n], -1.0, 1.0);
            let w = weights_for(r, m * n);
            Case { inputs: vec![a, b], probe: projected(w, |_, v| v[0].matmul(v[1])) }
        }),
        ("conv2d", conv_case),
        ("deform_conv2d", deform_case),
        ("group_norm", |r| norm_case(r, 0)),
        ("batch_norm_train", |r| norm_case(r, 1)),
        ("batch_norm_eval", |r| norm_case(r, 2)),
        ("bilinear_resize", resize_case),
        ("lstm_cell", lstm_case),
    ]
}

/// Runs [`check`] on `seeds` randomly shaped cases of every differentiable
/// op, with step `h = 1e-5`.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (op, gen) in generators() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ op.len() as u64);
            let case = gen(&mut rng);
            let res = check(&case.inputs, 1e-5, &case.probe)?;
            worst = worst.max(res.max_error());
        }
        out.push(SuiteEntry {
            op,
            cases: seeds as usize,
            worst,
        });
    }
    Ok(out)
}
