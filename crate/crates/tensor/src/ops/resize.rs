use crate::error::{invalid, shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-output-index interpolation taps along one axis (half-pixel centers,
/// clamped at the border).
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == input - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

struct Plan {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn plan<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Plan> {
    if x.ndim() != 4 {
        return shape_err("bilinear_resize", "[N, C, H, W]", x.shape());
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return invalid("bilinear_resize", format!("zero-sized resize {h}x{w} -> {oh}x{ow}"));
    }
    Ok(Plan {
        n: x.shape()[0] * x.shape()[1],
        h,
        w,
        oh,
        ow,
        ys: axis_taps(h, oh),
        xs: axis_taps(w, ow),
    })
}

fn apply<T: Scalar>(pl: &Plan, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); pl.n * pl.oh * pl.ow];
    for plane in 0..pl.n {
        let src = &x[plane * pl.h * pl.w..(plane + 1) * pl.h * pl.w];
        let dst = &mut out[plane * pl.oh * pl.ow..(plane + 1) * pl.oh * pl.ow];
        for (oy, &(y0, y1, fy)) in pl.ys.iter().enumerate() {
            let fy = T::c(fy);
            for (ox, &(x0, x1, fx)) in pl.xs.iter().enumerate() {
                let fx = T::c(fx);
                let top = src[y0 * pl.w + x0] * (T::one() - fx) + src[y0 * pl.w + x1] * fx;
                let bot = src[y1 * pl.w + x0] * (T::one() - fx) + src[y1 * pl.w + x1] * fx;
                dst[oy * pl.ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Plain forward evaluation without recording on a graph.
pub fn bilinear_resize_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let pl = plan(x, oh, ow)?;
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    Ok(Tensor::from_parts(shape, apply(&pl, x.data())))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.ndim() == 4 && x.shape()[2] == out_h && x.shape()[3] == out_w {
            return Ok(self);
        }
        let pl = plan(&x, out_h, out_w)?;
        let mut shape = x.shape().to_vec();
        shape[2] = out_h;
        shape[3] = out_w;
        let y = Tensor::from_parts(shape, apply(&pl, x.data()));
        let in_shape = x.shape().to_vec();
        Ok(self.graph.record(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); pl.n * pl.h * pl.w];
            for plane in 0..pl.n {
                let gs = &g.data()[plane * pl.oh * pl.ow..(plane + 1) * pl.oh * pl.ow];
                let dst = &mut gx[plane * pl.h * pl.w..(plane + 1) * pl.h * pl.w];
                for (oy, &(y0, y1, fy)) in pl.ys.iter().enumerate() {
                    let fy = T::c(fy);
                    for (ox, &(x0, x1, fx)) in pl.xs.iter().enumerate() {
                        let fx = T::c(fx);
                        let gv = gs[oy * pl.ow + ox];
                        let (top, bot) = (gv * (T::one() - fy), gv * fy);
                        dst[y0 * pl.w + x0] = dst[y0 * pl.w + x0] + top * (T::one() - fx);
                        dst[y0 * pl.w + x1] = dst[y0 * pl.w + x1] + top * fx;
                        dst[y1 * pl.w + x0] = dst[y1 * pl.w + x0] + bot * (T::one() - fx);
                        dst[y1 * pl.w + x1] = dst[y1 * pl.w + x1] + bot * fx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        }))
    }
}
