use crate::error::{invalid, shape_err, Result};
use crate::graph::Var;
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

/// Stride, dilation and group count of a SAME-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn stride(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    pub fn depthwise(channels: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            groups: channels,
        }
    }
}

/// SAME padding: output extent is `ceil(input / stride)`. Returns
/// `(output, padding before)`; any odd remainder is padded after.
pub fn same_padding(input: usize, kernel: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let span = (kernel - 1) * dilation + 1;
    let total = ((out.max(1) - 1) * stride + span).saturating_sub(input);
    (out, total / 2)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
    dil: usize,
    groups: usize,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, opts: Conv2dOptions) -> Result<Self> {
        if x.ndim() != 4 || w.ndim() != 4 {
            return shape_err("conv2d", "4-D input and weight", (x.shape(), w.shape()));
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if opts.stride == 0 || opts.dilation == 0 || opts.groups == 0 {
            return invalid("conv2d", "stride, dilation and groups must be positive");
        }
        if n == 0 || c == 0 || h == 0 || wd == 0 || o == 0 || kh == 0 || kw == 0 {
            return invalid("conv2d", format!("zero-sized dims {:?} / {:?}", x.shape(), w.shape()));
        }
        if c % opts.groups != 0 || o % opts.groups != 0 || c / opts.groups != cg {
            return shape_err(
                "conv2d",
                format!("weight [_, {}, _, _] for {} groups", c / opts.groups.max(1), opts.groups),
                w.shape(),
            );
        }
        let (ho, pad_h) = same_padding(h, kh, opts.stride, opts.dilation);
        let (wo, pad_w) = same_padding(wd, kw, opts.stride, opts.dilation);
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho,
            wo,
            pad_h,
            pad_w,
            stride: opts.stride,
            dil: opts.dilation,
            groups: opts.groups,
        })
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn og(&self) -> usize {
        self.o / self.groups
    }

    fn rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate sampled by output index `o` and kernel tap `k`.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, dil: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// For every kernel tap and output pixel, the flat input pixel it
    /// reads, or `PAD` when it falls in the padding.
    fn tap_index(&self) -> Vec<u32> {
        let p = self.pixels();
        let mut idx = vec![PAD; self.kh * self.kw * p];
        for ki in 0..self.kh {
            for kj in 0..self.kw {
                let t = ki * self.kw + kj;
                for oi in 0..self.ho {
                    let Some(iy) = Self::src(oi, ki, self.stride, self.dil, self.pad_h, self.h) else {
                        continue;
                    };
                    for oj in 0..self.wo {
                        if let Some(ix) = Self::src(oj, kj, self.stride, self.dil, self.pad_w, self.w) {
                            idx[t * p + oi * self.wo + oj] = (iy * self.w + ix) as u32;
                        }
                    }
                }
            }
        }
        idx
    }

    /// Unfolds image `n`, group `g` into columns `off..off + pixels` of a
    /// row-major matrix with row length `ld`.
    fn im2col<T: Scalar>(&self, taps: &[u32], x: &[T], n: usize, g: usize, cols: &mut [T], ld: usize, off: usize) {
        let p = self.pixels();
        let kk = self.kh * self.kw;
        for cc in 0..self.cg() {
            let ch = g * self.cg() + cc;
            let img = &x[(n * self.c + ch) * self.h * self.w..][..self.h * self.w];
            for t in 0..kk {
                let row = cc * kk + t;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for (v, &i) in dst.iter_mut().zip(&taps[t * p..(t + 1) * p]) {
                    *v = if i == PAD { T::zero() } else { img[i as usize] };
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, taps: &[u32], cols: &[T], n: usize, g: usize, gx: &mut [T], ld: usize, off: usize) {
        let p = self.pixels();
        let kk = self.kh * self.kw;
        for cc in 0..self.cg() {
            let ch = g * self.cg() + cc;
            let img = &mut gx[(n * self.c + ch) * self.h * self.w..][..self.h * self.w];
            for t in 0..kk {
                let row = cc * kk + t;
                let src = &cols[row * ld + off..row * ld + off + p];
                for (&v, &i) in src.iter().zip(&taps[t * p..(t + 1) * p]) {
                    if i != PAD {
                        img[i as usize] = img[i as usize] + v;
                    }
                }
            }
        }
    }
}

const PAD: u32 = u32::MAX;

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, o: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [o] => shape_err("conv2d bias", [o], b.shape()),
        _ => Ok(()),
    }
}

/// Plain forward evaluation without recording on a graph.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(x, w, opts)?;
    check_bias(b, geo.o)?;
    Ok(forward(&geo, x, w, b))
}

fn is_depthwise(geo: &Geometry) -> bool {
    geo.cg() == 1 && geo.og() == 1
}

/// Direct depthwise convolution; im2col plus a 1-row gemm per channel is
/// mostly overhead at these sizes.
fn depthwise_forward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let (hw, p) = (geo.h * geo.w, geo.pixels());
    for n in 0..geo.n {
        for c in 0..geo.c {
            let img = &x[(n * geo.c + c) * hw..][..hw];
            let dst = &mut out[(n * geo.c + c) * p..][..p];
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let wv = w[(c * geo.kh + ki) * geo.kw + kj];
                    for oi in 0..geo.ho {
                        let Some(iy) = Geometry::src(oi, ki, geo.stride, geo.dil, geo.pad_h, geo.h) else {
                            continue;
                        };
                        for oj in 0..geo.wo {
                            if let Some(ix) = Geometry::src(oj, kj, geo.stride, geo.dil, geo.pad_w, geo.w) {
                                dst[oi * geo.wo + oj] = dst[oi * geo.wo + oj] + wv * img[iy * geo.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], gy: &[T], gx: Option<&mut [T]>, gw: Option<&mut [T]>) {
    let (hw, p) = (geo.h * geo.w, geo.pixels());
    let (mut gx, mut gw) = (gx, gw);
    for n in 0..geo.n {
        for c in 0..geo.c {
            let base = (n * geo.c + c) * hw;
            let g = &gy[(n * geo.c + c) * p..][..p];
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let widx = (c * geo.kh + ki) * geo.kw + kj;
                    let wv = w[widx];
                    let mut acc = T::zero();
                    for oi in 0..geo.ho {
                        let Some(iy) = Geometry::src(oi, ki, geo.stride, geo.dil, geo.pad_h, geo.h) else {
                            continue;
                        };
                        for oj in 0..geo.wo {
                            if let Some(ix) = Geometry::src(oj, kj, geo.stride, geo.dil, geo.pad_w, geo.w) {
                                let gv = g[oi * geo.wo + oj];
                                let xi = base + iy * geo.w + ix;
                                acc = acc + gv * x[xi];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xi] = gx[xi] + gv * wv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] = gw[widx] + acc;
                    }
                }
            }
        }
    }
}

/// Copies group `g` of `[N, O, P]` into a `[og, N * P]` matrix, or back.
fn gather_group<T: Scalar>(geo: &Geometry, src: &[T], g: usize, dst: &mut [T]) {
    let (p, og, np) = (geo.pixels(), geo.og(), geo.n * geo.pixels());
    for o in 0..og {
        for n in 0..geo.n {
            let from = &src[(n * geo.o + g * og + o) * p..][..p];
            dst[o * np + n * p..o * np + (n + 1) * p].copy_from_slice(from);
        }
    }
}

fn scatter_group<T: Scalar>(geo: &Geometry, src: &[T], g: usize, dst: &mut [T]) {
    let (p, og, np) = (geo.pixels(), geo.og(), geo.n * geo.pixels());
    for o in 0..og {
        for n in 0..geo.n {
            dst[(n * geo.o + g * og + o) * p..][..p].copy_from_slice(&src[o * np + n * p..o * np + (n + 1) * p]);
        }
    }
}

fn forward<T: Scalar>(geo: &Geometry, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (p, rows, og) = (geo.pixels(), geo.rows(), geo.og());
    let np = geo.n * p;
    let mut out = vec![T::zero(); geo.n * geo.o * p];
    if is_depthwise(geo) {
        depthwise_forward(geo, x.data(), w.data(), &mut out);
    } else {
        let mut cols = vec![T::zero(); rows * np];
        let mut tmp = vec![T::zero(); og * np];
        let taps = geo.tap_index();
        for g in 0..geo.groups {
            for n in 0..geo.n {
                geo.im2col(&taps, x.data(), n, g, &mut cols, np, n * p);
            }
            let wg = &w.data()[g * og * rows..(g + 1) * og * rows];
            gemm(
                wg,
                MatLayout::row_major(og, rows),
                &cols,
                MatLayout::row_major(rows, np),
                T::zero(),
                &mut tmp,
                MatLayout::row_major(og, np),
            );
            scatter_group(geo, &tmp, g, &mut out);
        }
    }
    if let Some(b) = b {
        for n in 0..geo.n {
            for o in 0..geo.o {
                let bo = b.data()[o];
                for v in &mut out[(n * geo.o + o) * p..(n * geo.o + o + 1) * p] {
                    *v = *v + bo;
                }
            }
        }
    }
    Tensor::from_parts(vec![geo.n, geo.o, geo.ho, geo.wo], out)
}

pub(crate) fn bias_grad<T: Scalar>(g: &Tensor<T>, n: usize, o: usize, p: usize) -> Tensor<T> {
    let mut gb = vec![T::zero(); o];
    for ni in 0..n {
        for (oi, acc) in gb.iter_mut().enumerate() {
            *acc = *acc + g.data()[(ni * o + oi) * p..(ni * o + oi + 1) * p].iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts(vec![o], gb)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// SAME-padded cross-correlation. `self` is `[N, C, H, W]`, `weight` is
    /// `[O, C / groups, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        opts: Conv2dOptions,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let geo = Geometry::new(&x, &w, opts)?;
        check_bias(b.as_ref(), geo.o)?;
        let y = forward(&geo, &x, &w, b.as_ref());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph.record(y, &parents, move |gy, needs| {
            let (p, rows, og) = (geo.pixels(), geo.rows(), geo.og());
            let np = geo.n * p;
            let mut gx = needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut gw = needs[1].then(|| vec![T::zero(); w.numel()]);
            if is_depthwise(&geo) {
                depthwise_backward(&geo, x.data(), w.data(), gy.data(), gx.as_deref_mut(), gw.as_deref_mut());
            } else if gx.is_some() || gw.is_some() {
                let mut cols = vec![T::zero(); rows * np];
                let mut gyg = vec![T::zero(); og * np];
                let taps = geo.tap_index();
                for g in 0..geo.groups {
                    gather_group(&geo, gy.data(), g, &mut gyg);
                    if let Some(gw) = gw.as_mut() {
                        for n in 0..geo.n {
                            geo.im2col(&taps, x.data(), n, g, &mut cols, np, n * p);
                        }
                        gemm(
                            &gyg,
                            MatLayout::row_major(og, np),
                            &cols,
                            MatLayout::row_major(rows, np).t(),
                            T::one(),
                            &mut gw[g * og * rows..(g + 1) * og * rows],
                            MatLayout::row_major(og, rows),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wg = &w.data()[g * og * rows..(g + 1) * og * rows];
                        gemm(
                            wg,
                            MatLayout::row_major(og, rows).t(),
                            &gyg,
                            MatLayout::row_major(og, np),
                            T::zero(),
                            &mut cols,
                            MatLayout::row_major(rows, np),
                        );
                        for n in 0..geo.n {
                            geo.col2im(&taps, &cols, n, g, gx, np, n * p);
                        }
                    }
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            ];
            if has_bias {
                grads.push(needs[2].then(|| bias_grad(gy, geo.n, geo.o, p)));
            }
            grads
        }))
    }
}
