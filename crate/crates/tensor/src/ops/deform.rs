//! Deformable convolution (v1): every kernel tap samples the input at its
//! regular grid position shifted by a learned `(dy, dx)` offset, using
//! bilinear interpolation with zeros outside the image.

use crate::error::{invalid, shape_err, Result};
use crate::graph::Var;
use crate::ops::conv::{bias_grad, same_padding};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, offsets: &Tensor<T>, w: &Tensor<T>) -> Result<Self> {
        if x.ndim() != 4 || w.ndim() != 4 || offsets.ndim() != 4 {
            return shape_err(
                "deform_conv2d",
                "4-D input, offsets and weight",
                (x.shape(), offsets.shape(), w.shape()),
            );
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, cw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if n == 0 || c == 0 || h == 0 || wd == 0 || o == 0 {
            return invalid("deform_conv2d", format!("zero-sized dims {:?}", x.shape()));
        }
        if cw != c {
            return shape_err("deform_conv2d weight", [o, c, kh, kw], w.shape());
        }
        let want = [n, 2 * kh * kw, h, wd];
        if offsets.shape() != want {
            return shape_err("deform_conv2d offsets", want, offsets.shape());
        }
        let (_, pad_h) = same_padding(h, kh, 1, 1);
        let (_, pad_w) = same_padding(wd, kw, 1, 1);
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            pad_h,
            pad_w,
        })
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn rows(&self) -> usize {
        self.c * self.taps()
    }

    /// Sampling position of tap `t` for output pixel `(i, j)` of image `n`.
    #[inline]
    fn position<T: Scalar>(&self, off: &[T], n: usize, t: usize, i: usize, j: usize) -> (T, T) {
        let (ki, kj) = (t / self.kw, t % self.kw);
        let p = self.pixels();
        let base = n * 2 * self.taps() * p;
        let dy = off[base + (2 * t) * p + i * self.w + j];
        let dx = off[base + (2 * t + 1) * p + i * self.w + j];
        let py = T::c(i as f64 + ki as f64 - self.pad_h as f64) + dy;
        let px = T::c(j as f64 + kj as f64 - self.pad_w as f64) + dx;
        (py, px)
    }
}

/// Bilinear corner indices and weights for a fractional position.
struct Sample<T> {
    corners: [(isize, isize, T); 4],
    ly: T,
    lx: T,
}

#[inline]
fn sample_at<T: Scalar>(py: T, px: T) -> Sample<T> {
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let (y0, x0) = (y0.to_isize().unwrap_or(isize::MIN / 2), x0.to_isize().unwrap_or(isize::MIN / 2));
    let one = T::one();
    Sample {
        corners: [
            (y0, x0, (one - ly) * (one - lx)),
            (y0, x0 + 1, (one - ly) * lx),
            (y0 + 1, x0, ly * (one - lx)),
            (y0 + 1, x0 + 1, ly * lx),
        ],
        ly,
        lx,
    }
}

#[inline]
fn pixel<T: Scalar>(img: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        img[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// In-range bilinear corners as `(flat index, weight)`; out-of-range
/// corners get weight zero at index 0.
#[inline]
fn valid_corners<T: Scalar>(s: &Sample<T>, h: usize, w: usize) -> [(usize, T); 4] {
    s.corners.map(|(y, x, wt)| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            (y as usize * w + x as usize, wt)
        } else {
            (0, T::zero())
        }
    })
}

fn build_cols<T: Scalar>(geo: &Geometry, x: &[T], off: &[T], n: usize, cols: &mut [T]) {
    let p = geo.pixels();
    let imgs = &x[n * geo.c * p..(n + 1) * geo.c * p];
    for t in 0..geo.taps() {
        for i in 0..geo.h {
            for j in 0..geo.w {
                let (py, px) = geo.position(off, n, t, i, j);
                let cs = valid_corners(&sample_at(py, px), geo.h, geo.w);
                let pix = i * geo.w + j;
                for c in 0..geo.c {
                    let img = &imgs[c * p..(c + 1) * p];
                    let v = cs[0].1 * img[cs[0].0] + cs[1].1 * img[cs[1].0] + cs[2].1 * img[cs[2].0] + cs[3].1 * img[cs[3].0];
                    cols[(c * geo.taps() + t) * p + pix] = v;
                }
            }
        }
    }
}

fn forward<T: Scalar>(
    geo: &Geometry,
    x: &Tensor<T>,
    off: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (p, rows) = (geo.pixels(), geo.rows());
    let mut out = vec![T::zero(); geo.n * geo.o * p];
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..geo.n {
        build_cols(geo, x.data(), off.data(), n, &mut cols);
        gemm(
            w.data(),
            MatLayout::row_major(geo.o, rows),
            &cols,
            MatLayout::row_major(rows, p),
            T::zero(),
            &mut out[n * geo.o * p..(n + 1) * geo.o * p],
            MatLayout::row_major(geo.o, p),
        );
        if let Some(b) = b {
            for o in 0..geo.o {
                for v in &mut out[(n * geo.o + o) * p..(n * geo.o + o + 1) * p] {
                    *v = *v + b.data()[o];
                }
            }
        }
    }
    Tensor::from_parts(vec![geo.n, geo.o, geo.h, geo.w], out)
}

/// Plain forward evaluation without recording on a graph.
pub fn deform_conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(x, offsets, w)?;
    Ok(forward(&geo, x, offsets, w, b))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Deformable 3x3 (or any odd k) convolution, stride 1, SAME padding.
    /// `offsets` is `[N, 2*kh*kw, H, W]` with channel `2t` holding the row
    /// shift and `2t + 1` the column shift of tap `t`.
    pub fn deform_conv2d(
        self,
        offsets: Var<'g, T>,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let (x, off, w) = (self.value(), offsets.value(), weight.value());
        let b = bias.map(|b| b.value());
        let geo = Geometry::new(&x, &off, &w)?;
        if let Some(b) = &b {
            if b.shape() != [geo.o] {
                return shape_err("deform_conv2d bias", [geo.o], b.shape());
            }
        }
        let y = forward(&geo, &x, &off, &w, b.as_ref());
        let mut parents = vec![self, offsets, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph.record(y, &parents, move |gy, needs| {
            let (p, rows, taps) = (geo.pixels(), geo.rows(), geo.taps());
            let mut gx = needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut goff = needs[1].then(|| vec![T::zero(); off.numel()]);
            let mut gw = needs[2].then(|| vec![T::zero(); w.numel()]);
            let mut cols = vec![T::zero(); rows * p];
            let mut gcols = vec![T::zero(); rows * p];
            for n in 0..geo.n {
                let gyn = &gy.data()[n * geo.o * p..(n + 1) * geo.o * p];
                if let Some(gw) = gw.as_mut() {
                    build_cols(&geo, x.data(), off.data(), n, &mut cols);
                    gemm(
                        gyn,
                        MatLayout::row_major(geo.o, p),
                        &cols,
                        MatLayout::row_major(rows, p).t(),
                        T::one(),
                        gw,
                        MatLayout::row_major(geo.o, rows),
                    );
                }
                if gx.is_none() && goff.is_none() {
                    continue;
                }
                gemm(
                    w.data(),
                    MatLayout::row_major(geo.o, rows).t(),
                    gyn,
                    MatLayout::row_major(geo.o, p),
                    T::zero(),
                    &mut gcols,
                    MatLayout::row_major(rows, p),
                );
                let off_base = n * 2 * taps * p;
                for t in 0..taps {
                    for i in 0..geo.h {
                        for j in 0..geo.w {
                            let (py, px) = geo.position(off.data(), n, t, i, j);
                            let s = sample_at(py, px);
                            let (mut dpy, mut dpx) = (T::zero(), T::zero());
                            for c in 0..geo.c {
                                let gc = gcols[(c * taps + t) * p + i * geo.w + j];
                                if gc == T::zero() {
                                    continue;
                                }
                                let base = (n * geo.c + c) * p;
                                if let Some(gx) = gx.as_mut() {
                                    for &(y, xx, wt) in &s.corners {
                                        if y >= 0 && xx >= 0 && (y as usize) < geo.h && (xx as usize) < geo.w {
                                            let idx = base + y as usize * geo.w + xx as usize;
                                            gx[idx] = gx[idx] + wt * gc;
                                        }
                                    }
                                }
                                if goff.is_some() {
                                    let img = &x.data()[base..base + p];
                                    let [(y0, x0, _), _, _, (y1, x1, _)] = s.corners;
                                    let v00 = pixel(img, geo.h, geo.w, y0, x0);
                                    let v01 = pixel(img, geo.h, geo.w, y0, x1);
                                    let v10 = pixel(img, geo.h, geo.w, y1, x0);
                                    let v11 = pixel(img, geo.h, geo.w, y1, x1);
                                    let one = T::one();
                                    dpy = dpy + gc * ((one - s.lx) * (v10 - v00) + s.lx * (v11 - v01));
                                    dpx = dpx + gc * ((one - s.ly) * (v01 - v00) + s.ly * (v11 - v10));
                                }
                            }
                            if let Some(goff) = goff.as_mut() {
                                let pix = i * geo.w + j;
                                goff[off_base + 2 * t * p + pix] = goff[off_base + 2 * t * p + pix] + dpy;
                                goff[off_base + (2 * t + 1) * p + pix] =
                                    goff[off_base + (2 * t + 1) * p + pix] + dpx;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                goff.map(|d| Tensor::from_parts(off.shape().to_vec(), d)),
                gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            ];
            if has_bias {
                grads.push(needs[3].then(|| bias_grad(gy, geo.n, geo.o, p)));
            }
            grads
        }))
    }
}
