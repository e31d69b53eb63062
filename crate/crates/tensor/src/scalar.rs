use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c <- alpha * a @ b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(values: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(values: &[f32], out: &mut Vec<u8>) {
        out.reserve(values.len() * 4);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(values: &[f64], out: &mut Vec<u8>) {
        out.reserve(values.len() * 8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}

/// Row-major matrix view used by [`gemm`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize
    }
}

/// Below this many multiply-adds a plain loop beats packing.
const SMALL_GEMM: usize = 64 * 1024;

fn small_gemm<T: Scalar>(a: &[T], la: MatLayout, b: &[T], lb: MatLayout, beta: T, c: &mut [T], lc: MatLayout) {
    let at = |m: &[T], l: MatLayout, i: usize, j: usize| m[(i as isize * l.rs + j as isize * l.cs) as usize];
    let (m, k, n) = (lc.rows, la.cols, lc.cols);
    let scale = |v: T| if beta == T::zero() { T::zero() } else { v * beta };
    if lc.cs == 1 && lb.cs == 1 {
        for i in 0..m {
            let crow = &mut c[(i as isize * lc.rs) as usize..][..n];
            for v in crow.iter_mut() {
                *v = scale(*v);
            }
            for kk in 0..k {
                let av = at(a, la, i, kk);
                let brow = &b[(kk as isize * lb.rs) as usize..][..n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
        return;
    }
    if la.cs == 1 && lb.rs == 1 {
        for i in 0..m {
            let arow = &a[(i as isize * la.rs) as usize..][..k];
            for j in 0..n {
                let bcol = &b[(j as isize * lb.cs) as usize..][..k];
                let mut acc = [T::zero(); 4];
                let mut ac = arow.chunks_exact(4);
                let mut bc = bcol.chunks_exact(4);
                for (x, y) in (&mut ac).zip(&mut bc) {
                    for t in 0..4 {
                        acc[t] = acc[t] + x[t] * y[t];
                    }
                }
                let mut dot = (acc[0] + acc[1]) + (acc[2] + acc[3]);
                for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
                    dot = dot + x * y;
                }
                let idx = (i as isize * lc.rs + j as isize * lc.cs) as usize;
                c[idx] = scale(c[idx]) + dot;
            }
        }
        return;
    }
    for i in 0..m {
        for j in 0..n {
            let idx = (i as isize * lc.rs + j as isize * lc.cs) as usize;
            c[idx] = scale(c[idx]);
        }
        for kk in 0..k {
            let av = at(a, la, i, kk);
            for j in 0..n {
                let idx = (i as isize * lc.rs + j as isize * lc.cs) as usize;
                c[idx] = c[idx] + av * at(b, lb, kk, j);
            }
        }
    }
}

/// `c <- a @ b + beta * c`.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    beta: T,
    c: &mut [T],
    lc: MatLayout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner dims");
    assert_eq!(la.rows, lc.rows, "gemm rows");
    assert_eq!(lb.cols, lc.cols, "gemm cols");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for v in c.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    assert!(la.max_offset() < a.len());
    assert!(lb.max_offset() < b.len());
    assert!(lc.max_offset() < c.len());
    if la.rows * la.cols * lb.cols <= SMALL_GEMM {
        small_gemm(a, la, b, lb, beta, c, lc);
        return;
    }
    // SAFETY: layouts were bounds-checked against the slices above.
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            T::one(),
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}
