//! Dense kernels shared by the forward and backward passes.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type the denoiser can run in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds of the corresponding pointer's allocation.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Row-major contiguous `rows x cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Mat {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `[start, start + width)`.
    pub fn cols(self, start: usize, width: usize) -> Self {
        debug_assert!(start + width <= self.cols);
        Mat {
            off: self.off + start * self.cs,
            cols: width,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Mutable strided matrix view.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatMut {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols(self, start: usize, width: usize) -> Self {
        debug_assert!(start + width <= self.cols);
        MatMut {
            off: self.off + start * self.cs,
            cols: width,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `out = x * w + bias` for row-major `x: n x in`, `w: in x out`.
pub fn linear<T: Real>(x: &[T], n: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let (din, dout) = (w.len() / bias.len(), bias.len());
    for row in out.chunks_exact_mut(dout) {
        row.copy_from_slice(bias);
    }
    gemm(T::one(), Mat::new(x, n, din), Mat::new(w, din, dout), T::one(), MatMut::new(out, n, dout));
}

/// Accumulates the gradients of [`linear`] and writes `dx` when requested.
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    dout: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let (din, dim_out) = (w.len() / db.len(), db.len());
    gemm(
        T::one(),
        Mat::new(x, n, din).t(),
        Mat::new(dout, n, dim_out),
        T::one(),
        MatMut::new(dw, din, dim_out),
    );
    for row in dout.chunks_exact(dim_out) {
        for (g, v) in db.iter_mut().zip(row) {
            *g = *g + *v;
        }
    }
    if let Some(dx) = dx {
        gemm(
            T::one(),
            Mat::new(dout, n, dim_out),
            Mat::new(w, din, dim_out).t(),
            T::zero(),
            MatMut::new(dx, n, din),
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Stores normalized rows in `xhat` and `1/std` in `rstd`.
pub fn layer_norm<T: Real>(
    x: &[T],
    dim: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let inv_dim = T::one() / T::from_usize(dim).unwrap();
    let eps = T::lit(LN_EPS);
    for (r, ((row, o), xh)) in x
        .chunks_exact(dim)
        .zip(out.chunks_exact_mut(dim))
        .zip(xhat.chunks_exact_mut(dim))
        .enumerate()
    {
        let mean = row.iter().copied().sum::<T>() * inv_dim;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_dim;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (row[i] - mean) * rs;
            xh[i] = h;
            o[i] = h * gain[i] + bias[i];
        }
    }
}

pub fn layer_norm_backward<T: Real>(
    dout: &[T],
    dim: usize,
    gain: &[T],
    xhat: &[T],
    rstd: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let inv_dim = T::one() / T::from_usize(dim).unwrap();
    for (r, ((dy, xh), dxr)) in dout
        .chunks_exact(dim)
        .zip(xhat.chunks_exact(dim))
        .zip(dx.chunks_exact_mut(dim))
        .enumerate()
    {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..dim {
            let d = dy[i] * gain[i];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xh[i];
            dgain[i] = dgain[i] + dy[i] * xh[i];
            dbias[i] = dbias[i] + dy[i];
        }
        mean_d = mean_d * inv_dim;
        mean_dx = mean_dx * inv_dim;
        for i in 0..dim {
            let d = dy[i] * gain[i];
            dxr[i] = rstd[r] * (d - mean_d - xh[i] * mean_dx);
        }
    }
}

/// In-place row-wise softmax.
pub fn softmax_rows<T: Real>(m: &mut [T], cols: usize) {
    for row in m.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}
