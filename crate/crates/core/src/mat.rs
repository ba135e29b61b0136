//! Dense row-major matrices over `f32`/`f64` with GEMM-backed multiplication.
//!
//! Everything in the model is rank 1 or 2; batches are handled by stacking
//! rows, so a single matrix type covers the whole pipeline.

use std::fmt;

/// Element type for all numeric kernels. Implemented for `f32` and `f64`.
///
/// The model is generic over this trait so the same code path can be run at
/// both precisions (gradient checks compare the two).
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * op(a) @ op(b) + beta * c` where `op` is an optional
    /// transpose. `a` is `m x k` after `op`, `b` is `k x n` after `op`,
    /// `c` is `m x n`, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// `c = alpha * a @ b + beta * c` over strided views into larger
    /// buffers: operand `x` starts at `x[x_off]` and element `(i, j)` lives
    /// at `x[x_off + i * rsx + j * csx]`. Every addressed element must fall
    /// inside its slice; callers pass offsets/strides derived from matrix
    /// shapes they have already validated.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_off: usize,
        rsa: usize,
        csa: usize,
        b: &[Self],
        b_off: usize,
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        c_off: usize,
        rsc: usize,
        csc: usize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: a buffer mismatch");
                assert_eq!(b.len(), k * n, "gemm: b buffer mismatch");
                assert_eq!(c.len(), m * n, "gemm: c buffer mismatch");
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                // Row stride / column stride of the stored buffers. A
                // transposed operand is the same buffer read with the
                // strides swapped.
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn gemm_view(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_off: usize,
                rsa: usize,
                csa: usize,
                b: &[Self],
                b_off: usize,
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                c_off: usize,
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                let top = |off: usize, rows: usize, rs: usize, cols: usize, cs: usize| {
                    off + (rows - 1) * rs + (cols - 1) * cs
                };
                assert!(top(a_off, m, rsa, k, csa) < a.len(), "gemm_view: a out of bounds");
                assert!(top(b_off, k, rsb, n, csb) < b.len(), "gemm_view: b out of bounds");
                assert!(top(c_off, m, rsc, n, csc) < c.len(), "gemm_view: c out of bounds");
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr().add(a_off),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr().add(b_off),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr().add(c_off),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "from_vec: length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// 1x1 matrix holding a single scalar.
    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a 1x1 matrix.
    pub fn item(&self) -> T {
        assert_eq!(self.shape(), (1, 1), "item: matrix is {}x{}", self.rows, self.cols);
        self.data[0]
    }

    /// `op(self) @ op(other)` with optional transposes.
    pub fn matmul(&self, ta: bool, other: &Self, tb: bool) -> Self {
        let (m, k) = if ta { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let (kb, n) = if tb { (other.cols, other.rows) } else { (other.rows, other.cols) };
        assert_eq!(k, kb, "matmul: inner dimensions {} vs {}", k, kb);
        let mut out = Self::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            ta,
            &other.data,
            tb,
            T::zero(),
            &mut out.data,
        );
        out
    }

    /// `self += alpha * op(a) @ op(b)`.
    pub fn gemm_acc(&mut self, alpha: T, a: &Self, ta: bool, b: &Self, tb: bool) {
        let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(k, kb, "gemm_acc: inner dimensions {} vs {}", k, kb);
        assert_eq!((self.rows, self.cols), (m, n), "gemm_acc: output shape");
        T::gemm(m, k, n, alpha, &a.data, ta, &b.data, tb, T::one(), &mut self.data);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign: shape mismatch");
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += *s;
        }
    }

    /// Element-wise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * *s;
        }
    }

    pub fn scale_in_place(&mut self, alpha: T) {
        for d in &mut self.data {
            *d *= alpha;
        }
    }

    /// Sum of squares of all elements, accumulated in f64.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|&x| x.to_f64() * x.to_f64()).sum()
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshaped: element count");
        Self {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    /// Exact element-wise cast to another precision.
    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Largest absolute difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

impl<T: Scalar> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat<{}x{}>", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
