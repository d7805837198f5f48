//! Dense row-major tensors.
//!
//! Every op in the engine treats a tensor as a matrix of `rows() x cols()`,
//! where `cols()` is the extent of the last axis and `rows()` is the product of
//! all leading axes. A rank-0 tensor is a 1x1 matrix.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type the engine can run on.
///
/// Models run in `f32`; the finite-difference gradient checker runs the same
/// graph code in `f64`.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` over strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are given per
    /// (row, column) so transposed views cost nothing.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_count(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

fn check_extent<T>(buf: &[T], rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < buf.len(),
        "gemm operand out of bounds"
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_extent(a.0, m, k, a.1, a.2);
                check_extent(b.0, k, n, b.1, b.2);
                check_extent(c.0, m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above and
                // `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_count_must_match_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn rank_views() {
        let s = Tensor::<f32>::scalar(1.0);
        assert_eq!((s.rows(), s.cols()), (1, 1));
        let v = Tensor::<f32>::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!((v.rows(), v.cols()), (1, 3));
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!((t.rows(), t.cols()), (6, 4));
    }

    #[test]
    fn strided_gemm_transposes() {
        // a = [[1,2],[3,4]], b^T where b = [[5,6],[7,8]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, (&a, 2, 1), (&b, 1, 2), 0.0, (&mut c, 2, 1));
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
