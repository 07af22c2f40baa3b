//! Dense row-major tensors.
//!
//! The only shapes used in practice are vectors and matrices, but the shape
//! is kept as a general dimension list so activations recorded as `d x n`
//! and weight matrices `d_l x d_{l-1}` share one carrier type.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Number of rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor::filled(shape, S::ZERO)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose a matrix into a freshly allocated tensor.
    pub fn transposed(&self) -> Tensor<S> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }
}

/// out = a (m x k) * b (k x n), both row-major.
pub fn matmul_nn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, out: &mut Tensor<S>) {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "inner dims {} vs {}", k, k2);
    assert_eq!(out.shape(), &[m, n]);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            S::ZERO,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out = a (m x k) * b^T where b is (n x k) row-major.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, out: &mut Tensor<S>) {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "inner dims {} vs {}", k, k2);
    assert_eq!(out.shape(), &[m, n]);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            1,
            k as isize,
            S::ZERO,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out = a^T * b where a is (k x m) and b is (k x n), both row-major.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, out: &mut Tensor<S>) {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "inner dims {} vs {}", k, k2);
    assert_eq!(out.shape(), &[m, n]);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.data().as_ptr(),
            1,
            m as isize,
            b.data().as_ptr(),
            n as isize,
            1,
            S::ZERO,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
