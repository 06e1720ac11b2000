//! Dense row-major f64 tensor, the storage unit for parameters and gradients.

use crate::error::{Error, Result};

/// A shape-tagged block of 64-bit floats, row-major.
///
/// Matrices are `[rows, cols]`; vectors are `[len]`. All training arithmetic
/// in this crate runs at 64-bit precision so finite-difference checks stay
/// tight.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::config(format!(
                "tensor shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a matrix tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a matrix tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let cols = self.shape[1];
        &mut self.data[r * cols + c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// y = W x (W is `[rows, cols]`, x has `cols` entries).
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols(), x.len());
    let (rows, cols) = (w.rows(), w.cols());
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &w.data[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        y[r] = acc;
    }
    y
}

/// y = Wᵀ x (x has `rows` entries, result has `cols`).
pub fn matvec_t(w: &Tensor, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.rows(), x.len());
    let (rows, cols) = (w.rows(), w.cols());
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let row = &w.data[r * cols..(r + 1) * cols];
        let xv = x[r];
        for (yv, wv) in y.iter_mut().zip(row) {
            *yv += wv * xv;
        }
    }
    y
}

/// grad += outer(dy, x), accumulated into a `[len(dy), len(x)]` matrix.
pub fn accumulate_outer(grad: &mut Tensor, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(grad.rows(), dy.len());
    debug_assert_eq!(grad.cols(), x.len());
    let cols = grad.cols();
    for (r, dv) in dy.iter().enumerate() {
        let row = &mut grad.data[r * cols..(r + 1) * cols];
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += dv * xv;
        }
    }
}

/// grad += v, elementwise into a vector tensor.
pub fn accumulate_vec(grad: &mut Tensor, v: &[f64]) {
    debug_assert_eq!(grad.len(), v.len());
    for (gv, vv) in grad.data.iter_mut().zip(v) {
        *gv += vv;
    }
}
