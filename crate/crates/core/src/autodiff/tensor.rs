//! Dense rank-1/rank-2 tensors of f64, row-major.

use crate::error::{CoreError, Result};

/// Dense numeric array. Rank is 1 or 2; data is row-major.
///
/// Zero-sized dimensions are allowed (an empty embedding lookup yields a
/// 0 x d tensor); parameter shapes are validated to be strictly positive
/// at model-construction time instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(CoreError::usage(format!(
                "tensor rank must be 1 or 2, got shape {:?}",
                shape
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::usage(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns, treating a rank-1 tensor as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn shape_string(&self) -> String {
        format!("{:?}", self.shape)
    }
}
