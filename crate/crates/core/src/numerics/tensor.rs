//! Dense row-major tensor.

use serde::{Deserialize, Serialize};

use super::NumericsError;
use crate::real::Real;

/// Dense tensor with an explicit shape. Rank 1 and 2 cover the whole
/// model; feature grids flatten to `(d*d, f)` before they reach the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::BadShape {
                shape,
                data_len: data.len(),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor literal")?;
        Ok(t)
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Internal constructor without the length/finiteness checks; callers
    /// guarantee consistency (the graph re-checks op outputs).
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::BadShape {
                    shape: vec![rows.len(), cols],
                    data_len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<S>) -> Result<Self, NumericsError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Scalar tensors (rank 0 or single element) expose their value.
    pub fn item(&self) -> Result<S, NumericsError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    /// Interpret as 2-D, treating a vector as a single row.
    pub fn dims2(&self) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((1, *n)),
            _ => Err(NumericsError::NotTwoD {
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (_, c) = self.dims2().expect("row() on rank <= 2 tensor");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> S {
        let (_, cols) = self.dims2().expect("at2() on rank <= 2 tensor");
        self.data[r * cols + c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, label: &str) -> Result<(), NumericsError> {
        if self.is_all_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite {
                label: label.to_owned(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_scaled_assign(&mut self, other: &Tensor<S>, factor: S) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * factor;
        }
    }

    pub fn scale_assign(&mut self, factor: S) {
        for a in &mut self.data {
            *a = *a * factor;
        }
    }

    /// Materialized 2-D transpose.
    pub fn transposed2(&self) -> Result<Self, NumericsError> {
        let (r, c) = self.dims2()?;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], data)
    }

    /// Convert element type (f64 checkpoints reloaded as f32 and back).
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64_lossy()).expect("finite value convertible"))
                .collect(),
        }
    }
}

/// `C = A * B` for 2-D operands, ikj loop order over contiguous rows.
pub(crate) fn matmul_into<S: Real>(a: &Tensor<S>, b: &Tensor<S>, out: &mut [S], m: usize, k: usize, n: usize) {
    let a_data = a.data();
    let b_data = b.data();
    for i in 0..m {
        let a_row = &a_data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_val) in a_row.iter().enumerate() {
            if a_val == S::zero() {
                continue;
            }
            let b_row = &b_data[l * n..(l + 1) * n];
            for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_val * b_val;
            }
        }
    }
}
