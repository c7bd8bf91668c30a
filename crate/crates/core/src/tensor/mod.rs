//! Dense `f64` tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain immutable value. A [`Tape`] records every operation
//! applied to [`Var`] handles during one forward pass; [`Tape::backward`]
//! walks it once in reverse and returns a [`Gradients`] table.

mod gemm;
mod ops;
mod tape;

pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that
    /// `data` has exactly `prod(shape)` entries. An empty shape is a scalar.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let Some(&rows) = self.shape.first() else {
            return Err(Error::Dimension("slice_rows on a scalar".into()));
        };
        if count == 0 || start + count > rows {
            return Err(Error::Dimension(format!(
                "rows {start}..{} out of range for {rows}",
                start + count
            )));
        }
        let stride = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * stride..(start + count) * stride].to_vec(),
        ))
    }

    /// Gathers columns of a 2-D tensor.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Tensor> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Dimension(format!(
                "select_columns needs a matrix, got {:?}",
                self.shape
            )));
        };
        if columns.is_empty() {
            return Err(Error::Dimension("select_columns with no columns".into()));
        }
        if let Some(&c) = columns.iter().find(|&&c| c >= cols) {
            return Err(Error::Dimension(format!("column {c} out of range for {cols}")));
        }
        let mut out = Vec::with_capacity(rows * columns.len());
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            out.extend(columns.iter().map(|&c| row[c]));
        }
        Ok(Tensor::from_parts(vec![rows, columns.len()], out))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Dimension(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Cosine similarity of two flat vectors. Returns `None` when either has zero
/// norm. Not differentiable; used on already-computed gradients.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}
