use serde::{Deserialize, Serialize};

use super::Precision;
use crate::error::{check_len, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector {
    data: Vec<f64>,
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self::new(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseVector {
        DenseVector::new(self.data.iter().map(|&x| f(x)).collect())
    }

    fn zip_with(
        &self,
        other: &DenseVector,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseVector> {
        check_len(op, self.len(), other.len())?;
        Ok(DenseVector::new(
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &DenseVector, p: Precision) -> Result<DenseVector> {
        self.zip_with(other, "vector add", |a, b| p.add(a, b))
    }

    pub fn sub(&self, other: &DenseVector, p: Precision) -> Result<DenseVector> {
        self.zip_with(other, "vector sub", |a, b| p.sub(a, b))
    }

    pub fn hadamard(&self, other: &DenseVector, p: Precision) -> Result<DenseVector> {
        self.zip_with(other, "hadamard", |a, b| p.mul(a, b))
    }

    pub fn scale(&self, s: f64, p: Precision) -> DenseVector {
        self.map(|a| p.mul(a, s))
    }

    pub fn dot(&self, other: &DenseVector, p: Precision) -> Result<f64> {
        check_len("dot", self.len(), other.len())?;
        Ok(p.dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self, p: Precision) -> f64 {
        p.dot(&self.data, &self.data)
    }

    /// Largest absolute entry (0 for an empty vector).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `max_i |self_i - other_i|`, computed exactly in `f64`.
    pub fn linf_dist(&self, other: &DenseVector) -> Result<f64> {
        check_len("linf", self.len(), other.len())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn round_to(&self, p: Precision) -> DenseVector {
        self.map(|x| p.round(x))
    }

    /// Index of the largest entry; the first one on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix construction", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_len("matrix rows", c, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn matvec(&self, v: &DenseVector, p: Precision) -> Result<DenseVector> {
        check_len("matvec", self.cols, v.len())?;
        Ok(DenseVector::new(
            (0..self.rows).map(|i| p.dot(self.row(i), v.as_slice())).collect(),
        ))
    }

    /// `(scale * u) vᵀ` at precision `p`.
    pub fn outer(u: &DenseVector, v: &DenseVector, scale: f64, p: Precision) -> DenseMatrix {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &ui in u.iter() {
            let su = p.mul(ui, scale);
            data.extend(v.iter().map(|&vj| p.mul(su, vj)));
        }
        DenseMatrix {
            rows: u.len(),
            cols: v.len(),
            data,
        }
    }

    fn check_shape(&self, other: &DenseMatrix, op: &'static str) -> Result<()> {
        check_len(op, self.rows, other.rows)?;
        check_len(op, self.cols, other.cols)
    }

    pub fn add(&self, other: &DenseMatrix, p: Precision) -> Result<DenseMatrix> {
        self.check_shape(other, "matrix add")?;
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| p.add(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &DenseMatrix, p: Precision) -> Result<DenseMatrix> {
        self.check_shape(other, "matrix sub")?;
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| p.sub(a, b))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn round_to(&self, p: Precision) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| p.round(x)).collect(),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}
