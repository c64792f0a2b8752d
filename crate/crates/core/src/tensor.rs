//! Dense row-major `f64` tensors of rank 1 or 2.

use std::fmt;

use crate::error::{contract, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(contract(format!("tensor rank must be 1 or 2, got {}", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(contract(format!("data length {} does not match dims {:?}", data.len(), dims)));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { dims: vec![rows.len(), cols], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns, treating a rank-1 tensor as a single row.
    pub fn shape2(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            _ => unreachable!("rank is always 1 or 2"),
        }
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (_, n) = self.shape2();
        self.data[row * n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let (_, n) = self.shape2();
        self.data[row * n + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, n) = self.shape2();
        &self.data[row * n..(row + 1) * n]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = self.shape2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self { dims: vec![n, m], data: out }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.shape2();
        let (k2, n) = other.shape2();
        if self.rank() != 2 || other.rank() != 2 || k != k2 {
            return Err(contract(format!("matmul dimension mismatch: {:?} x {:?}", self.dims, other.dims)));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { dims: vec![m, n], data: out })
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Bitwise equality, treating NaNs with identical payloads as equal.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("dims", &self.dims).field("data", &self.data).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_ranks() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        assert!(a.matmul(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().dims(), &[3, 2]);
        assert_eq!(a.transpose().transpose(), a);
    }
}
