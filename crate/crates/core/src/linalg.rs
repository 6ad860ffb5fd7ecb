//! Minimal row-major dense matrix used by the learned estimator. The
//! shapes involved are tiny (widths ≤ 64, sequences ≤ 32), so plain
//! triple loops are fast enough and keep the backward pass transparent.

use serde::{Deserialize, Serialize};

use crate::Float;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct Mat<T: Float> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        debug_assert!(rows.iter().all(|row| row.len() == c));
        Mat {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `self · b`
    pub fn mul(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, b.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a_ik = self.get(i, k);
                if a_ik == T::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                let b_row = b.row(k);
                for j in 0..b.cols {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        out
    }

    /// `selfᵀ · b`
    pub fn tmul(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, b.rows, "tmul shape mismatch");
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a_ki = self.get(k, i);
                if a_ki == T::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                let b_row = b.row(k);
                for j in 0..b.cols {
                    out_row[j] += a_ki * b_row[j];
                }
            }
        }
        out
    }

    /// `self · bᵀ`
    pub fn mul_t(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, b.cols, "mul_t shape mismatch");
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            for j in 0..b.rows {
                out.set(i, j, dot(self.row(i), b.row(j)));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `row` to row `i` in place.
    pub fn add_to_row(&mut self, i: usize, row: &[T]) {
        for (a, &b) in self.row_mut(i).iter_mut().zip(row) {
            *a += b;
        }
    }
}

pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_against_hand_computed() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(a.mul(&b).data(), &[19.0, 22.0, 43.0, 50.0]);
        // (AᵀB)ᵀ == BᵀA
        assert_eq!(a.tmul(&b).data(), &[26.0, 30.0, 38.0, 44.0]);
        assert_eq!(a.mul_t(&b).data(), &[17.0, 23.0, 39.0, 53.0]);
    }
}
