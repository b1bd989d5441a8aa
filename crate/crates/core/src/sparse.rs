//! Compressed sparse row storage.
//!
//! [`CsrMatrix`] is used twice: with `u64` values for path-count adjacency
//! matrices, and with `f64` values as [`SparsePatternMatrix`], the fixed
//! pattern plus mutable values that carry weighted adjacency matrices and the
//! per-edge graph-convolution parameters.

use std::ops::{Add, Mul};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension for which [`CsrMatrix::to_dense`] will allocate.
pub const MAX_DENSE_DIM: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

/// Sparse matrix with an immutable pattern and learnable `f64` values.
pub type SparsePatternMatrix = CsrMatrix<f64>;

impl<T: Copy> CsrMatrix<T> {
    /// Builds a matrix from `(row, col, value)` triplets. Triplets are sorted
    /// by position; duplicate positions are rejected.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, T)>,
    ) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!(
                    "triplet ({r}, {c}) outside a {rows}x{cols} matrix"
                )));
            }
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::invalid(format!(
                "duplicate entry at ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut row_ptr = vec![0; rows + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let col_idx = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
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

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_ptr
    }

    /// Range into the value array for one row.
    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_ptr[row]..self.row_ptr[row + 1]
    }

    pub fn get(&self, row: usize, col: usize) -> Option<T> {
        self.position(row, col).map(|p| self.values[p])
    }

    /// Index into the value array of a stored entry.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.rows {
            return None;
        }
        let range = self.row_range(row);
        self.col_idx[range.clone()]
            .binary_search(&col)
            .ok()
            .map(|k| range.start + k)
    }

    /// Iterates `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.rows).flat_map(move |r| {
            self.row_range(r)
                .map(move |p| (r, self.col_idx[p], self.values[p]))
        })
    }

    pub fn transpose(&self) -> Self {
        let triplets = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, triplets).expect("transpose keeps entries unique")
    }

    /// Same pattern, values mapped through `f`.
    pub fn map<U: Copy>(&self, f: impl Fn(usize, usize, T) -> U) -> CsrMatrix<U> {
        let values = self.iter().map(|(r, c, v)| f(r, c, v)).collect();
        CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        }
    }

    /// Drops stored entries for which `keep` returns false.
    pub fn filter(&self, keep: impl Fn(usize, usize, T) -> bool) -> Self {
        let triplets = self.iter().filter(|&(r, c, v)| keep(r, c, v)).collect();
        Self::from_triplets(self.rows, self.cols, triplets).expect("subset of a valid matrix")
    }

    /// True when both matrices store exactly the same positions.
    pub fn same_pattern<U>(&self, other: &CsrMatrix<U>) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }
}

impl<T: Copy + Default> CsrMatrix<T> {
    pub fn to_dense(&self) -> Result<Array2<T>> {
        if self.rows > MAX_DENSE_DIM || self.cols > MAX_DENSE_DIM {
            return Err(Error::invalid(format!(
                "dense conversion limited to {MAX_DENSE_DIM}x{MAX_DENSE_DIM}, matrix is {}x{}",
                self.rows, self.cols
            )));
        }
        let mut out = Array2::from_elem((self.rows, self.cols), T::default());
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        Ok(out)
    }
}

impl<T> CsrMatrix<T>
where
    T: Copy + Default + PartialEq + Add<Output = T> + Mul<Output = T>,
{
    /// Sparse-sparse product. Entries that sum to zero are not stored.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "sparse matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let zero = T::default();
        let mut acc = vec![zero; other.cols];
        let mut touched = vec![false; other.cols];
        let mut cols_seen = Vec::new();
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..self.rows {
            for p in self.row_range(r) {
                let mid = self.col_idx[p];
                let a = self.values[p];
                for q in other.row_range(mid) {
                    let c = other.col_idx[q];
                    if !touched[c] {
                        touched[c] = true;
                        cols_seen.push(c);
                    }
                    acc[c] = acc[c] + a * other.values[q];
                }
            }
            cols_seen.sort_unstable();
            for &c in &cols_seen {
                if acc[c] != zero {
                    col_idx.push(c);
                    values.push(acc[c]);
                }
                acc[c] = zero;
                touched[c] = false;
            }
            cols_seen.clear();
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows: self.rows,
            cols: other.cols,
            row_ptr,
            col_idx,
            values,
        })
    }
}

impl CsrMatrix<f64> {
    /// `n`×`n` identity.
    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect()).expect("diagonal")
    }
}

/// `S · x` for a sparse matrix and dense vector.
pub fn sparse_apply(s: &SparsePatternMatrix, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if s.cols() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "sparse_apply",
            left: s.shape(),
            right: (x.len(), 1),
        });
    }
    let mut out = Array1::zeros(s.rows());
    for r in 0..s.rows() {
        let mut acc = 0.0;
        for p in s.row_range(r) {
            acc += s.values()[p] * x[s.col_indices()[p]];
        }
        out[r] = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sparse_apply_single_entry() {
        let s = SparsePatternMatrix::from_triplets(2, 2, vec![(0, 1, 2.0)]).unwrap();
        let y = sparse_apply(&s, array![0.0, 3.0].view()).unwrap();
        assert_eq!(y, array![6.0, 0.0]);
    }

    #[test]
    fn sparse_apply_shape_error() {
        let s = SparsePatternMatrix::identity(3);
        assert!(matches!(
            sparse_apply(&s, array![1.0, 2.0].view()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_triplets_rejected() {
        let r = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1u64), (0, 1, 2u64)]);
        assert!(r.is_err());
    }

    #[test]
    fn integer_matmul_counts_paths() {
        // diamond 0->1->3, 0->2->3
        let a = CsrMatrix::from_triplets(
            4,
            4,
            vec![(0, 1, 1u64), (0, 2, 1), (1, 3, 1), (2, 3, 1)],
        )
        .unwrap();
        let a2 = a.matmul(&a).unwrap();
        assert_eq!(a2.nnz(), 1);
        assert_eq!(a2.get(0, 3), Some(2));
    }

    #[test]
    fn dense_limit() {
        let big = CsrMatrix::<f64>::from_triplets(MAX_DENSE_DIM + 1, 1, vec![]).unwrap();
        assert!(big.to_dense().is_err());
    }
}
