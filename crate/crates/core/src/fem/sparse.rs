use std::collections::BTreeMap;

use super::FemError;

/// Linear map with an explicit adjoint; the contract the tape relies on
/// when it treats a finite-element kernel as a single differentiable node.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `y = A x`
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// `y = A^T x`
    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64>;
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(row, col, value)` contributions; duplicates are summed.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    rows: usize,
    cols: usize,
    entries: Vec<BTreeMap<usize, f64>>,
}

impl TripletBuilder {
    pub fn new(rows: usize, cols: usize) -> Self {
        TripletBuilder {
            rows,
            cols,
            entries: vec![BTreeMap::new(); rows],
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.rows && col < self.cols, "triplet out of bounds");
        *self.entries[row].entry(col).or_insert(0.0) += value;
    }

    /// Finalizes into CSR, dropping entries that summed to exactly zero.
    pub fn build(self) -> SparseMatrix {
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in self.entries {
            for (c, v) in row {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 1.0);
        }
        b.build()
    }

    pub fn from_dense(rows: usize, cols: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), rows * cols);
        let mut b = TripletBuilder::new(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = dense[r * cols + c];
                if v != 0.0 {
                    b.add(r, c, v);
                }
            }
        }
        b.build()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d[r * self.cols + c] = v;
            }
        }
        d
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut b = TripletBuilder::new(self.cols, self.rows);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                b.add(c, r, v);
            }
        }
        b.build()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>, FemError> {
        if x.len() != self.cols {
            return Err(FemError::DimensionMismatch {
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect())
    }

    pub fn mul_vec_transpose(&self, y: &[f64]) -> Result<Vec<f64>, FemError> {
        if y.len() != self.rows {
            return Err(FemError::DimensionMismatch {
                expected: self.rows,
                found: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
        Ok(out)
    }

    /// Keeps the listed rows and columns, in the given order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> SparseMatrix {
        let mut col_map = vec![usize::MAX; self.cols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut b = TripletBuilder::new(rows.len(), cols.len());
        for (k, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                if col_map[c] != usize::MAX {
                    b.add(k, col_map[c], v);
                }
            }
        }
        b.build()
    }

    /// Multiplies row `r` by `scale[r]`.
    pub fn scale_rows(&self, scale: &[f64]) -> SparseMatrix {
        assert_eq!(scale.len(), self.rows);
        let mut out = self.clone();
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.values[k] *= scale[r];
            }
        }
        out
    }
}

impl LinearOperator for SparseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.mul_vec(x).expect("operator dimension mismatch")
    }

    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.mul_vec_transpose(x)
            .expect("operator dimension mismatch")
    }
}

/// Dot product summed in index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
