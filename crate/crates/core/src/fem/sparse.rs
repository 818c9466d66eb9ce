//! Compressed-row sparse matrices with a fixed, reusable pattern.

use crate::error::{Error, Result};

/// Square CSR matrix.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub n: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Build the sparsity pattern from a set of (row, col) couplings. The
    /// diagonal is always included. Duplicates are merged; values start at
    /// zero.
    pub fn from_pattern(n: usize, couplings: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            rows[i].push(i);
        }
        for (i, j) in couplings {
            rows[i].push(j);
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
            col_indices.extend_from_slice(r);
            row_offsets.push(col_indices.len());
        }
        let nnz = col_indices.len();
        SparseMatrix {
            n,
            row_offsets,
            col_indices,
            values: vec![0.0; nnz],
        }
    }

    pub fn zero_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Add into an existing pattern entry. Panics if (i, j) is not in the
    /// pattern: patterns must be built from a superset of the couplings.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        match self.col_indices[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k] += v,
            Err(_) => panic!("entry ({i}, {j}) not in sparsity pattern"),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        match self.col_indices[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                s += self.values[k] * x[self.col_indices[k]];
            }
            y[i] = s;
        }
    }

    pub fn residual(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.n];
        self.matvec(x, &mut r);
        for i in 0..self.n {
            r[i] = b[i] - r[i];
        }
        r
    }

    /// Verify all stored values are finite; `cell_of_entry` reports which
    /// cell scattered a bad value when known.
    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteState {
                context: "sparse matrix values".into(),
            })
        }
    }

    /// Impose `x[d] = g[d]` symmetrically: move columns to the right-hand
    /// side and replace constrained rows by the identity. Preserves
    /// symmetry of symmetric operators so CG stays applicable.
    pub fn apply_dirichlet(&mut self, b: &mut [f64], dofs: &[usize], values: &[f64]) {
        let mut constrained = vec![false; self.n];
        let mut g = vec![0.0; self.n];
        for (k, &d) in dofs.iter().enumerate() {
            constrained[d] = true;
            g[d] = values[k];
        }
        for i in 0..self.n {
            if constrained[i] {
                continue;
            }
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                if constrained[j] {
                    b[i] -= self.values[k] * g[j];
                    self.values[k] = 0.0;
                }
            }
        }
        for i in 0..self.n {
            if constrained[i] {
                for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                    self.values[k] = if self.col_indices[k] == i { 1.0 } else { 0.0 };
                }
                b[i] = g[i];
            }
        }
    }

    /// Extract the sub-matrix with the given contiguous index range on both
    /// sides.
    pub fn extract_block(&self, range: std::ops::Range<usize>) -> SparseMatrix {
        let n = range.len();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for i in range.clone() {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                if range.contains(&j) {
                    col_indices.push(j - range.start);
                    values.push(self.values[k]);
                }
            }
            row_offsets.push(col_indices.len());
        }
        SparseMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// y = A[rows, cols] * x for contiguous off-diagonal blocks.
    pub fn block_matvec(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        x: &[f64],
        y: &mut [f64],
    ) {
        for (out, i) in rows.enumerate() {
            let mut s = 0.0;
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                if cols.contains(&j) {
                    s += self.values[k] * x[j - cols.start];
                }
            }
            y[out] = s;
        }
    }

    /// Pattern symmetry check (used by tests on symmetric forms).
    pub fn pattern_is_symmetric(&self) -> bool {
        for i in 0..self.n {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                let lo = self.row_offsets[j];
                let hi = self.row_offsets[j + 1];
                if self.col_indices[lo..hi].binary_search(&i).is_err() {
                    return false;
                }
            }
        }
        true
    }
}
