//! Compressed sparse row matrices used for every frozen graph.

use ndarray::{Array2, ArrayView2};

/// Real-valued sparse matrix in CSR layout. Column indices are sorted within
/// each row and contain no duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from per-row entry lists. Entries within a row are
    /// sorted by column and duplicates are summed.
    pub fn from_rows(rows: usize, cols: usize, row_entries: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(row_entries.len(), rows, "row count mismatch");
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut entries in row_entries {
            entries.sort_by_key(|&(c, _)| c);
            let start = indices.len();
            for (c, v) in entries {
                assert!(c < cols, "column {c} out of bounds for {cols} columns");
                if indices.len() > start && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            assert!(r < rows, "row {r} out of bounds for {rows} rows");
            per_row[r].push((c, v));
        }
        Self::from_rows(rows, cols, per_row)
    }

    /// Reassembles a matrix from raw CSR arrays, validating the layout.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, String> {
        if indptr.len() != rows + 1 || indptr[0] != 0 {
            return Err("malformed row pointer block".into());
        }
        if *indptr.last().unwrap() != indices.len() || indices.len() != values.len() {
            return Err("row pointers disagree with index/value block lengths".into());
        }
        for r in 0..rows {
            if indptr[r] > indptr[r + 1] {
                return Err(format!("row pointer decreases at row {r}"));
            }
            let row = &indices[indptr[r]..indptr[r + 1]];
            if row.iter().any(|&c| c >= cols) || row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("row {r} has unsorted or out-of-range columns"));
            }
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Self {
        let (rows, cols) = dense.dim();
        let per_row = (0..rows)
            .map(|r| {
                (0..cols)
                    .filter(|&c| dense[[r, c]] != 0.0)
                    .map(|c| (c, dense[[r, c]]))
                    .collect()
            })
            .collect();
        Self::from_rows(rows, cols, per_row)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut cursor = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = cursor[c];
                indices[slot] = r;
                values[slot] = v;
                cursor[c] += 1;
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    /// Returns a copy whose values are replaced by `f(row, col, value)`;
    /// entries mapped to exactly zero are dropped.
    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let per_row = (0..self.rows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter()
                    .zip(vals)
                    .map(|(&c, &v)| (c, f(r, c, v)))
                    .filter(|&(_, v)| v != 0.0)
                    .collect()
            })
            .collect();
        Self::from_rows(self.rows, self.cols, per_row)
    }

    /// Dense product `self · x`.
    pub fn matmul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "sparse-dense shape mismatch");
        let k = x.ncols();
        let mut out = Array2::<f64>::zeros((self.rows, k));
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            if cols.is_empty() {
                continue;
            }
            let mut out_row = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out_row.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        out
    }
}

/// A constant sparse operator paired with its transpose, as consumed by the
/// message-passing primitives of the autograd tape.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    pub forward: CsrMatrix,
    pub adjoint: CsrMatrix,
}

impl SparseOperator {
    pub fn new(forward: CsrMatrix) -> Self {
        let adjoint = forward.transpose();
        Self { forward, adjoint }
    }
}
