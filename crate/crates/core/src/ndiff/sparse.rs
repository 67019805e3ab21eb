use super::DenseMatrix;

/// Compressed sparse row matrix. Column indices within a row are strictly
/// increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix, checking the structural invariants.
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, String> {
        if indptr.len() != rows + 1 {
            return Err(format!(
                "row pointer has {} entries, expected {}",
                indptr.len(),
                rows + 1
            ));
        }
        if indptr[0] != 0 {
            return Err("row pointer must start at 0".into());
        }
        if indices.len() != values.len() {
            return Err(format!(
                "{} column indices but {} values",
                indices.len(),
                values.len()
            ));
        }
        if indptr[rows] != indices.len() {
            return Err(format!(
                "row pointer ends at {} but there are {} entries",
                indptr[rows],
                indices.len()
            ));
        }
        for r in 0..rows {
            let (s, e) = (indptr[r], indptr[r + 1]);
            if s > e {
                return Err(format!("row pointer decreases at row {r}"));
            }
            let row = &indices[s..e];
            for (i, &c) in row.iter().enumerate() {
                if c >= cols {
                    return Err(format!("column index {c} out of range in row {r} ({cols} columns)"));
                }
                if i > 0 && row[i - 1] >= c {
                    return Err(format!("column indices not strictly increasing in row {r}"));
                }
            }
        }
        Ok(CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of range");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(d: &DenseMatrix) -> Self {
        let mut t = Vec::new();
        for r in 0..d.rows() {
            for (c, &v) in d.row(r).iter().enumerate() {
                if v != 0.0 {
                    t.push((r, c, v));
                }
            }
        }
        Self::from_triplets(d.rows(), d.cols(), t)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
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

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[s..e], &self.values[s..e])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, val) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |p| val[p])
    }

    /// Keeps the entries for which `keep(row, col, value)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize, f64) -> bool) -> CsrMatrix {
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                if keep(r, c, v) {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                d.set(r, c, v);
            }
        }
        d
    }

    /// `self * d`.
    pub fn spmm(&self, d: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols,
            d.rows(),
            "spmm: inner dimensions differ ({}x{} * {}x{})",
            self.rows,
            self.cols,
            d.rows(),
            d.cols()
        );
        let k = d.cols();
        let mut out = DenseMatrix::zeros(self.rows, k);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            let dst = out.row_mut(r);
            for (&c, &v) in idx.iter().zip(val) {
                for (o, &x) in dst.iter_mut().zip(d.row(c)) {
                    *o += v * x;
                }
            }
        }
        out
    }

    /// `selfᵀ * g`, without materializing the transpose.
    pub fn spmm_transpose(&self, g: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, g.rows(), "spmm_transpose: row counts differ");
        let k = g.cols();
        let mut out = DenseMatrix::zeros(self.cols, k);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            let src = g.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        out
    }
}
