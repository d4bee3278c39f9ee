use crate::compute::Tensor2;
use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::IndexOutOfRange {
                    index: r.max(c),
                    len: rows.max(cols),
                });
            }
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
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
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
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

    /// Iterates `(col, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// Sparse-dense product `self · h`.
    pub fn spmm(&self, h: &Tensor2) -> Result<Tensor2> {
        if self.cols != h.rows() {
            return Err(Error::shape("spmm", (self.rows, self.cols), h.shape()));
        }
        let mut out = Tensor2::zeros(self.rows, h.cols());
        for r in 0..self.rows {
            let o = out.row_mut(r);
            for (c, w) in self.row(r) {
                for (o, &x) in o.iter_mut().zip(h.row(c)) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    /// Transposed product `selfᵀ · g`, the backward rule of [`CsrMatrix::spmm`].
    pub fn spmm_t(&self, g: &Tensor2) -> Result<Tensor2> {
        if self.rows != g.rows() {
            return Err(Error::shape("spmm_t", (self.rows, self.cols), g.shape()));
        }
        let mut out = Tensor2::zeros(self.cols, g.cols());
        for r in 0..self.rows {
            let g_row = g.row(r);
            for (c, w) in self.row(r) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(g_row) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }
}
