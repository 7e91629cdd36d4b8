use serde::{Deserialize, Serialize};

use super::dense::DenseMatrix;
use crate::error::{Error, Result};

/// Sparse matrix with exactly `p` stored entries in every row.
///
/// Entries are stored flat: row `i` occupies `indices[i*p..(i+1)*p]` and the
/// matching slice of `values`. Column indices within a row are strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSparseMatrix {
    rows: usize,
    cols: usize,
    nnz_per_row: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl RowSparseMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        nnz_per_row: usize,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if nnz_per_row >= cols {
            return Err(Error::param(
                "p",
                format!("nonzeros per row ({nnz_per_row}) must be < cols ({cols})"),
            ));
        }
        let expected = rows * nnz_per_row;
        if indices.len() != expected || values.len() != expected {
            return Err(Error::dim(
                "RowSparseMatrix::new",
                expected,
                format!("{} indices / {} values", indices.len(), values.len()),
            ));
        }
        for i in 0..rows {
            let idx = &indices[i * nnz_per_row..(i + 1) * nnz_per_row];
            if idx.iter().any(|&c| c >= cols) {
                return Err(Error::Contract(format!("row {i}: column index out of range")));
            }
            if !idx.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Contract(format!(
                    "row {i}: column indices must be strictly increasing"
                )));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sparse entry {} of row {}",
                pos % nnz_per_row.max(1),
                pos / nnz_per_row.max(1)
            )));
        }
        Ok(Self {
            rows,
            cols,
            nnz_per_row,
            indices,
            values,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn nnz_per_row(&self) -> usize {
        self.nnz_per_row
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let p = self.nnz_per_row;
        (&self.indices[i * p..(i + 1) * p], &self.values[i * p..(i + 1) * p])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `a_i · x` for a single row.
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&c, &v)| v * x[c]).sum()
    }

    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim("spmv", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| self.row_dot(i, x)).collect())
    }

    /// `x += s · a_i` (scatter one row into a dense vector of length `cols`).
    pub fn scatter_row(&self, i: usize, s: f64, x: &mut [f64]) {
        let (idx, val) = self.row(i);
        for (&c, &v) in idx.iter().zip(val) {
            x[c] += s * v;
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (idx, val) = self.row(i);
            for (&c, &v) in idx.iter().zip(val) {
                d.set(i, c, v);
            }
        }
        d
    }

    /// `self · otherᵀ`, computed by merging sorted row supports.
    pub fn gram_with(&self, other: &RowSparseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::dim("gram_with", self.cols, other.cols));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let (ia, va) = self.row(i);
            for j in 0..other.rows {
                let (ib, vb) = other.row(j);
                let (mut a, mut b, mut acc) = (0, 0, 0.0);
                while a < ia.len() && b < ib.len() {
                    match ia[a].cmp(&ib[b]) {
                        std::cmp::Ordering::Less => a += 1,
                        std::cmp::Ordering::Greater => b += 1,
                        std::cmp::Ordering::Equal => {
                            acc += va[a] * vb[b];
                            a += 1;
                            b += 1;
                        }
                    }
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    /// Copy with `f` applied to every stored value; the support is unchanged.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Order-sensitive FNV-1a digest over shape, support and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |w: u64| {
            for b in w.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        feed(self.rows as u64);
        feed(self.cols as u64);
        feed(self.nnz_per_row as u64);
        self.indices.iter().for_each(|&i| feed(i as u64));
        self.values.iter().for_each(|v| feed(v.to_bits()));
        h
    }
}
