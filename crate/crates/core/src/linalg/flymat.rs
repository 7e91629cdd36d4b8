//! `FLYMAT v1` text matrix format.
//!
//! ```text
//! FLYMAT v1 <rows> <cols> dense
//! <v00> <v01> ...
//! FLYMAT v1 <rows> <cols> <p>
//! <idx>:<val> <idx>:<val> ...
//! ```
//!
//! Values are written in scientific notation with 17 significant digits, so
//! a write/read cycle reproduces every `f64` bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use super::dense::DenseMatrix;
use super::sparse::RowSparseMatrix;
use crate::error::{Error, Result};

const MAGIC: &str = "FLYMAT";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub enum FlyMat {
    Dense(DenseMatrix),
    Sparse(RowSparseMatrix),
}

impl FlyMat {
    pub fn into_dense(self) -> DenseMatrix {
        match self {
            FlyMat::Dense(d) => d,
            FlyMat::Sparse(s) => s.to_dense(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            FlyMat::Dense(d) => d.shape(),
            FlyMat::Sparse(s) => (s.rows(), s.cols()),
        }
    }
}

impl From<DenseMatrix> for FlyMat {
    fn from(d: DenseMatrix) -> Self {
        FlyMat::Dense(d)
    }
}

impl From<RowSparseMatrix> for FlyMat {
    fn from(s: RowSparseMatrix) -> Self {
        FlyMat::Sparse(s)
    }
}

#[inline]
fn fmt_real(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

pub fn dense_to_string(m: &DenseMatrix) -> String {
    let mut out = format!("{MAGIC} {VERSION} {} {} dense\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        for (j, &v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            fmt_real(&mut out, v);
        }
        out.push('\n');
    }
    out
}

pub fn sparse_to_string(m: &RowSparseMatrix) -> String {
    let mut out = format!(
        "{MAGIC} {VERSION} {} {} {}\n",
        m.rows(),
        m.cols(),
        m.nnz_per_row()
    );
    for i in 0..m.rows() {
        let (idx, val) = m.row(i);
        for (k, (&c, &v)) in idx.iter().zip(val).enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{c}:");
            fmt_real(&mut out, v);
        }
        out.push('\n');
    }
    out
}

pub fn to_string(m: &FlyMat) -> String {
    match m {
        FlyMat::Dense(d) => dense_to_string(d),
        FlyMat::Sparse(s) => sparse_to_string(s),
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_real(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| perr(line, format!("bad real `{tok}`")))?;
    if !v.is_finite() {
        return Err(perr(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

pub fn parse(text: &str) -> Result<FlyMat> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty input"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 || h[0] != MAGIC || h[1] != VERSION {
        return Err(perr(1, format!("expected `{MAGIC} {VERSION} <rows> <cols> <p|dense>`")));
    }
    let rows: usize = h[2].parse().map_err(|_| perr(1, "bad row count"))?;
    let cols: usize = h[3].parse().map_err(|_| perr(1, "bad column count"))?;

    let body: Vec<(usize, &str)> = lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    if body.len() != rows {
        return Err(perr(
            body.last().map_or(1, |b| b.0),
            format!("expected {rows} rows, found {}", body.len()),
        ));
    }

    if h[4] == "dense" {
        let mut data = Vec::with_capacity(rows * cols);
        for &(ln, l) in &body {
            let before = data.len();
            for tok in l.split_whitespace() {
                data.push(parse_real(tok, ln)?);
            }
            if data.len() - before != cols {
                return Err(perr(ln, format!("expected {cols} values")));
            }
        }
        return Ok(FlyMat::Dense(DenseMatrix::from_vec(rows, cols, data)?));
    }

    let p: usize = h[4]
        .parse()
        .map_err(|_| perr(1, "sparsity field must be `dense` or an integer"))?;
    let mut indices = Vec::with_capacity(rows * p);
    let mut values = Vec::with_capacity(rows * p);
    for &(ln, l) in &body {
        let before = indices.len();
        for tok in l.split_whitespace() {
            let (c, v) = tok
                .split_once(':')
                .ok_or_else(|| perr(ln, format!("expected idx:val, got `{tok}`")))?;
            indices.push(c.parse().map_err(|_| perr(ln, format!("bad index `{c}`")))?);
            values.push(parse_real(v, ln)?);
        }
        if indices.len() - before != p {
            return Err(perr(ln, format!("expected {p} entries")));
        }
    }
    Ok(FlyMat::Sparse(RowSparseMatrix::new(rows, cols, p, indices, values)?))
}

pub fn save(path: impl AsRef<Path>, m: &FlyMat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<FlyMat> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let d = DenseMatrix::from_rows(&[vec![1.0, -2.5]]).unwrap();
        let s = dense_to_string(&d);
        assert!(s.starts_with("FLYMAT v1 1 2 dense\n"));
        let sp = RowSparseMatrix::new(2, 3, 1, vec![2, 0], vec![0.5, -1.0]).unwrap();
        let s = sparse_to_string(&sp);
        assert!(s.starts_with("FLYMAT v1 2 3 1\n2:"), "{s}");
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse("").is_err());
        assert!(parse("FLYMAT v2 1 1 dense\n1\n").is_err());
        assert!(parse("FLYMAT v1 1 2 dense\n1\n").is_err());
        assert!(parse("FLYMAT v1 1 3 1\n1-0.5\n").is_err());
        assert!(parse("FLYMAT v1 1 2 dense\n1 NaN\n").is_err());
    }

    proptest! {
        #[test]
        fn dense_roundtrip_bit_exact(vals in proptest::collection::vec(-1e300f64..1e300, 12)) {
            let d = DenseMatrix::from_vec(3, 4, vals).unwrap();
            let back = parse(&dense_to_string(&d)).unwrap().into_dense();
            for (a, b) in d.as_slice().iter().zip(back.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn sparse_roundtrip_bit_exact(vals in proptest::collection::vec(proptest::num::f64::NORMAL, 6)) {
            let s = RowSparseMatrix::new(3, 5, 2, vec![0, 4, 1, 2, 3, 4], vals).unwrap();
            match parse(&sparse_to_string(&s)).unwrap() {
                FlyMat::Sparse(t) => prop_assert_eq!(s.checksum(), t.checksum()),
                FlyMat::Dense(_) => prop_assert!(false, "expected sparse"),
            }
        }
    }
}
