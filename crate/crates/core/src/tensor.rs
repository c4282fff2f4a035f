//! Dense row-major `f64` matrices, a boolean mask matrix, and the two kernels
//! the toy transformer is built from: matrix product and masked row softmax.
//!
//! Masking is always expressed through a [`BoolMatrix`]; callers never write
//! `-inf` sentinels into score matrices themselves.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("row {row} of the mask allows no entries")]
    EmptyRow { row: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and small constructions.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Boolean matrix used for attention masks and block patterns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// True when every entry set here is also set in `other`.
    pub fn is_subset_of(&self, other: &BoolMatrix) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Standard matrix product `a · b`.
///
/// Zero entries of `a` are skipped, and when `b` is sparse its rows are
/// walked through their nonzero columns only. Each output row is accumulated
/// in the same order regardless of how many rows `a` has, so a one-row product
/// is bit-identical to the matching row of a batched product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    matmul_with(a, b, sparse_view(b).as_ref())
}

/// Nonzero view of `b` when fewer than a quarter of its entries are nonzero.
pub fn sparse_view(b: &Matrix) -> Option<SparseRows> {
    let nnz = b.data.iter().filter(|v| **v != 0.0).count();
    (nnz * 4 < b.data.len()).then(|| SparseRows::from_matrix(b))
}

/// [`matmul`] with a precomputed [`sparse_view`] of `b`.
pub fn matmul_with(a: &Matrix, b: &Matrix, sparse: Option<&SparseRows>) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 || a.rows == 0 {
        return Ok(out);
    }
    if let Some(sparse) = sparse {
        for i in 0..a.rows {
            let arow = a.row(i);
            let orow = out.row_mut(i);
            for (k, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for &(c, bv) in sparse.row(k) {
                    orow[c] += av * bv;
                }
            }
        }
    } else {
        for i in 0..a.rows {
            let arow = &a.data[i * a.cols..(i + 1) * a.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(out)
}

/// Compressed nonzero view of a matrix's rows.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseRows {
    pub fn from_matrix(m: &Matrix) -> Self {
        let mut s = SparseRows::default();
        for r in 0..m.rows {
            s.push_row(m.row(r));
        }
        s
    }

    pub fn push_row(&mut self, row: &[f64]) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.entries
            .extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (c, *v)));
        self.offsets.push(self.entries.len());
    }

    pub fn push_sparse_row(&mut self, row: &[(usize, f64)]) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.entries.extend_from_slice(row);
        self.offsets.push(self.entries.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }
}

/// Softmax of one row restricted to the allowed entries, written into `out`.
/// Disallowed entries become exactly zero. Returns `false` when no entry is
/// allowed (and leaves `out` zeroed).
pub fn masked_softmax_into(scores: &[f64], allowed: &[bool], out: &mut [f64]) -> bool {
    debug_assert_eq!(scores.len(), allowed.len());
    debug_assert_eq!(scores.len(), out.len());
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut total = 0.0;
    for ((o, s), a) in out.iter_mut().zip(scores).zip(allowed) {
        *o = if *a { (s - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    true
}

/// Row-wise softmax over the entries allowed by `mask`, using per-row max
/// subtraction. Masked entries come out exactly zero.
pub fn masked_row_softmax(scores: &Matrix, mask: &BoolMatrix) -> Result<Matrix, TensorError> {
    if scores.shape() != mask.shape() {
        return Err(TensorError::Shape {
            op: "masked_row_softmax",
            left: scores.shape(),
            right: mask.shape(),
        });
    }
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        if !masked_softmax_into(scores.row(r), mask.row(r), out.row_mut(r)) {
            return Err(TensorError::EmptyRow { row: r });
        }
    }
    Ok(out)
}
