//! Dense row-major `f64` matrices and the forward kernels behind every
//! recorded primitive.

use std::fmt;

use super::AutodiffError;

/// A dense row-major tensor of 64-bit reals.
///
/// Every primitive in the engine works on rank-2 tensors; a vector is a
/// single row `[1, n]` and a scalar is `[1, 1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a `[rows, cols]` matrix. Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// A single row `[1, n]`.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The value of a `[1, 1]` tensor (or the first element of any other).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        if self.shape.len() != 2 {
            return Err(AutodiffError::Rank {
                op,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn reshaped(&self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        Self::new(shape, self.data.clone())
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `[1, c]` repeated down the rows.
    Row,
    /// `[r, 1]` repeated across the columns.
    Col,
    /// `[1, 1]` everywhere.
    Scalar,
}

pub(crate) fn broadcast_kind(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
) -> Result<Broadcast, AutodiffError> {
    let (r, c) = lhs.dims2(op)?;
    let (rr, rc) = rhs.dims2(op)?;
    let kind = if (rr, rc) == (r, c) {
        Broadcast::Same
    } else if (rr, rc) == (1, 1) {
        Broadcast::Scalar
    } else if rr == 1 && rc == c {
        Broadcast::Row
    } else if rc == 1 && rr == r {
        Broadcast::Col
    } else {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: lhs.shape.clone(),
            right: rhs.shape.clone(),
        });
    };
    Ok(kind)
}

pub(crate) fn binary(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AutodiffError> {
    let kind = broadcast_kind(op, lhs, rhs)?;
    let (r, c) = (lhs.rows(), lhs.cols());
    let mut out = Vec::with_capacity(r * c);
    match kind {
        Broadcast::Same => {
            out.extend(lhs.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)));
        }
        Broadcast::Scalar => {
            let b = rhs.data[0];
            out.extend(lhs.data.iter().map(|&a| f(a, b)));
        }
        Broadcast::Row => {
            for i in 0..r {
                out.extend(lhs.row_slice(i).iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)));
            }
        }
        Broadcast::Col => {
            for i in 0..r {
                let b = rhs.data[i];
                out.extend(lhs.row_slice(i).iter().map(|&a| f(a, b)));
            }
        }
    }
    Ok(Tensor::matrix(r, c, out))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the slices hold exactly m*k, k*n and m*n elements laid out
        // row-major, matching the strides passed below.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor, AutodiffError> {
    let (r, c) = a.dims2("transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::matrix(c, r, out))
}

/// Sums along the last axis: `[r, c] -> [r, 1]`.
pub(crate) fn sum_last(a: &Tensor) -> Result<Tensor, AutodiffError> {
    let (r, _) = a.dims2("sum_last_axis")?;
    Ok(Tensor::matrix(
        r,
        1,
        (0..r).map(|i| a.row_slice(i).iter().sum()).collect(),
    ))
}

/// Sums along the first axis: `[r, c] -> [1, c]`.
pub(crate) fn sum_first(a: &Tensor) -> Result<Tensor, AutodiffError> {
    let (r, c) = a.dims2("sum_first_axis")?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(a.row_slice(i)) {
            *o += v;
        }
    }
    Ok(Tensor::matrix(1, c, out))
}

pub(crate) fn l2_norm_rows(a: &Tensor) -> Result<Tensor, AutodiffError> {
    let (r, _) = a.dims2("l2_norm")?;
    Ok(Tensor::matrix(
        r,
        1,
        (0..r)
            .map(|i| a.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    ))
}

/// Per-row maximum and its column; ties go to the lowest column.
pub(crate) fn row_max(a: &Tensor) -> Result<(Tensor, Vec<usize>), AutodiffError> {
    let (r, c) = a.dims2("row_max")?;
    if c == 0 {
        return Err(AutodiffError::Empty { op: "row_max" });
    }
    let mut vals = Vec::with_capacity(r);
    let mut idx = Vec::with_capacity(r);
    for i in 0..r {
        let row = a.row_slice(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        vals.push(row[best]);
        idx.push(best);
    }
    Ok((Tensor::matrix(r, 1, vals), idx))
}

pub(crate) fn gather_cols(a: &Tensor, idx: &[usize]) -> Result<Tensor, AutodiffError> {
    let (r, c) = a.dims2("gather_cols")?;
    if idx.len() != r || idx.iter().any(|&j| j >= c) {
        return Err(AutodiffError::Index {
            op: "gather_cols",
            shape: a.shape.clone(),
        });
    }
    Ok(Tensor::matrix(
        r,
        1,
        idx.iter().enumerate().map(|(i, &j)| a.data[i * c + j]).collect(),
    ))
}

pub(crate) fn scatter_cols(a: &Tensor, idx: &[usize], cols: usize) -> Result<Tensor, AutodiffError> {
    let (r, c) = a.dims2("scatter_cols")?;
    if c != 1 || idx.len() != r || idx.iter().any(|&j| j >= cols) {
        return Err(AutodiffError::Index {
            op: "scatter_cols",
            shape: a.shape.clone(),
        });
    }
    let mut out = vec![0.0; r * cols];
    for (i, &j) in idx.iter().enumerate() {
        out[i * cols + j] = a.data[i];
    }
    Ok(Tensor::matrix(r, cols, out))
}

pub(crate) fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor, AutodiffError> {
    let (r, c) = a.dims2("gather_rows")?;
    if idx.iter().any(|&i| i >= r) {
        return Err(AutodiffError::Index {
            op: "gather_rows",
            shape: a.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(a.row_slice(i));
    }
    Ok(Tensor::matrix(idx.len(), c, out))
}

pub(crate) fn scatter_rows(a: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor, AutodiffError> {
    let (r, c) = a.dims2("scatter_rows")?;
    if idx.len() != r || idx.iter().any(|&i| i >= rows) {
        return Err(AutodiffError::Index {
            op: "scatter_rows",
            shape: a.shape.clone(),
        });
    }
    let mut out = vec![0.0; rows * c];
    for (src, &dst) in idx.iter().enumerate() {
        for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(a.row_slice(src)) {
            *o += v;
        }
    }
    Ok(Tensor::matrix(rows, c, out))
}

pub(crate) fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let first = parts.first().ok_or(AutodiffError::Empty { op: "concat_rows" })?;
    let (_, c) = first.dims2("concat_rows")?;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (r, pc) = p.dims2("concat_rows")?;
        if pc != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                left: first.shape.clone(),
                right: p.shape.clone(),
            });
        }
        rows += r;
        out.extend_from_slice(&p.data);
    }
    Ok(Tensor::matrix(rows, c, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn broadcast_rules() {
        let a = Tensor::zeros(3, 4);
        assert_eq!(broadcast_kind("t", &a, &Tensor::zeros(1, 4)).unwrap(), Broadcast::Row);
        assert_eq!(broadcast_kind("t", &a, &Tensor::zeros(3, 1)).unwrap(), Broadcast::Col);
        assert_eq!(broadcast_kind("t", &a, &Tensor::zeros(1, 1)).unwrap(), Broadcast::Scalar);
        assert!(broadcast_kind("t", &a, &Tensor::zeros(4, 3)).is_err());
    }

    #[test]
    fn row_max_ties_lowest_index() {
        let a = Tensor::matrix(2, 3, vec![1.0, 3.0, 3.0, 2.0, 2.0, 2.0]);
        let (v, idx) = row_max(&a).unwrap();
        assert_eq!(v.data(), &[3.0, 2.0]);
        assert_eq!(idx, vec![1, 0]);
    }

    #[test]
    fn scatter_rows_accumulates_duplicates() {
        let a = Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]);
        let s = scatter_rows(&a, &[0, 1, 0], 2).unwrap();
        assert_eq!(s.data(), &[5.0, 2.0]);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
