use crate::scalar::Scalar;

use super::NnError;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NnError::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the listed rows into a new matrix, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn map_to<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn check_finite(self) -> Result<Self, NnError> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(NnError::NonFinite("matrix product"))
        }
    }
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NnError> {
    if a.cols != b.rows {
        return Err(NnError::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    out.check_finite()
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NnError> {
    if a.rows != b.rows {
        return Err(NnError::Shape(format!(
            "matmul_tn {}x{} (transposed) by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for n in 0..a.rows {
        let brow = b.row(n);
        for (i, &ani) in a.row(n).iter().enumerate() {
            if ani == T::zero() {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bnj) in orow.iter_mut().zip(brow) {
                *o += ani * bnj;
            }
        }
    }
    out.check_finite()
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NnError> {
    if a.cols != b.cols {
        return Err(NnError::Shape(format!(
            "matmul_nt {}x{} by {}x{} (transposed)",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let s: T = arow.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
            out.data[i * b.rows + j] = s;
        }
    }
    out.check_finite()
}

/// Squared L2 norm of every row.
pub fn row_sq_norms<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    (0..m.rows).map(|r| m.row(r).iter().map(|&v| v * v).sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let out = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(out.as_slice(), &[11.0]);
    }

    #[test]
    fn zeros_times_anything() {
        let b = m(&[&[1.0, -2.0, 5.0, 0.5], &[3.0, 4.0, 1.0, 1.0], &[7.0, 8.0, 9.0, 10.0]]);
        let out = matmul(&Matrix::<f64>::zeros(2, 3), &b).unwrap();
        assert_eq!(out, Matrix::zeros(2, 4));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let err = matmul(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, NnError::Shape(_)));
        assert!(Matrix::<f64>::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn transposed_products_agree_with_plain_product() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let at = m(&[&[1.0, 4.0], &[2.0, 5.0], &[3.0, 6.0]]);
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&at, &b).unwrap());
        let c = m(&[&[1.0, 0.0, 2.0], &[-1.0, 1.0, 1.0]]);
        let ct = m(&[&[1.0, -1.0], &[0.0, 1.0], &[2.0, 1.0]]);
        assert_eq!(matmul_nt(&a, &c).unwrap(), matmul(&a, &ct).unwrap());
    }

    #[test]
    fn row_norms() {
        assert_eq!(row_sq_norms(&m(&[&[3.0, 4.0]])), vec![25.0]);
        assert_eq!(row_sq_norms(&Matrix::<f64>::zeros(2, 5)), vec![0.0, 0.0]);
        assert_eq!(row_sq_norms(&Matrix::<f64>::identity(2)), vec![1.0, 1.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let out = matmul(&Matrix::<f32>::identity(3), &Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[1.0f32, 2.0, 3.0]);
    }
}
