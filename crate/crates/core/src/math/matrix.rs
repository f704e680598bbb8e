use crate::error::{shape_err, Result};
use crate::math::Rng;

/// Dense row-major matrix of `f64`.
///
/// Linear maps are stored output-major: a map `R^in -> R^out` is an
/// `out x in` matrix and [`Matrix::apply`] computes `W x`.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return shape_err(format!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    /// `W x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `W^T y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(&mut out, yr, self.row(r));
            }
        }
        out
    }

    /// Applies the map to every row of `x` (`x W^T`).
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.cols, self.cols);
        let mut out = Matrix::zeros(x.rows, self.rows);
        for i in 0..x.rows {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            for (r, o) in oi.iter_mut().enumerate() {
                *o = dot(self.row(r), xi);
            }
        }
        out
    }

    /// `self += scale * a b^T`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != 0.0 {
                axpy(self.row_mut(r), s, b);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(&mut self.data, s, &other.data);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by `idx`, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return shape_err(format!("row of {} values into {} columns", row.len(), self.cols));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Columns `[start, start + width)` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return shape_err(format!("solve of {}x{} with rhs {}", a.rows(), a.cols(), b.len()));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if d <= 0.0 {
                    return Err(crate::error::Error::InvalidArgument(
                        "matrix is not positive definite".into(),
                    ));
                }
                l.set(i, i, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * y[k]).sum();
        y[i] = (b[i] - s) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (y[i] - s) / l.get(i, i);
    }
    Ok(x)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 3, vec![0.0; 5]).is_err());
        assert!(Matrix::from_vec(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn apply_and_transpose_agree_with_manual_product() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(w.apply(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(w.apply_transpose(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        let x = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(w.apply_rows(&x).row(0), &[6.0, 15.0]);
    }

    #[test]
    fn spd_solve() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = solve_spd(&a, &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        assert!(solve_spd(&Matrix::zeros(2, 2), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn outer_update() {
        let mut m = Matrix::zeros(2, 2);
        m.add_outer(2.0, &[1.0, 0.0], &[3.0, 4.0]);
        assert_eq!(m.as_slice(), &[6.0, 8.0, 0.0, 0.0]);
    }
}
