//! Dense row-major matrices and the few vector helpers the simulator needs.

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut CounterRng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = M x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = M^T x.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension mismatch");
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (yc, a) in y.iter_mut().zip(row) {
                *yc += a * xr;
            }
        }
        y
    }

    /// self += scale * u v^T.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        assert_eq!(u.len(), self.rows, "outer row mismatch");
        assert_eq!(v.len(), self.cols, "outer col mismatch");
        for r in 0..self.rows {
            let base = r * self.cols;
            let su = scale * u[r];
            for c in 0..self.cols {
                self.data[base + c] += su * v[c];
            }
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Inverse of a small square matrix by Gauss-Jordan elimination with
    /// partial pivoting. Errors on singular input.
    pub fn inverse(&self) -> Result<Matrix> {
        assert_eq!(self.rows, self.cols, "inverse needs a square matrix");
        let n = self.rows;
        let mut work = self.clone();
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            inv.set(i, i, 1.0);
        }
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&a, &b| {
                    work.get(a, col).abs().partial_cmp(&work.get(b, col).abs()).unwrap()
                })
                .unwrap();
            let pivot = work.get(pivot_row, col);
            if pivot.abs() < 1e-12 {
                return Err(Error::InvalidParam("singular matrix".into()));
            }
            if pivot_row != col {
                for c in 0..n {
                    let (a, b) = (work.get(col, c), work.get(pivot_row, c));
                    work.set(col, c, b);
                    work.set(pivot_row, c, a);
                    let (a, b) = (inv.get(col, c), inv.get(pivot_row, c));
                    inv.set(col, c, b);
                    inv.set(pivot_row, c, a);
                }
            }
            let scale = 1.0 / work.get(col, col);
            for c in 0..n {
                work.set(col, c, work.get(col, c) * scale);
                inv.set(col, c, inv.get(col, c) * scale);
            }
            for row in 0..n {
                if row == col {
                    continue;
                }
                let factor = work.get(row, col);
                if factor == 0.0 {
                    continue;
                }
                for c in 0..n {
                    work.set(row, c, work.get(row, c) - factor * work.get(col, c));
                    inv.set(row, c, inv.get(row, c) - factor * inv.get(col, c));
                }
            }
        }
        Ok(inv)
    }

    /// Right pseudo-inverse `M^T (M M^T)^{-1}` of a full-row-rank matrix,
    /// so `M * pinv = I`.
    pub fn right_pseudo_inverse(&self) -> Result<Matrix> {
        let mut gram = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..self.rows {
                gram.set(i, j, dot(self.row(i), self.row(j)));
            }
        }
        let gram_inv = gram.inverse()?;
        let mut out = Matrix::zeros(self.cols, self.rows);
        for c in 0..self.cols {
            for j in 0..self.rows {
                let mut acc = 0.0;
                for i in 0..self.rows {
                    acc += self.get(i, c) * gram_inv.get(i, j);
                }
                out.set(c, j, acc);
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// a += s * b.
pub fn axpy(a: &mut [f64], s: f64, b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Normalizes to unit L2 norm; errors on a zero-norm vector.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity; errors when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree_with_hand_computation() {
        let m = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 7.0, 11.0]);
        assert_eq!(m.matvec_t(&[1.0, 0.0, 1.0]), vec![6.0, 8.0]);
    }

    #[test]
    fn add_outer_matches_manual_product() {
        let mut m = Matrix::zeros(2, 3);
        m.add_outer(&[1.0, 2.0], &[3.0, 4.0, 5.0], 1.0);
        assert_eq!(m.row(0), &[3.0, 4.0, 5.0]);
        assert_eq!(m.row(1), &[6.0, 8.0, 10.0]);
    }

    #[test]
    fn pseudo_inverse_is_a_right_inverse() {
        let mut rng = crate::rng::CounterRng::new(77);
        let m = Matrix::gaussian(4, 9, 0.5, &mut rng);
        let pinv = m.right_pseudo_inverse().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..9 {
                    acc += m.get(i, k) * pinv.get(k, j);
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc - want).abs() < 1e-10, "product[{i}][{j}] = {acc}");
            }
        }
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[-5.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
