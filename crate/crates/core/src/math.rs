//! Dense row-major matrix kernels shared by every other module.
//!
//! All compute is f64. Kernels are pure functions; callers may parallelize
//! over independent inputs.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid pooling kernel {0}: must be odd and >= 1")]
    InvalidKernel(usize),
    #[error("softmax row {row} has no valid positions")]
    EmptyRow { row: usize },
    #[error("top-k count {k} exceeds vector length {len}")]
    KTooLarge { k: usize, len: usize },
}

/// Dense 2-D array, row-major, f64 throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copies a contiguous block of rows into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies a contiguous block of columns into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols);
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: end - start,
            data,
        }
    }

    /// Gathers the given rows, in the order given, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        assert!(!indices.is_empty());
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            assert!(i < self.rows, "row index {i} out of range");
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Appends one row, growing the matrix by a single row.
    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row length must equal cols");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product with f64 accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, MathError> {
    if a.cols != b.rows {
        return Err(MathError::DimensionMismatch(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Multiplies a single row vector by a matrix.
pub fn vec_matmul(v: &[f64], m: &Matrix) -> Result<Vec<f64>, MathError> {
    if v.len() != m.rows {
        return Err(MathError::DimensionMismatch(format!(
            "vec_matmul len {} * {}x{}",
            v.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (o, &mv) in out.iter_mut().zip(m.row(k)) {
            *o += vk * mv;
        }
    }
    Ok(out)
}

/// Row-wise softmax with row-max subtraction.
///
/// `valid_prefix`, when given, holds the number of leading valid positions
/// per row; positions beyond it come out exactly 0 and the normalization
/// runs over the valid prefix only.
pub fn softmax_rows(logits: &Matrix, valid_prefix: Option<&[usize]>) -> Result<Matrix, MathError> {
    if let Some(p) = valid_prefix {
        if p.len() != logits.rows {
            return Err(MathError::DimensionMismatch(format!(
                "valid_prefix length {} vs {} rows",
                p.len(),
                logits.rows
            )));
        }
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let valid = valid_prefix.map_or(logits.cols, |p| p[r].min(logits.cols));
        if valid == 0 {
            return Err(MathError::EmptyRow { row: r });
        }
        let row = logits.row(r);
        let max = row[..valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let orow = out.row_mut(r);
        for c in 0..valid {
            let e = (row[c] - max).exp();
            orow[c] = e;
            sum += e;
        }
        for v in &mut orow[..valid] {
            *v /= sum;
        }
    }
    Ok(out)
}

/// 1-D average pooling along each row: stride 1, zero padding of
/// `kernel/2` on each side, constant divisor `kernel` (padding counts
/// in the denominator). Output shape equals input shape.
pub fn avg_pool_rows(m: &Matrix, kernel: usize) -> Result<Matrix, MathError> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(MathError::InvalidKernel(kernel));
    }
    if kernel == 1 {
        return Ok(m.clone());
    }
    let half = kernel / 2;
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let orow = out.row_mut(r);
        for c in 0..m.cols {
            let lo = c.saturating_sub(half);
            let hi = (c + half + 1).min(m.cols);
            let sum: f64 = row[lo..hi].iter().sum();
            orow[c] = sum / kernel as f64;
        }
    }
    Ok(out)
}

/// Euclidean norm of each row.
pub fn row_l2_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows)
        .map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Indices of the `k` largest values. Ties break toward the lower index;
/// the result is sorted ascending by index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>, MathError> {
    if k > scores.len() {
        return Err(MathError::KTooLarge {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Sort by (value desc, index asc); stable sort keeps index order on ties.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.uniform() * 2.0 - 1.0).collect(),
        )
    }

    // Independent triple-loop reference for matmul.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_direct() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_oracle() {
        let mut rng = SplitMix64::new(7);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(MathError::DimensionMismatch(_))));
    }

    #[test]
    fn matmul_associative() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 6);
            let b = random_matrix(&mut rng, 6, 5);
            let c = random_matrix(&mut rng, 5, 3);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / scale < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_symmetry() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]);
        let s = softmax_rows(&m, None).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_direct() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]);
        let s = softmax_rows(&m, None).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked() {
        let m = Matrix::from_rows(&[vec![5.0, 9.0, 2.0]]);
        let s = softmax_rows(&m, Some(&[2])).unwrap();
        let e4 = 4.0f64.exp();
        assert!((s.get(0, 0) - 1.0 / (1.0 + e4)).abs() < 1e-12);
        assert!((s.get(0, 1) - e4 / (1.0 + e4)).abs() < 1e-12);
        assert_eq!(s.get(0, 2), 0.0);
    }

    #[test]
    fn softmax_empty_row_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(
            softmax_rows(&m, Some(&[0])),
            Err(MathError::EmptyRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::new(3);
        let m = random_matrix(&mut rng, 8, 13);
        let prefix: Vec<usize> = (0..8).map(|r| r + 5).collect();
        let s = softmax_rows(&m, Some(&prefix)).unwrap();
        for r in 0..8 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    // Explicit sliding-window reference for pooling.
    fn pool_oracle(m: &Matrix, kernel: usize) -> Matrix {
        let half = kernel / 2;
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let mut sum = 0.0;
                for off in 0..kernel {
                    let pos = c as i64 + off as i64 - half as i64;
                    if pos >= 0 && (pos as usize) < m.cols() {
                        sum += m.get(r, pos as usize);
                    }
                }
                out.set(r, c, sum / kernel as f64);
            }
        }
        out
    }

    #[test]
    fn pool_zero_pad() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0, 0.0]]);
        let p = avg_pool_rows(&m, 3).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn pool_kernel_one_identity() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert_eq!(avg_pool_rows(&m, 1).unwrap(), m);
    }

    #[test]
    fn pool_matches_oracle() {
        let mut rng = SplitMix64::new(5);
        let m = random_matrix(&mut rng, 4, 9);
        let got = avg_pool_rows(&m, 5).unwrap();
        let want = pool_oracle(&m, 5);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_constant_row_edges() {
        let c = 2.5;
        let m = Matrix::from_vec(1, 9, vec![c; 9]);
        let p = avg_pool_rows(&m, 5).unwrap();
        let want = pool_oracle(&m, 5);
        for i in 0..9 {
            assert_eq!(p.get(0, i), want.get(0, i));
            if (2..7).contains(&i) {
                assert!((p.get(0, i) - c).abs() < 1e-12);
            } else {
                assert!(p.get(0, i) < c);
            }
        }
    }

    #[test]
    fn pool_even_kernel_rejected() {
        let m = Matrix::zeros(1, 4);
        assert_eq!(avg_pool_rows(&m, 2), Err(MathError::InvalidKernel(2)));
        assert_eq!(avg_pool_rows(&m, 0), Err(MathError::InvalidKernel(0)));
    }

    #[test]
    fn norms_triangle() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(row_l2_norms(&m), vec![5.0]);
    }

    #[test]
    fn norms_zero_and_unit() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(row_l2_norms(&m), vec![0.0, 1.0]);
    }

    #[test]
    fn norms_match_oracle() {
        let mut rng = SplitMix64::new(9);
        let m = random_matrix(&mut rng, 6, 4);
        let got = row_l2_norms(&m);
        for (r, n) in got.iter().enumerate() {
            let want = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - want).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_basic() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn topk_tie_lower_index() {
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = SplitMix64::new(13);
        let v: Vec<f64> = (0..50).map(|_| rng.uniform()).collect();
        let got = top_k_indices(&v, 17).unwrap();
        // Stable full sort reference.
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
        let mut want = order[..17].to_vec();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn topk_full_and_scale_invariance() {
        let mut rng = SplitMix64::new(17);
        let v: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
        assert_eq!(top_k_indices(&v, 20).unwrap(), (0..20).collect::<Vec<_>>());
        let scaled: Vec<f64> = v.iter().map(|x| x * 3.7).collect();
        assert_eq!(top_k_indices(&v, 7).unwrap(), top_k_indices(&scaled, 7).unwrap());
    }

    #[test]
    fn topk_too_large_rejected() {
        assert!(matches!(
            top_k_indices(&[1.0], 2),
            Err(MathError::KTooLarge { k: 2, len: 1 })
        ));
    }
}
