//! Minimal dense linear algebra for second-order pruning: symmetric Gram
//! matrices, Cholesky-based damped inversion, and inversion of principal
//! submatrices of an inverse.
//!
//! Everything is f64, row-major, and sized for desk-scale layers (dim ≤ 256),
//! so no blocking or sparsity is attempted.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "matrix contains non-finite values".into(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; handy in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.iter().flatten().copied().collect())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// C = self · other.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidShape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                let src = other.row(k);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Principal submatrix selected by `idx` on both axes.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Result<Matrix> {
        check_index_set(idx, self.rows.min(self.cols))?;
        let m = idx.len();
        let mut out = Matrix::zeros(m, m);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out.set(a, b, self.get(i, j));
            }
        }
        Ok(out)
    }

    /// Rows selected by `idx`, all columns (`A[idx, :]`).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        check_index_set(idx, self.rows)?;
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (a, &i) in idx.iter().enumerate() {
            out.data[a * self.cols..(a + 1) * self.cols].copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    /// Columns selected by `idx`, all rows (`A[:, idx]`).
    pub fn select_cols(&self, idx: &[usize]) -> Result<Matrix> {
        check_index_set(idx, self.cols)?;
        let mut out = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (b, &j) in idx.iter().enumerate() {
                out.set(i, b, self.get(i, j));
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Symmetric positive (semi-)definite matrix, as produced by [`gram`].
///
/// `damping` is the absolute ridge added to the diagonal when inverting;
/// it is zero until [`SymPosDef::with_damping_frac`] is applied.
#[derive(Debug, Clone)]
pub struct SymPosDef {
    pub dim: usize,
    data: Vec<f64>,
    pub damping: f64,
}

impl SymPosDef {
    /// Validates symmetry to 1e-12 relative before accepting the data.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::InvalidShape(format!(
                "symmetric {dim}x{dim} needs {} values",
                dim * dim
            )));
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                if (a - b).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!(
                        "matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(SymPosDef {
            dim,
            data,
            damping: 0.0,
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean_diag(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        (0..self.dim).map(|i| self.get(i, i)).sum::<f64>() / self.dim as f64
    }

    /// Sets `damping = frac * mean(diag)`.
    pub fn with_damping_frac(mut self, frac: f64) -> Self {
        self.damping = frac * self.mean_diag();
        self
    }

    /// Dense copy of `H + damping·I`.
    pub fn damped_dense(&self) -> Matrix {
        let mut m = Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        };
        for i in 0..self.dim {
            let v = m.get(i, i) + self.damping;
            m.set(i, i, v);
        }
        m
    }

    /// Restriction of the damped matrix to `idx × idx`, keeping the same
    /// absolute damping.
    pub fn restricted(&self, idx: &[usize]) -> Result<SymPosDef> {
        let m = idx.len();
        let mut data = vec![0.0; m * m];
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                if i >= self.dim || j >= self.dim {
                    return Err(Error::InvalidShape("restriction index out of range".into()));
                }
                data[a * m + b] = self.get(i, j);
            }
        }
        let mut out = SymPosDef::new(m, data)?;
        out.damping = self.damping;
        Ok(out)
    }

    /// `(H + damping·I)⁻¹` via Cholesky.
    pub fn inverse(&self) -> Result<Matrix> {
        let damped = self.damped_dense();
        invert_spd(&damped)
    }
}

/// `H = X·Xᵀ` for `X` of shape `d_in × N` (rows are input features, columns
/// are samples). The result is exactly symmetric: the upper triangle is
/// computed once and mirrored.
pub fn gram(x: &Matrix) -> Result<SymPosDef> {
    if x.rows == 0 || x.cols == 0 {
        return Err(Error::InvalidShape(format!(
            "gram of {}x{} input",
            x.rows, x.cols
        )));
    }
    let d = x.rows;
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        let ri = x.row(i);
        for j in i..d {
            let rj = x.row(j);
            let mut s = 0.0;
            for k in 0..x.cols {
                s += ri[k] * rj[k];
            }
            data[i * d + j] = s;
            data[j * d + i] = s;
        }
    }
    SymPosDef::new(d, data)
}

/// `(H + λI)⁻¹` with `λ = lambda_frac · mean(diag(H))`.
pub fn damped_inverse(h: &SymPosDef, lambda_frac: f64) -> Result<Matrix> {
    if lambda_frac < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "negative damping fraction {lambda_frac}"
        )));
    }
    h.clone().with_damping_frac(lambda_frac).inverse()
}

/// Inverse of the principal submatrix `(H⁻¹)_{M,M}` of an already-inverted
/// matrix, i.e. `((H⁻¹)_{M,M})⁻¹`.
pub fn inverse_submatrix_inverse(hinv: &Matrix, idx: &[usize]) -> Result<Matrix> {
    if hinv.rows != hinv.cols {
        return Err(Error::InvalidShape("expected square matrix".into()));
    }
    if idx.is_empty() {
        return Err(Error::InvalidShape("empty index set".into()));
    }
    let sub = hinv.principal_submatrix(idx)?;
    invert_spd(&sub)
}

/// Distinct indices, all below `bound`.
fn check_index_set(idx: &[usize], bound: usize) -> Result<()> {
    if idx.iter().any(|&i| i >= bound) {
        return Err(Error::InvalidShape("index out of range".into()));
    }
    let mut seen = vec![false; bound];
    for &i in idx {
        if seen[i] {
            return Err(Error::InvalidShape(format!("duplicate index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Lower-triangular Cholesky factor of a square matrix, or `None` when a
/// pivot is not strictly positive.
fn cholesky(a: &Matrix) -> Option<Vec<f64>> {
    let n = a.rows;
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverts a symmetric positive definite matrix via Cholesky. A failed
/// factorization means the input is genuinely not PD and surfaces as
/// [`Error::SingularHessian`] instead of silently proceeding.
fn invert_spd(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    let l = cholesky(a)
        .ok_or_else(|| Error::SingularHessian(format!("cholesky failed on {n}x{n} matrix")))?;

    // Invert L by forward substitution, then H⁻¹ = L⁻ᵀ·L⁻¹.
    let mut linv = vec![0.0f64; n * n];
    for i in 0..n {
        linv[i * n + i] = 1.0 / l[i * n + i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = s / l[i * n + i];
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in i.max(j)..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}
