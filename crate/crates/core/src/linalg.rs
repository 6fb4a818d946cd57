//! Dense symmetric positive-definite linear algebra.
//!
//! Matrices are small (embedding dimension, typically ≤ 64) and stored
//! row-major in a flat `Vec<f64>`.

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// Symmetric matrix that is expected to be positive definite.
///
/// Positive definiteness is only proven by a successful [`cholesky`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SpdMatrix {
    /// Builds from row-major data; checks shape, finiteness and symmetry.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..dim {
            for j in 0..i {
                if (data[i * dim + j] - data[j * dim + i]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut data = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            data[i * dim + i] = *d;
        }
        Self { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                self.data[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Keeps the diagonal, zeroes everything else.
    pub fn diagonal_part(&self) -> Self {
        let diag: Vec<f64> = (0..self.dim).map(|i| self.get(i, i)).collect();
        Self::diagonal(&diag)
    }

    /// Row-major lower triangle, `dim·(dim+1)/2` entries.
    pub fn lower_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim * (self.dim + 1) / 2);
        for i in 0..self.dim {
            for j in 0..=i {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn from_lower_triangle(dim: usize, tri: &[f64]) -> Result<Self> {
        if tri.len() != dim * (dim + 1) / 2 {
            return Err(Error::DimensionMismatch {
                expected: dim * (dim + 1) / 2,
                got: tri.len(),
            });
        }
        let mut data = vec![0.0; dim * dim];
        let mut it = tri.iter();
        for i in 0..dim {
            for j in 0..=i {
                let v = *it.next().unwrap();
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        Self::from_row_major(dim, data)
    }
}

/// Lower-triangular `L` with `L·Lᵀ` equal to the factored matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    dim: usize,
    lower: Vec<f64>,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// `L·Lᵀ` as a dense matrix.
    pub fn reconstruct(&self) -> SpdMatrix {
        let n = self.dim;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        SpdMatrix { dim: n, data }
    }

    /// Solves `L·y = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, y)| l * y).sum();
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    /// Solves `Lᵀ·x = y` in place.
    pub fn back_substitute(&self, y: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
    }

    /// `vᵀ·Σ⁻¹·v` via one triangular solve.
    pub fn mahalanobis_sq(&self, v: &[f64]) -> f64 {
        let mut y = v.to_vec();
        self.forward_substitute(&mut y);
        y.iter().map(|x| x * x).sum()
    }
}

pub fn cholesky(m: &SpdMatrix) -> Result<CholFactor> {
    let n = m.dim;
    let mut lower = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= lower[i * n + k] * lower[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                }
                lower[i * n + i] = s.sqrt();
            } else {
                lower[i * n + j] = s / lower[j * n + j];
            }
        }
    }
    Ok(CholFactor { dim: n, lower })
}

/// `ln |Σ| = 2·Σ ln Lᵢᵢ`.
pub fn log_det(f: &CholFactor) -> f64 {
    2.0 * (0..f.dim).map(|i| f.get(i, i).ln()).sum::<f64>()
}

/// Solves `Σ·x = b` by forward then back substitution.
pub fn spd_solve(f: &CholFactor, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != f.dim {
        return Err(Error::DimensionMismatch {
            expected: f.dim,
            got: b.len(),
        });
    }
    let mut x = b.to_vec();
    f.forward_substitute(&mut x);
    f.back_substitute(&mut x);
    Ok(x)
}

/// Ridge shrinkage `m + eps·(tr(m)/S)·I`, falling back to `m + eps·I` when
/// the trace is not positive.
pub fn shrink(m: &SpdMatrix, eps: f64) -> SpdMatrix {
    let n = m.dim;
    let tr = m.trace();
    let ridge = if tr > 0.0 { eps * tr / n as f64 } else { eps };
    let mut out = m.clone();
    for i in 0..n {
        out.data[i * n + i] += ridge;
    }
    out
}

/// `tr(Σ_q⁻¹·Σ_p)` column by column through the factor of `Σ_q`.
pub fn trace_solve(q: &CholFactor, p: &SpdMatrix) -> f64 {
    let n = q.dim;
    let mut total = 0.0;
    let mut col = vec![0.0; n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = p.get(i, j);
        }
        q.forward_substitute(&mut col);
        q.back_substitute(&mut col);
        total += col[j];
    }
    total
}
