use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense symmetric matrix with single-triangle storage.
///
/// Only the lower triangle (row-packed) is stored, so `get(i, j)` and
/// `get(j, i)` read the same entry by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    // entry (i, j) with j <= i lives at i*(i+1)/2 + j
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds from `f(i, j)`, evaluated once per unordered pair (`j <= i`).
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Reads the lower triangle of a square matrix (entries above the
    /// diagonal are ignored, which symmetrizes roundoff-asymmetric input).
    pub fn from_lower(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self::from_fn(m.nrows(), |i, j| m[(i, j)]))
    }

    #[inline]
    fn idx(i: usize, j: usize) -> usize {
        debug_assert!(j <= i);
        i * (i + 1) / 2 + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j <= i {
            self.data[Self::idx(i, j)]
        } else {
            self.data[Self::idx(j, i)]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        if j <= i {
            self.data[Self::idx(i, j)] = v;
        } else {
            self.data[Self::idx(j, i)] = v;
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[Self::idx(i, i)]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.diag(i)).sum()
    }

    /// `tr(S^2) = sum_i S_ii^2 + 2 sum_{i<j} S_ij^2`, without forming `S^2`.
    pub fn trace_of_square(&self) -> f64 {
        let mut diag_sq = 0.0;
        let mut off_sq = 0.0;
        for i in 0..self.dim {
            for j in 0..i {
                let v = self.data[Self::idx(i, j)];
                off_sq += v * v;
            }
            let d = self.diag(i);
            diag_sq += d * d;
        }
        diag_sq + 2.0 * off_sq
    }

    /// `sum_{i<j} S_ij^2`.
    pub fn sum_offdiag_sq(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            for j in 0..i {
                let v = self.data[Self::idx(i, j)];
                acc += v * v;
            }
        }
        acc
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }
}

/// Lower-triangular Cholesky factor of `S + jitter*I`.
///
/// Fails (rather than producing complex entries) when a pivot is
/// non-positive, reporting the failing index.
pub fn cholesky(s: &SymMatrix, jitter: f64) -> Result<DMatrix<f64>> {
    if jitter < 0.0 {
        return Err(Error::Domain("cholesky jitter must be nonnegative".into()));
    }
    let n = s.dim();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = s.diag(j) + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                index: j,
                value: d,
                jitter,
            });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut v = s.get(i, j);
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok(l)
}

/// Eigenvalues of a symmetric matrix, descending. Used for spectrum
/// histograms only; participation ratios go through trace identities.
pub fn sym_eigvals(s: &SymMatrix) -> Result<Vec<f64>> {
    if s.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "symmetric eigensolve on non-finite input".into(),
        ));
    }
    let max_iter = 30 * s.dim().max(1);
    let eig = nalgebra::SymmetricEigen::try_new(s.to_dmatrix(), f64::EPSILON, max_iter)
        .ok_or_else(|| {
            Error::Numerical(format!(
                "symmetric eigensolve failed to converge within {max_iter} iterations"
            ))
        })?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}
