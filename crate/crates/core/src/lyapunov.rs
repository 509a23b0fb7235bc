//! Quadratic Lyapunov candidates `V(x) = xᵀ P x` with `P = L Lᵀ`.

use std::ops::Deref;

use crate::eigen::symmetric_eigenvalues;
use crate::error::{check_dim, Error, Result};

/// A finite, non-empty state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::domain("state vector must have dimension >= 1"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("state vector entries must be finite"));
        }
        Ok(Self(entries))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Number of entries in a lower-triangular `n x n` matrix.
pub const fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

#[inline]
fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

/// Lower-triangular factor with strictly positive diagonal, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    n: usize,
    entries: Vec<f64>,
}

impl CholeskyFactor {
    /// Builds a factor from `n(n+1)/2` row-major lower-triangular entries.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidFactor("dimension must be >= 1".into()));
        }
        if entries.len() != tri_len(n) {
            return Err(Error::InvalidFactor(format!(
                "expected {} entries for n = {n}, got {}",
                tri_len(n),
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFactor("entries must be finite".into()));
        }
        for i in 0..n {
            let d = entries[tri_index(i, i)];
            if d <= 0.0 {
                return Err(Error::InvalidFactor(format!(
                    "diagonal entry {i} is {d}, must be strictly positive"
                )));
            }
        }
        Ok(Self { n, entries })
    }

    /// Builds a factor from full matrix rows; the strictly-upper part must be zero.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(tri_len(n));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidFactor(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row[i + 1..].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidFactor(format!(
                    "row {i} has non-zero entries above the diagonal"
                )));
            }
            entries.extend_from_slice(&row[..=i]);
        }
        Self::new(n, entries)
    }

    /// Cholesky decomposition of a symmetric positive definite row-major matrix.
    pub fn decompose(p: &[f64], n: usize) -> Result<Self> {
        if p.len() != n * n {
            return Err(Error::InvalidFactor(format!(
                "expected {} matrix entries for n = {n}, got {}",
                n * n,
                p.len()
            )));
        }
        let mut entries = vec![0.0; tri_len(n)];
        for i in 0..n {
            for j in 0..=i {
                let mut s = p[i * n + j];
                for k in 0..j {
                    s -= entries[tri_index(i, k)] * entries[tri_index(j, k)];
                }
                entries[tri_index(i, j)] = if i == j {
                    if !(s > 0.0) {
                        return Err(Error::InvalidFactor(format!(
                            "matrix is not positive definite (pivot {i} is {s})"
                        )));
                    }
                    s.sqrt()
                } else {
                    s / entries[tri_index(j, j)]
                };
            }
        }
        Self::new(n, entries)
    }

    /// Factor of `L Lᵀ + shift · I`.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        let n = self.n;
        let mut p = self.gram();
        for i in 0..n {
            p[i * n + i] += shift;
        }
        Self::decompose(&p, n)
    }

    /// Squared Frobenius norm, i.e. `tr(L Lᵀ)`.
    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; tri_len(n)];
        for i in 0..n {
            entries[tri_index(i, i)] = 1.0;
        }
        Self { n, entries }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Entry `(i, j)`; zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.entries[tri_index(i, j)]
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// `L Lᵀ` as a row-major `n x n` matrix, exactly symmetric.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.n;
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j {
                    s += self.get(i, k) * self.get(j, k);
                }
                p[i * n + j] = s;
                p[j * n + i] = s;
            }
        }
        p
    }
}

/// Stability residual `V̇ + λV + γ`; non-positive means the sample satisfies
/// the margined decay condition.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct StabilityResidual(pub f64);

impl StabilityResidual {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// A quadratic Lyapunov candidate with cached `P = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCandidate {
    factor: CholeskyFactor,
    p: Vec<f64>,
}

impl LyapunovCandidate {
    pub fn new(factor: CholeskyFactor) -> Self {
        let p = factor.gram();
        Self { factor, p }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(CholeskyFactor::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.factor.n
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// Row-major `P`.
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    #[inline]
    pub(crate) fn quad(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for (row, ai) in self.p.chunks_exact(n).zip(a) {
            let mut r = 0.0;
            for (pij, bj) in row.iter().zip(b) {
                r += pij * bj;
            }
            s += ai * r;
        }
        s
    }

    /// `V(x) = xᵀ P x`.
    pub fn eval_v(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.quad(x, x))
    }

    /// `V̇ = 2 xᵀ P ẋ`.
    pub fn eval_vdot(&self, x: &[f64], xdot: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), xdot.len())?;
        Ok(2.0 * self.quad(x, xdot))
    }

    #[inline]
    pub(crate) fn residual_unchecked(&self, x: &[f64], xdot: &[f64], lambda: f64, gamma: f64) -> f64 {
        2.0 * self.quad(x, xdot) + lambda * self.quad(x, x) + gamma
    }

    /// `V̇ + λV + γ`.
    pub fn residual(
        &self,
        x: &[f64],
        xdot: &[f64],
        lambda: f64,
        gamma: f64,
    ) -> Result<StabilityResidual> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), xdot.len())?;
        Ok(StabilityResidual(self.residual_unchecked(x, xdot, lambda, gamma)))
    }

    /// `(λ_min(P), λ_max(P))`, so that `k1‖x‖² ≤ V(x) ≤ k2‖x‖²`.
    pub fn spectral_bounds(&self) -> (f64, f64) {
        let eig = symmetric_eigenvalues(&self.p, self.dim());
        (eig[0], eig[eig.len() - 1])
    }
}
