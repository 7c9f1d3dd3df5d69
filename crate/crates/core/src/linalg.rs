//! Dense symmetric kernels shared by every spectral construction in the crate.
//!
//! All routines are deterministic for a fixed input: eigenpairs are sorted by
//! descending algebraic eigenvalue (stable with respect to the solver's order
//! on ties) and every eigenvector is oriented so that its largest-magnitude
//! entry is positive, with ties going to the lowest row index.

use nalgebra::{DMatrix, DVector};

use crate::error::{MstmError, Result};

/// Relative tolerance on ‖R − R′‖_F accepted by [`sym_eig_sorted`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Relative eigenvalue cut used for ranks and pseudo-inverses.
pub const RANK_TOL: f64 = 1e-10;

/// Eigendecomposition `R = Φ Λ Φ′` of a real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Eigenvalues, sorted descending.
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors, column `k` paired with `values[k]`.
    pub vectors: DMatrix<f64>,
}

impl SymmetricEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Largest eigenvalue, or 0 for an empty matrix.
    pub fn max_value(&self) -> f64 {
        self.values.get(0).copied().unwrap_or(0.0)
    }

    /// Smallest eigenvalue, or 0 for an empty matrix.
    pub fn min_value(&self) -> f64 {
        self.values.get(self.dim().wrapping_sub(1)).copied().unwrap_or(0.0)
    }

    /// Rebuild `Φ f(Λ) Φ′` for an arbitrary spectral map.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[k]);
        }
        symmetrize(&(scaled * self.vectors.transpose()))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(|v| v)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Flip each column so its largest-magnitude entry is positive.
pub fn orient_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let peak = col.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if peak == 0.0 {
            continue;
        }
        let cut = peak * (1.0 - 1e-12);
        let lead = col.iter().copied().find(|v| v.abs() >= cut).unwrap_or(0.0);
        if lead < 0.0 {
            col.neg_mut();
        }
    }
}

/// Symmetric eigendecomposition with the crate's ordering and sign convention.
pub fn sym_eig_sorted(r: &DMatrix<f64>) -> Result<SymmetricEigen> {
    if !r.is_square() {
        return Err(MstmError::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let n = r.nrows();
    if n == 0 {
        return Ok(SymmetricEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let norm = frobenius(r);
    let asym = frobenius(&(r - r.transpose()));
    if asym > SYMMETRY_TOL * norm {
        return Err(MstmError::Asymmetric(asym / norm));
    }

    let eig = symmetrize(r).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep the solver's order
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    orient_columns(&mut vectors);
    Ok(SymmetricEigen { values, vectors })
}

/// Frobenius-nearest symmetric positive semi-definite matrix to a real square
/// matrix: symmetrize, then clamp negative eigenvalues to zero.
pub fn nearest_psd(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() {
        return Err(MstmError::Dimension(format!(
            "nearest_psd needs a square matrix, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let eig = sym_eig_sorted(&symmetrize(r))?;
    Ok(eig.reconstruct_with(|v| v.max(0.0)))
}

/// Orthonormal basis for the column space of `x`, via the spectrum of `x′x`
/// with relative rank cut [`RANK_TOL`].
pub fn column_space_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    if x.ncols() == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let gram = symmetrize(&(x.transpose() * x));
    let eig = sym_eig_sorted(&gram).expect("gram matrix is symmetric");
    let top = eig.values[0];
    if !(top > 0.0) {
        return DMatrix::zeros(n, 0);
    }
    let kept: Vec<usize> = (0..eig.dim())
        .filter(|&k| eig.values[k] > RANK_TOL * top)
        .collect();
    let mut u = DMatrix::zeros(n, kept.len());
    for (j, &k) in kept.iter().enumerate() {
        let col = x * eig.vectors.column(k) / eig.values[k].sqrt();
        u.set_column(j, &col);
    }
    u
}

/// Numerical rank of `x` under the relative cut used by the projector.
pub fn column_rank(x: &DMatrix<f64>) -> usize {
    column_space_basis(x).ncols()
}

/// Orthogonal projector onto C(X); the zero matrix when `x` has no columns.
pub fn column_space_projector(x: &DMatrix<f64>) -> DMatrix<f64> {
    let u = column_space_basis(x);
    symmetrize(&(&u * u.transpose()))
}

/// Orthonormal basis (n × (n − rank X)) of the orthogonal complement of C(X).
pub fn orthogonal_complement(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let u = column_space_basis(x);
    let k = u.ncols();
    let residual = DMatrix::<f64>::identity(n, n) - symmetrize(&(&u * u.transpose()));
    let eig = sym_eig_sorted(&residual).expect("projector is symmetric");
    eig.vectors.columns(0, n - k).into_owned()
}

/// Moore–Penrose inverse of a symmetric matrix with relative cut [`RANK_TOL`];
/// also returns the numerical rank.
pub fn pinv_symmetric(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let eig = sym_eig_sorted(a)?;
    if eig.dim() == 0 {
        return Ok((DMatrix::zeros(0, 0), 0));
    }
    let scale = eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cut = RANK_TOL * scale;
    let rank = eig.values.iter().filter(|v| v.abs() > cut && scale > 0.0).count();
    let inv = eig.reconstruct_with(|v| if v.abs() > cut && scale > 0.0 { 1.0 / v } else { 0.0 });
    Ok((inv, rank))
}

/// Inverse of a symmetric positive definite matrix, `None` if Cholesky fails.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = symmetrize(a).cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

/// `L` with `L L′ = C` for a symmetric PSD covariance. Uses Cholesky when it
/// succeeds and a clamped spectral square root otherwise.
pub fn covariance_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(c);
    if let Some(chol) = sym.clone().cholesky() {
        return chol.l();
    }
    let eig = sym
        .clone()
        .symmetric_eigen();
    let mut root = eig.eigenvectors.clone();
    for (k, mut col) in root.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    root
}
