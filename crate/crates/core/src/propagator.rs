//! MI propagator matrices for the latent VAR(1).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MstmError, Result};
use crate::linalg::{column_space_projector, frobenius, sym_eig_sorted, symmetrize};

/// Below this (relative to ‖X‖_F) the confounding block `S′X` is treated as
/// exactly zero.
pub const CONFOUNDING_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagatorMode {
    /// Eigenvectors of `I_r − P_C` with `C = S′X`.
    #[default]
    Reduced,
    /// Eigenvectors of `G(B, I_r)`, which is the zero operator.
    PaperLiteral,
}

/// `B = (S′X, I_r)`.
pub fn build_b(s: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() != x.nrows() {
        return Err(MstmError::Dimension(format!(
            "B: S has {} rows, X has {}",
            s.nrows(),
            x.nrows()
        )));
    }
    let r = s.ncols();
    let p = x.ncols();
    let mut b = DMatrix::zeros(r, p + r);
    b.view_mut((0, 0), (r, p)).copy_from(&(s.transpose() * x));
    b.view_mut((0, p), (r, r)).fill_with_identity();
    Ok(b)
}

/// Propagator `M` (r × r) from `B = (C, I_r)`.
///
/// `p` is the number of covariate columns in the left block; `x_scale` is
/// ‖X‖_F and sets the cut below which `C` is considered identically zero.
pub fn mi_propagator(b: &DMatrix<f64>, p: usize, x_scale: f64, mode: PropagatorMode) -> Result<DMatrix<f64>> {
    let r = b.nrows();
    if b.ncols() != p + r {
        return Err(MstmError::Dimension(format!(
            "B is {}x{}, expected {}x{}",
            r,
            b.ncols(),
            r,
            p + r
        )));
    }
    let ident = DMatrix::<f64>::identity(r, r);
    match mode {
        PropagatorMode::PaperLiteral => {
            let g = &ident - column_space_projector(b);
            if frobenius(&g) <= CONFOUNDING_TOL * (r as f64).sqrt() {
                return Err(MstmError::DegeneratePropagator);
            }
            Ok(sym_eig_sorted(&symmetrize(&g))?.vectors)
        }
        PropagatorMode::Reduced => {
            let c = b.columns(0, p).into_owned();
            if frobenius(&c) <= CONFOUNDING_TOL * x_scale.max(1.0) {
                return Ok(ident);
            }
            let g = &ident - column_space_projector(&c);
            Ok(sym_eig_sorted(&symmetrize(&g))?.vectors)
        }
    }
}
