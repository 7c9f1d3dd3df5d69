//! Moran's I operator and the multivariate MI basis.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{MstmError, Result};
use crate::graph::Cell;
use crate::linalg::{column_space_projector, orient_columns, orthogonal_complement, sym_eig_sorted, symmetrize};

/// `G(X, A) = (I − P_X) A (I − P_X)`.
pub fn mi_operator(x: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || x.nrows() != n {
        return Err(MstmError::Dimension(format!(
            "MI operator: X is {}x{}, A is {}x{}",
            x.nrows(),
            x.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    let residual = DMatrix::<f64>::identity(n, n) - column_space_projector(x);
    Ok(symmetrize(&(&residual * a * &residual)))
}

/// Leading eigenvectors of the MI operator, restricted to C(X)^⊥.
#[derive(Debug, Clone, PartialEq)]
pub struct MiBasis {
    /// `N_t × r`, rows aligned with `cells`.
    pub s: DMatrix<f64>,
    /// The `r` retained MI-operator eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    /// Prediction cells the rows refer to.
    pub cells: Vec<Cell>,
}

impl MiBasis {
    pub fn rank(&self) -> usize {
        self.s.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.s.nrows()
    }

    /// Rows at the given positions, in the given order.
    pub fn rows(&self, positions: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(positions.len(), self.rank(), |i, j| self.s[(positions[i], j)])
    }

    /// Rows for the requested cells, which must belong to the prediction support.
    pub fn rows_for(&self, cells: &[Cell]) -> Result<DMatrix<f64>> {
        let positions = cells
            .iter()
            .map(|c| {
                self.cells.binary_search(c).map_err(|_| MstmError::UnknownCell {
                    variable: c.variable,
                    unit: c.unit,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.rows(&positions))
    }
}

/// Number of MI basis vectors available: `N_t − rank(X_t)`.
pub fn available_rank(x: &DMatrix<f64>) -> usize {
    x.nrows() - crate::linalg::column_rank(x)
}

/// Build the rank-`r` MI basis over the full prediction support.
///
/// The eigenproblem is solved on an orthonormal basis of C(X)^⊥, so every
/// basis vector is orthogonal to the covariates even when `r` reaches into
/// the zero eigenspace of `G`, where C(X) also lives.
pub fn mi_basis(x: &DMatrix<f64>, a: &DMatrix<f64>, r: usize, cells: Vec<Cell>) -> Result<MiBasis> {
    let n = a.nrows();
    if !a.is_square() || x.nrows() != n || cells.len() != n {
        return Err(MstmError::Dimension(format!(
            "MI basis: X has {} rows, A is {}x{}, {} cells",
            x.nrows(),
            a.nrows(),
            a.ncols(),
            cells.len()
        )));
    }
    let complement = orthogonal_complement(x);
    let bound = complement.ncols();
    if r == 0 || r > bound {
        return Err(MstmError::RankTooLarge { requested: r, bound });
    }
    let restricted = symmetrize(&(complement.transpose() * a * &complement));
    let eig = sym_eig_sorted(&restricted)?;
    let mut s = &complement * eig.vectors.columns(0, r);
    orient_columns(&mut s);
    Ok(MiBasis {
        s,
        eigenvalues: eig.values.rows(0, r).into_owned(),
        cells,
    })
}

/// Dump bases as `time,cell_index,component,value` (time 1-based).
pub fn write_basis_csv<'a>(
    writer: impl Write,
    bases: impl IntoIterator<Item = (usize, &'a MiBasis)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "cell_index", "component", "value"])?;
    for (t, basis) in bases {
        for i in 0..basis.n_rows() {
            for k in 0..basis.rank() {
                w.write_record([
                    (t + 1).to_string(),
                    i.to_string(),
                    (k + 1).to_string(),
                    format!("{:?}", basis.s[(i, k)]),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| MstmError::io("<basis dump>", e))?;
    Ok(())
}
