//! MI prior shapes: `K*` from a target precision and the innovation shapes `W*`.

use nalgebra::DMatrix;

use crate::error::{MstmError, Result};
use crate::linalg::{nearest_psd, sym_eig_sorted, symmetrize};

/// Relative floor on the PSD core spectrum before inversion.
pub const EIGEN_FLOOR: f64 = 1e-8;

/// Relative tolerance below which a negative eigenvalue of raw `W*` triggers lifting.
pub const LIFT_TOL: f64 = 1e-10;

/// `K*` together with a record of how much of its core had to be floored.
#[derive(Debug, Clone, PartialEq)]
pub struct KStar {
    pub matrix: DMatrix<f64>,
    /// Absolute value the core eigenvalues were raised to.
    pub floor: f64,
    /// Number of core eigenvalues that were raised to `floor`.
    pub floored: usize,
}

/// Innovation shape and whether it had to be lifted to the PSD cone.
#[derive(Debug, Clone, PartialEq)]
pub struct WStar {
    pub matrix: DMatrix<f64>,
    pub lifted: bool,
}

fn check_dims(s: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<()> {
    if !p.is_square() || p.nrows() != s.nrows() {
        return Err(MstmError::Dimension(format!(
            "target precision is {}x{}, basis has {} rows",
            p.nrows(),
            p.ncols(),
            s.nrows()
        )));
    }
    Ok(())
}

/// `nearest_psd(S′PS)`: the r × r matrix `C` minimizing ‖P − S C S′‖_F.
pub fn k_star_covariance_form(s: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(s, p)?;
    nearest_psd(&(s.transpose() * p * s))
}

/// `K* = nearest_psd(S′PS)⁻¹` with the core spectrum floored at
/// `EIGEN_FLOOR · λ_max` (or `EIGEN_FLOOR` when `λ_max ≤ 0`).
pub fn k_star(s: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<KStar> {
    invert_core(&k_star_covariance_form(s, p)?)
}

/// Multi-target form: the core is the average of `S_k′ P_k S_k`.
pub fn k_star_multi(targets: &[(&DMatrix<f64>, &DMatrix<f64>)]) -> Result<KStar> {
    let Some((s0, _)) = targets.first() else {
        return Err(MstmError::Invalid("k_star_multi needs at least one target".into()));
    };
    let r = s0.ncols();
    let mut sum = DMatrix::zeros(r, r);
    for (s, p) in targets {
        check_dims(s, p)?;
        if s.ncols() != r {
            return Err(MstmError::Dimension(format!("basis ranks {} and {} differ", r, s.ncols())));
        }
        sum += s.transpose() * *p * *s;
    }
    invert_core(&nearest_psd(&(sum / targets.len() as f64))?)
}

fn invert_core(core: &DMatrix<f64>) -> Result<KStar> {
    let eig = sym_eig_sorted(core)?;
    let top = eig.max_value();
    let floor = if top > 0.0 { EIGEN_FLOOR * top } else { EIGEN_FLOOR };
    let floored = eig.values.iter().filter(|&&v| v < floor).count();
    let matrix = eig.reconstruct_with(|v| 1.0 / v.max(floor));
    Ok(KStar { matrix, floor, floored })
}

/// `W* = K*_t − M K*_{t−1} M′`, lifted to its nearest PSD approximant when
/// indefinite beyond round-off.
pub fn w_star(k_t: &DMatrix<f64>, k_prev: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<WStar> {
    let r = k_t.nrows();
    if k_prev.shape() != (r, r) || m.shape() != (r, r) || k_t.ncols() != r {
        return Err(MstmError::Dimension("W*: shapes must all be r x r".into()));
    }
    let raw = symmetrize(&(k_t - m * k_prev * m.transpose()));
    let eig = sym_eig_sorted(&raw)?;
    let scale = eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if eig.min_value() < -LIFT_TOL * scale {
        Ok(WStar {
            matrix: eig.reconstruct_with(|v| v.max(0.0)),
            lifted: true,
        })
    } else {
        Ok(WStar { matrix: raw, lifted: false })
    }
}

/// `K*_t` for every time point and `W*_t` for `t ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorShapes {
    pub k_star: Vec<KStar>,
    /// `w_star[t − 1]` belongs to time index `t` (0-based), `t ≥ 1`.
    pub w_star: Vec<WStar>,
}

impl PriorShapes {
    pub fn n_times(&self) -> usize {
        self.k_star.len()
    }

    pub fn k(&self, t: usize) -> &DMatrix<f64> {
        &self.k_star[t].matrix
    }

    /// Innovation shape into time `t` (0-based, `t ≥ 1`).
    pub fn w(&self, t: usize) -> &DMatrix<f64> {
        &self.w_star[t - 1].matrix
    }

    pub fn lifted_flags(&self) -> Vec<bool> {
        self.w_star.iter().map(|w| w.lifted).collect()
    }

    /// Build all `W*` from per-time `K*` and the propagators into `t = 1..T−1`.
    pub fn from_parts(k_star: Vec<KStar>, propagators: &[DMatrix<f64>]) -> Result<Self> {
        if propagators.len() + 1 != k_star.len().max(1) {
            return Err(MstmError::Dimension(format!(
                "{} prior matrices need {} propagators, got {}",
                k_star.len(),
                k_star.len().saturating_sub(1),
                propagators.len()
            )));
        }
        let w_star = (1..k_star.len())
            .map(|t| w_star(&k_star[t].matrix, &k_star[t - 1].matrix, &propagators[t - 1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { k_star, w_star })
    }
}
