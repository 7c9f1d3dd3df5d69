//! Conjugate full conditionals for the non-state parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MstmError, Result};
use crate::linalg::{pinv_symmetric, symmetrize};

/// Inverse-gamma law with density ∝ x^{−shape−1} exp(−rate/x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub const fn new(shape: f64, rate: f64) -> Self {
        InverseGamma { shape, rate }
    }

    /// Mean, infinite for `shape ≤ 1`.
    pub fn mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.rate / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<f64> {
        let gamma = Gamma::new(self.shape, 1.0 / self.rate)
            .map_err(|e| MstmError::Invalid(format!("IG({}, {}): {e}", self.shape, self.rate)))?;
        Ok(1.0 / gamma.sample(rng))
    }
}

impl Default for InverseGamma {
    /// The vague IG(2, 1) used for every variance component.
    fn default() -> Self {
        InverseGamma::new(2.0, 1.0)
    }
}

/// Normal prior `N(μ_β·1, σ_β² I)` on the fixed effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaPrior {
    pub mean: f64,
    pub variance: f64,
}

impl Default for BetaPrior {
    fn default() -> Self {
        BetaPrior { mean: 0.0, variance: 1e15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// One β for all time points.
    #[default]
    Shared,
    /// An independent β_t per time point.
    PerTime,
}

fn check_positive(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        if !(v > 0.0) {
            return Err(MstmError::Invalid(format!("{what} {v} is not positive")));
        }
    }
    Ok(())
}

/// Elementwise moments of `ξ` given the residual `z − Xβ − Sη`.
pub fn xi_moments(residual: &DVector<f64>, v: &DVector<f64>, sigma_xi2: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    if residual.len() != v.len() {
        return Err(MstmError::Dimension(format!(
            "residual has {} entries, V has {}",
            residual.len(),
            v.len()
        )));
    }
    check_positive(v.iter().copied(), "measurement variance")?;
    check_positive([sigma_xi2], "fine-scale variance")?;
    let var = v.map(|vi| 1.0 / (1.0 / vi + 1.0 / sigma_xi2));
    let mean = DVector::from_fn(v.len(), |i, _| var[i] * residual[i] / v[i]);
    Ok((mean, var))
}

/// Draw `ξ_t` from its full conditional.
pub fn sample_xi(residual: &DVector<f64>, v: &DVector<f64>, sigma_xi2: f64, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let (mean, var) = xi_moments(residual, v, sigma_xi2)?;
    Ok(DVector::from_fn(mean.len(), |i, _| {
        mean[i] + var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
    }))
}

/// Sufficient statistics `X′V⁻¹X` and `X′V⁻¹y` for one time point.
pub fn weighted_cross_products(x: &DMatrix<f64>, v: &DVector<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if x.nrows() != v.len() || y.len() != v.len() {
        return Err(MstmError::Dimension(format!(
            "X has {} rows, V has {}, y has {}",
            x.nrows(),
            v.len(),
            y.len()
        )));
    }
    check_positive(v.iter().copied(), "measurement variance")?;
    let weighted = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] / v[i]);
    Ok((symmetrize(&(x.transpose() * &weighted)), weighted.transpose() * y))
}

/// Posterior mean and precision of β from accumulated cross-products.
pub fn beta_posterior(xtvx: &DMatrix<f64>, xtvy: &DVector<f64>, prior: &BetaPrior) -> (DVector<f64>, DMatrix<f64>) {
    let p = xtvx.nrows();
    let precision = xtvx + DMatrix::<f64>::identity(p, p) / prior.variance;
    let rhs = xtvy + DVector::from_element(p, prior.mean / prior.variance);
    (rhs, precision)
}

/// Draw from `N(Λ⁻¹b, Λ⁻¹)` given the precision `Λ` and `b`.
pub fn sample_canonical(b: &DVector<f64>, precision: &DMatrix<f64>, rng: &mut impl Rng) -> Option<DVector<f64>> {
    let chol = symmetrize(precision).cholesky()?;
    let mean = chol.solve(b);
    let z = DVector::from_fn(b.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let offset = chol.l().transpose().solve_upper_triangular(&z)?;
    Some(mean + offset)
}

/// Draw β. `x`, `v`, `y` are per-time design rows, variances and
/// `z_t − ξ_t − S_tη_t`. Returns one vector in shared mode and `T` vectors
/// in per-time mode.
pub fn sample_beta(
    x: &[DMatrix<f64>],
    v: &[DVector<f64>],
    y: &[DVector<f64>],
    prior: &BetaPrior,
    mode: BetaMode,
    rng: &mut impl Rng,
) -> Result<Vec<DVector<f64>>> {
    if x.is_empty() || x.len() != v.len() || x.len() != y.len() {
        return Err(MstmError::Dimension("β conditional needs matching X, V, y per time".into()));
    }
    check_positive([prior.variance], "prior β variance")?;
    let p = x[0].ncols();
    let stats = x
        .iter()
        .zip(v)
        .zip(y)
        .map(|((x, v), y)| weighted_cross_products(x, v, y))
        .collect::<Result<Vec<_>>>()?;
    let singular = || MstmError::Invalid("β information matrix is not positive definite".into());
    match mode {
        BetaMode::Shared => {
            let mut xtvx = DMatrix::zeros(p, p);
            let mut xtvy = DVector::zeros(p);
            for (a, b) in &stats {
                xtvx += a;
                xtvy += b;
            }
            let (b, precision) = beta_posterior(&xtvx, &xtvy, prior);
            Ok(vec![sample_canonical(&b, &precision, rng).ok_or_else(singular)?])
        }
        BetaMode::PerTime => stats
            .iter()
            .map(|(a, b)| {
                let (b, precision) = beta_posterior(a, b, prior);
                sample_canonical(&b, &precision, rng).ok_or_else(singular)
            })
            .collect(),
    }
}

/// Pseudo-inverses and ranks of the prior shapes used by the σ_K² conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInverses {
    pub k1: DMatrix<f64>,
    pub k1_rank: usize,
    pub w: Vec<DMatrix<f64>>,
    pub w_rank: Vec<usize>,
}

impl ShapeInverses {
    pub fn new(k1: &DMatrix<f64>, w: &[DMatrix<f64>]) -> Result<Self> {
        let (k1_inv, k1_rank) = pinv_symmetric(&symmetrize(k1))?;
        let (w_inv, w_rank) = w
            .iter()
            .map(|w| pinv_symmetric(&symmetrize(w)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(ShapeInverses {
            k1: k1_inv,
            k1_rank,
            w: w_inv,
            w_rank,
        })
    }

    /// Degrees of freedom contributed by the whole trajectory.
    pub fn dof(&self) -> usize {
        self.k1_rank + self.w_rank.iter().sum::<usize>()
    }
}

/// Full conditional of σ_K². Each Gaussian term contributes its rank to the
/// shape, so a zero innovation shape adds neither degrees of freedom nor a
/// quadratic form.
pub fn sigma_k_conditional(
    eta: &[DVector<f64>],
    shapes: &ShapeInverses,
    m: &[DMatrix<f64>],
    prior: &InverseGamma,
) -> Result<InverseGamma> {
    if eta.is_empty() || m.len() + 1 != eta.len() || shapes.w.len() != m.len() {
        return Err(MstmError::Dimension("σ_K² conditional: inconsistent time dimension".into()));
    }
    let mut quad = eta[0].dot(&(&shapes.k1 * &eta[0]));
    for t in 1..eta.len() {
        let innovation = &eta[t] - &m[t - 1] * &eta[t - 1];
        quad += innovation.dot(&(&shapes.w[t - 1] * &innovation));
    }
    Ok(InverseGamma::new(
        prior.shape + shapes.dof() as f64 / 2.0,
        prior.rate + quad.max(0.0) / 2.0,
    ))
}

pub fn sample_sigma_k(
    eta: &[DVector<f64>],
    shapes: &ShapeInverses,
    m: &[DMatrix<f64>],
    prior: &InverseGamma,
    rng: &mut impl Rng,
) -> Result<f64> {
    sigma_k_conditional(eta, shapes, m, prior)?.sample(rng)
}

/// Full conditional of σ_ξ,t²: `IG(α + n_t/2, β + ξ′ξ/2)`.
pub fn sigma_xi_conditional(xi: &DVector<f64>, prior: &InverseGamma) -> InverseGamma {
    InverseGamma::new(prior.shape + xi.len() as f64 / 2.0, prior.rate + xi.norm_squared() / 2.0)
}

pub fn sample_sigma_xi(xi: &DVector<f64>, prior: &InverseGamma, rng: &mut impl Rng) -> Result<f64> {
    sigma_xi_conditional(xi, prior).sample(rng)
}

/// Full conditional of one reweighting factor δ from the residuals of its
/// group and their base variances.
pub fn delta_conditional(residuals: &[f64], base_variances: &[f64], prior: &InverseGamma) -> Result<InverseGamma> {
    if residuals.len() != base_variances.len() {
        return Err(MstmError::Dimension("δ conditional: residual and variance counts differ".into()));
    }
    check_positive(base_variances.iter().copied(), "base variance")?;
    let scaled: f64 = residuals
        .iter()
        .zip(base_variances)
        .map(|(r, b)| r * r / b)
        .sum();
    Ok(InverseGamma::new(
        prior.shape + residuals.len() as f64 / 2.0,
        prior.rate + scaled / 2.0,
    ))
}

/// Draw `(δ^(1), δ^(2))` from the two group conditionals.
pub fn sample_delta(
    groups: [(&[f64], &[f64]); 2],
    prior: &InverseGamma,
    rng: &mut impl Rng,
) -> Result<[f64; 2]> {
    let first = delta_conditional(groups[0].0, groups[0].1, prior)?.sample(rng)?;
    let second = delta_conditional(groups[1].0, groups[1].1, prior)?.sample(rng)?;
    Ok([first, second])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xi_scalar_case() {
        let (mean, var) = xi_moments(&DVector::from_vec(vec![2.0]), &DVector::from_vec(vec![1.0]), 1.0).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-15);
        assert!((var[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn xi_limits() {
        let r = DVector::from_vec(vec![5.0, -3.0]);
        let (mean, var) = xi_moments(&r, &DVector::from_vec(vec![1.0, 2.0]), 1e-300).unwrap();
        assert!(mean.amax() < 1e-290 && var.amax() < 1e-290);
        let (mean, var) = xi_moments(&r, &DVector::from_element(2, 1e300), 0.7).unwrap();
        assert!(mean.amax() < 1e-290);
        assert!((var[0] - 0.7).abs() < 1e-12);
        assert!(xi_moments(&r, &DVector::from_vec(vec![1.0, -1.0]), 1.0).is_err());
        assert!(xi_moments(&r, &DVector::from_vec(vec![1.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn beta_without_data_is_prior() {
        let prior = BetaPrior { mean: 3.0, variance: 0.25 };
        let x = [DMatrix::zeros(0, 2)];
        let v = [DVector::zeros(0)];
        let y = [DVector::zeros(0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let mut sum = DVector::zeros(2);
        let mut sq = 0.0;
        for _ in 0..n {
            let b = &sample_beta(&x, &v, &y, &prior, BetaMode::Shared, &mut rng).unwrap()[0];
            sum += b;
            sq += (b[0] - 3.0).powi(2);
        }
        sum /= n as f64;
        assert!((sum[0] - 3.0).abs() < 0.02 && (sum[1] - 3.0).abs() < 0.02);
        assert!((sq / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn vague_beta_recovers_shifted_data() {
        let y = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let (xtvx, xtvy) =
            weighted_cross_products(&DMatrix::identity(3, 3), &DVector::from_element(3, 0.01), &y).unwrap();
        let (b, precision) = beta_posterior(&xtvx, &xtvy, &BetaPrior::default());
        let mean = precision.cholesky().unwrap().solve(&b);
        assert!((mean - y).amax() < 1e-10);
    }

    #[test]
    fn shared_mode_adds_information() {
        let x = dmatrix![1.0, 0.2; 1.0, -0.4; 1.0, 1.3];
        let v = DVector::from_vec(vec![0.5, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let (a1, _) = weighted_cross_products(&x, &v, &y).unwrap();
        let prior = BetaPrior { mean: 0.0, variance: f64::INFINITY };
        let (_, single) = beta_posterior(&a1, &DVector::zeros(2), &prior);
        let (_, double) = beta_posterior(&(&a1 + &a1), &DVector::zeros(2), &prior);
        assert_eq!(double, single * 2.0);
    }

    #[test]
    fn per_time_returns_one_draw_per_slice() {
        let x = vec![DMatrix::from_element(2, 1, 1.0); 3];
        let v = vec![DVector::from_element(2, 1.0); 3];
        let y = vec![DVector::from_element(2, 1.0); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = sample_beta(&x, &v, &y, &BetaPrior::default(), BetaMode::PerTime, &mut rng).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn sigma_k_plug_in() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let shapes = ShapeInverses::new(&one, &[one.clone()]).unwrap();
        let eta = [DVector::from_vec(vec![1.0]), DVector::from_vec(vec![1.0])];
        let ig = sigma_k_conditional(&eta, &shapes, &[one.clone()], &InverseGamma::default()).unwrap();
        assert_eq!(ig, InverseGamma::new(3.0, 1.5));

        let r = 3;
        let t = 4;
        let k = DMatrix::<f64>::identity(r, r);
        let shapes = ShapeInverses::new(&k, &vec![k.clone(); t - 1]).unwrap();
        let eta = vec![DVector::zeros(r); t];
        let ig = sigma_k_conditional(&eta, &shapes, &vec![k.clone(); t - 1], &InverseGamma::default()).unwrap();
        assert_eq!(ig, InverseGamma::new((t * r) as f64 / 2.0 + 2.0, 1.0));
    }

    #[test]
    fn sigma_k_zero_innovation_contributes_nothing() {
        let k = DMatrix::<f64>::identity(2, 2) * 4.0;
        let shapes = ShapeInverses::new(&k, &[DMatrix::zeros(2, 2)]).unwrap();
        assert_eq!(shapes.dof(), 2);
        let eta = [DVector::from_vec(vec![2.0, 0.0]), DVector::from_vec(vec![2.0, 0.0])];
        let ig = sigma_k_conditional(&eta, &shapes, &[DMatrix::identity(2, 2)], &InverseGamma::default()).unwrap();
        assert_eq!(ig, InverseGamma::new(3.0, 1.5));
    }

    #[test]
    fn sigma_xi_plug_in() {
        let prior = InverseGamma::default();
        assert_eq!(sigma_xi_conditional(&DVector::zeros(6), &prior), InverseGamma::new(5.0, 1.0));
        assert_eq!(
            sigma_xi_conditional(&DVector::from_vec(vec![1.0, 1.0]), &prior),
            InverseGamma::new(3.0, 2.0)
        );
    }

    #[test]
    fn inverse_gamma_mean() {
        let ig = InverseGamma::new(3.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += ig.sample(&mut rng).unwrap();
        }
        // sd of IG(3, 2) is 1, so the MC error is 1/√n
        assert!((sum / n as f64 - 1.0).abs() < 4.0 / (n as f64).sqrt());
        assert!(InverseGamma::new(0.0, 1.0).sample(&mut rng).is_err());
    }

    #[test]
    fn delta_plug_in() {
        let prior = InverseGamma::default();
        assert_eq!(delta_conditional(&[2.0], &[1.0], &prior).unwrap(), InverseGamma::new(2.5, 3.0));
        assert_eq!(
            delta_conditional(&[0.0; 4], &[1.0; 4], &prior).unwrap(),
            InverseGamma::new(4.0, 1.0)
        );
        assert!(delta_conditional(&[1.0], &[0.0], &prior).is_err());
    }
}
