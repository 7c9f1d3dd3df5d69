//! Forward filtering and backward sampling for the latent VAR(1) coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MstmError, Result};
use crate::linalg::{covariance_factor, max_abs, pinv_symmetric, symmetrize};

/// Filter output for `t = 1..T` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanMoments {
    pub filtered_mean: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    /// For `t = 0` this is the prior `N(0, K_1)`.
    pub predicted_mean: Vec<DVector<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
}

impl KalmanMoments {
    pub fn n_times(&self) -> usize {
        self.filtered_mean.len()
    }
}

/// One draw of `η_{1:T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub eta: Vec<DVector<f64>>,
}

/// Observation information for one time point: `S′V⁻¹S` and `S′V⁻¹z̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct Information {
    pub precision: DMatrix<f64>,
    pub score: DVector<f64>,
}

impl Information {
    pub fn none(r: usize) -> Self {
        Information {
            precision: DMatrix::zeros(r, r),
            score: DVector::zeros(r),
        }
    }

    /// From observed basis rows, diagonal variances and shifted data.
    pub fn from_rows(s: &DMatrix<f64>, v: &DVector<f64>, z: &DVector<f64>) -> Result<Self> {
        if s.nrows() != v.len() || z.len() != v.len() {
            return Err(MstmError::Dimension(format!(
                "S has {} rows, V has {}, z has {}",
                s.nrows(),
                v.len(),
                z.len()
            )));
        }
        if let Some(bad) = v.iter().find(|x| !(**x > 0.0)) {
            return Err(MstmError::Invalid(format!("measurement variance {bad} is not positive")));
        }
        let inv = v.map(|x| 1.0 / x);
        let weighted = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] * inv[i]);
        Ok(Information {
            precision: symmetrize(&(s.transpose() * &weighted)),
            score: weighted.transpose() * z,
        })
    }
}

/// Kalman filter from per-time observation information.
///
/// `m[t − 1]` and `w[t − 1]` are the transition and innovation covariance
/// into time `t`. The first time point uses `N(0, k1)` as its prior and is
/// then updated with its own data.
pub fn kalman_filter_information(
    info: &[Information],
    m: &[DMatrix<f64>],
    w: &[DMatrix<f64>],
    k1: &DMatrix<f64>,
) -> Result<KalmanMoments> {
    let t_len = info.len();
    let r = k1.nrows();
    if t_len == 0 || m.len() + 1 != t_len || w.len() + 1 != t_len {
        return Err(MstmError::Dimension(format!(
            "filter over {} times needs {} transitions, got {} and {}",
            t_len,
            t_len.saturating_sub(1),
            m.len(),
            w.len()
        )));
    }
    let mut out = KalmanMoments {
        filtered_mean: Vec::with_capacity(t_len),
        filtered_cov: Vec::with_capacity(t_len),
        predicted_mean: Vec::with_capacity(t_len),
        predicted_cov: Vec::with_capacity(t_len),
    };
    for t in 0..t_len {
        let (mean_pred, cov_pred) = if t == 0 {
            (DVector::zeros(r), symmetrize(k1))
        } else {
            let prev_m = &out.filtered_mean[t - 1];
            let prev_p = &out.filtered_cov[t - 1];
            let mt = &m[t - 1];
            (mt * prev_m, symmetrize(&(mt * prev_p * mt.transpose() + &w[t - 1])))
        };
        let (mean, cov) = update(&mean_pred, &cov_pred, &info[t]).ok_or_else(|| MstmError::NotPositiveDefinite {
            t: t + 1,
            what: "innovation covariance".into(),
        })?;
        out.predicted_mean.push(mean_pred);
        out.predicted_cov.push(cov_pred);
        out.filtered_mean.push(mean);
        out.filtered_cov.push(cov);
    }
    Ok(out)
}

fn update(mean: &DVector<f64>, cov: &DMatrix<f64>, info: &Information) -> Option<(DVector<f64>, DMatrix<f64>)> {
    if max_abs(&info.precision) == 0.0 && info.score.iter().all(|x| *x == 0.0) {
        return Some((mean.clone(), cov.clone()));
    }
    if let Some(chol) = cov.clone().cholesky() {
        let prior_precision = chol.inverse();
        let post = (prior_precision + &info.precision).cholesky()?;
        let new_mean = post.solve(&(chol.solve(mean) + &info.score));
        let new_cov = symmetrize(&post.inverse());
        return finite(new_mean, new_cov);
    }
    // Singular prior covariance: P⁺ = (I + P·I_obs)⁻¹ P.
    let r = cov.nrows();
    let lu = (DMatrix::<f64>::identity(r, r) + cov * &info.precision).lu();
    let new_cov = symmetrize(&lu.solve(cov)?);
    let new_mean = mean + &new_cov * (&info.score - &info.precision * mean);
    finite(new_mean, new_cov)
}

fn finite(mean: DVector<f64>, cov: DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    (mean.iter().all(|x| x.is_finite()) && cov.iter().all(|x| x.is_finite())).then_some((mean, cov))
}

/// Kalman filter on shifted measurements `z̃_t = z_t − X_tβ − ξ_t`.
///
/// `s[t]` holds the basis rows of the observed cells at `t`, `v[t]` their
/// measurement variances.
pub fn kalman_filter(
    z: &[DVector<f64>],
    s: &[DMatrix<f64>],
    v: &[DVector<f64>],
    m: &[DMatrix<f64>],
    w: &[DMatrix<f64>],
    k1: &DMatrix<f64>,
) -> Result<KalmanMoments> {
    if z.len() != s.len() || z.len() != v.len() {
        return Err(MstmError::Dimension("z, S and V must cover the same times".into()));
    }
    let info = z
        .iter()
        .zip(s)
        .zip(v)
        .map(|((z, s), v)| {
            if z.is_empty() {
                Ok(Information::none(k1.nrows()))
            } else {
                Information::from_rows(s, v, z)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    kalman_filter_information(&info, m, w, k1)
}

/// Result of a backward pass, with the number of pseudo-inverse fallbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardDraw {
    pub trajectory: StateTrajectory,
    pub pseudo_inverses: usize,
}

/// Draw `η_{1:T}` from its joint conditional given the filter moments.
///
/// The gain uses the transition into `t + 1`:
/// `J_t = P_{t|t} M_{t+1}′ P_{t+1|t}⁻¹`.
/// Smoother gain `J_t = P_{t|t} M′ P_{t+1|t}⁻¹`, with a pseudo-inverse when
/// the predicted covariance is singular (second value true).
fn smoother_gain(moments: &KalmanMoments, m: &[DMatrix<f64>], t: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, bool)> {
    let p = &moments.filtered_cov[t];
    let p_next = &moments.predicted_cov[t + 1];
    let cross = &m[t] * p; // M_{t+1} P_{t|t}
    Ok(match p_next.clone().cholesky() {
        Some(chol) => (chol.solve(&cross).transpose(), cross, false),
        None => {
            log::warn!("time {}: predicted covariance is singular, using a pseudo-inverse", t + 2);
            let (pinv, _) = pinv_symmetric(&symmetrize(p_next))?;
            ((pinv * &cross).transpose(), cross, true)
        }
    })
}

fn check_transitions(moments: &KalmanMoments, m: &[DMatrix<f64>]) -> Result<usize> {
    let t_len = moments.n_times();
    if t_len == 0 || m.len() + 1 != t_len {
        return Err(MstmError::Dimension("backward pass needs T − 1 transitions".into()));
    }
    Ok(t_len)
}

/// Draw `η_{1:T}` from its joint conditional given the filtered moments.
pub fn backward_sample(moments: &KalmanMoments, m: &[DMatrix<f64>], rng: &mut impl Rng) -> Result<BackwardDraw> {
    let t_len = check_transitions(moments, m)?;
    let mut eta = vec![DVector::zeros(0); t_len];
    let mut pseudo_inverses = 0;
    let last = t_len - 1;
    eta[last] = draw(&moments.filtered_mean[last], &moments.filtered_cov[last], rng);
    for t in (0..last).rev() {
        let (jt, cross, pinv) = smoother_gain(moments, m, t)?;
        pseudo_inverses += usize::from(pinv);
        let mean = &moments.filtered_mean[t] + &jt * (&eta[t + 1] - &moments.predicted_mean[t + 1]);
        let cov = symmetrize(&(&moments.filtered_cov[t] - &jt * &cross));
        eta[t] = draw(&mean, &cov, rng);
    }
    Ok(BackwardDraw {
        trajectory: StateTrajectory { eta },
        pseudo_inverses,
    })
}

/// Smoothed means and covariances of `η_t` given all data.
pub fn rts_smoother(moments: &KalmanMoments, m: &[DMatrix<f64>]) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let t_len = check_transitions(moments, m)?;
    let mut means = moments.filtered_mean.clone();
    let mut covs = moments.filtered_cov.clone();
    for t in (0..t_len - 1).rev() {
        let (jt, _, _) = smoother_gain(moments, m, t)?;
        means[t] = &moments.filtered_mean[t] + &jt * (&means[t + 1] - &moments.predicted_mean[t + 1]);
        covs[t] = symmetrize(
            &(&moments.filtered_cov[t] + &jt * (&covs[t + 1] - &moments.predicted_cov[t + 1]) * jt.transpose()),
        );
    }
    Ok((means, covs))
}

fn draw(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut impl Rng) -> DVector<f64> {
    let r = mean.len();
    let noise = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = max_abs(cov);
    if scale == 0.0 {
        return mean.clone();
    }
    mean + covariance_factor(cov) * noise
}
