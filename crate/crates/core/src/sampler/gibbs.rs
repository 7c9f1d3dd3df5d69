//! The Gibbs sweep and multi-chain driver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conditionals::{
    beta_posterior, delta_conditional, sample_canonical, sample_xi, sigma_k_conditional, sigma_xi_conditional,
    weighted_cross_products, BetaMode, BetaPrior, InverseGamma, ShapeInverses,
};
use super::kalman::{backward_sample, kalman_filter_information, Information};
use crate::error::{MstmError, Result};

/// Observed data and design for one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    /// Basis rows of the observed cells, `n_t × r`.
    pub s: DMatrix<f64>,
    /// Covariate rows of the observed cells, `n_t × p`.
    pub x: DMatrix<f64>,
    pub z: DVector<f64>,
    /// Known variances, or the base variances scaled by δ when reweighting.
    pub base_variance: DVector<f64>,
    /// Reweighting group (0 or 1) of each observation.
    pub group: Vec<usize>,
}

impl TimeSlice {
    pub fn n_obs(&self) -> usize {
        self.z.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub sigma_k: InverseGamma,
    pub sigma_xi: InverseGamma,
    pub delta: InverseGamma,
    pub beta: BetaPrior,
}

/// Everything the sampler needs; built once and shared read-only by chains.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerModel {
    pub slices: Vec<TimeSlice>,
    pub rank: usize,
    pub n_covariates: usize,
    /// `propagators[t − 1]` is the transition into time `t`.
    pub propagators: Vec<DMatrix<f64>>,
    pub k_star_1: DMatrix<f64>,
    /// `w_star[t − 1]` is the innovation shape into time `t`.
    pub w_star: Vec<DMatrix<f64>>,
    pub hyper: Hyperparameters,
    pub beta_mode: BetaMode,
    pub reweighted: bool,
}

impl SamplerModel {
    pub fn n_times(&self) -> usize {
        self.slices.len()
    }

    fn validate(&self) -> Result<()> {
        let t_len = self.n_times();
        if t_len == 0 {
            return Err(MstmError::Invalid("model has no time points".into()));
        }
        if self.propagators.len() + 1 != t_len || self.w_star.len() + 1 != t_len {
            return Err(MstmError::Dimension("need T − 1 propagators and innovation shapes".into()));
        }
        for (t, sl) in self.slices.iter().enumerate() {
            let n = sl.n_obs();
            if sl.s.shape() != (n, self.rank)
                || sl.x.shape() != (n, self.n_covariates)
                || sl.base_variance.len() != n
                || (self.reweighted && sl.group.len() != n)
            {
                return Err(MstmError::Dimension(format!("time {}: observed blocks disagree", t + 1)));
            }
            if self.reweighted && sl.group.iter().any(|&g| g > 1) {
                return Err(MstmError::Invalid("reweighting groups must be 0 or 1".into()));
            }
            if let Some(v) = sl.base_variance.iter().find(|v| !(**v > 0.0)) {
                return Err(MstmError::Invalid(format!("time {}: variance {v} is not positive", t + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub seed: u64,
    /// Keep η and ξ draws (needed for prediction).
    pub store_states: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 10_000,
            burn_in: 1_000,
            chains: 3,
            seed: 0,
            store_states: true,
        }
    }
}

/// Current values of every sampled quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub eta: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    /// One vector in shared mode, `T` in per-time mode.
    pub beta: Vec<DVector<f64>>,
    pub sigma_k2: f64,
    pub sigma_xi2: Vec<f64>,
    pub delta: [f64; 2],
}

impl GibbsState {
    fn beta_at(&self, t: usize) -> &DVector<f64> {
        if self.beta.len() == 1 {
            &self.beta[0]
        } else {
            &self.beta[t]
        }
    }
}

/// Retained draws of one chain, stored draw-major in flat arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub chain: usize,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub n_times: usize,
    pub rank: usize,
    pub n_covariates: usize,
    pub beta_per_time: bool,
    pub reweighted: bool,
    pub xi_lengths: Vec<usize>,
    pub beta: Vec<f64>,
    pub sigma_k2: Vec<f64>,
    pub sigma_xi2: Vec<f64>,
    pub delta: Vec<f64>,
    /// Empty unless states were stored.
    pub eta: Vec<f64>,
    pub xi: Vec<f64>,
    /// Backward steps that needed a pseudo-inverse.
    pub pseudo_inverses: usize,
}

impl PosteriorDraws {
    fn new(model: &SamplerModel, cfg: &McmcConfig, chain: usize) -> Self {
        PosteriorDraws {
            chain,
            seed: cfg.seed,
            iterations: cfg.iterations,
            burn_in: cfg.burn_in,
            n_times: model.n_times(),
            rank: model.rank,
            n_covariates: model.n_covariates,
            beta_per_time: model.beta_mode == BetaMode::PerTime,
            reweighted: model.reweighted,
            xi_lengths: model.slices.iter().map(|s| s.n_obs()).collect(),
            beta: Vec::new(),
            sigma_k2: Vec::new(),
            sigma_xi2: Vec::new(),
            delta: Vec::new(),
            eta: Vec::new(),
            xi: Vec::new(),
            pseudo_inverses: 0,
        }
    }

    pub fn n_draws(&self) -> usize {
        self.sigma_k2.len()
    }

    pub fn has_states(&self) -> bool {
        !self.eta.is_empty() || self.n_draws() == 0
    }

    pub fn beta_width(&self) -> usize {
        if self.beta_per_time {
            self.n_times * self.n_covariates
        } else {
            self.n_covariates
        }
    }

    /// β in effect at time `t` for draw `d`.
    pub fn beta_at(&self, d: usize, t: usize) -> &[f64] {
        let p = self.n_covariates;
        let offset = d * self.beta_width() + if self.beta_per_time { t * p } else { 0 };
        &self.beta[offset..offset + p]
    }

    pub fn sigma_xi2_at(&self, d: usize, t: usize) -> f64 {
        self.sigma_xi2[d * self.n_times + t]
    }

    pub fn delta_at(&self, d: usize) -> [f64; 2] {
        [self.delta[2 * d], self.delta[2 * d + 1]]
    }

    pub fn eta_at(&self, d: usize, t: usize) -> &[f64] {
        let r = self.rank;
        let offset = (d * self.n_times + t) * r;
        &self.eta[offset..offset + r]
    }

    pub fn xi_at(&self, d: usize, t: usize) -> &[f64] {
        let width: usize = self.xi_lengths.iter().sum();
        let start = d * width + self.xi_lengths[..t].iter().sum::<usize>();
        &self.xi[start..start + self.xi_lengths[t]]
    }

    /// Scalar series by name: `sigma_k2`, `sigma_xi2[t]`, `beta[j]`
    /// (per-time: `beta[t,j]`), `delta[k]`; indices 0-based.
    pub fn scalar_series(&self) -> Vec<(String, Vec<f64>)> {
        let n = self.n_draws();
        let mut out = vec![("sigma_k2".to_string(), self.sigma_k2.clone())];
        for t in 0..self.n_times {
            out.push((
                format!("sigma_xi2[{t}]"),
                (0..n).map(|d| self.sigma_xi2_at(d, t)).collect(),
            ));
        }
        let width = self.beta_width();
        for j in 0..width {
            let name = if self.beta_per_time {
                format!("beta[{},{}]", j / self.n_covariates, j % self.n_covariates)
            } else {
                format!("beta[{j}]")
            };
            out.push((name, (0..n).map(|d| self.beta[d * width + j]).collect()));
        }
        if self.reweighted {
            for k in 0..2 {
                out.push((format!("delta[{k}]"), (0..n).map(|d| self.delta[2 * d + k]).collect()));
            }
        }
        out
    }

    fn record(&mut self, state: &GibbsState, store_states: bool) {
        for b in &state.beta {
            self.beta.extend(b.iter());
        }
        self.sigma_k2.push(state.sigma_k2);
        self.sigma_xi2.extend(&state.sigma_xi2);
        if self.reweighted {
            self.delta.extend(state.delta);
        }
        if store_states {
            for e in &state.eta {
                self.eta.extend(e.iter());
            }
            for x in &state.xi {
                self.xi.extend(x.iter());
            }
        }
    }
}

/// Per-chain rng: `seed` selects the key, the chain index the stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Run `cfg.chains` independent chains concurrently.
pub fn gibbs_run(model: &SamplerModel, cfg: &McmcConfig) -> Result<Vec<PosteriorDraws>> {
    if cfg.chains == 0 {
        return Err(MstmError::Config("mcmc.chains must be at least 1".into()));
    }
    if cfg.burn_in >= cfg.iterations {
        return Err(MstmError::Config(format!(
            "burn_in {} must be smaller than iterations {}",
            cfg.burn_in, cfg.iterations
        )));
    }
    model.validate()?;
    (0..cfg.chains)
        .into_par_iter()
        .map(|chain| run_chain(model, cfg, chain))
        .collect()
}

fn fail(iteration: usize, conditional: &'static str) -> impl Fn(MstmError) -> MstmError {
    move |e| MstmError::Sampler {
        iteration,
        conditional,
        message: e.to_string(),
    }
}

fn variances(model: &SamplerModel, delta: [f64; 2]) -> Vec<DVector<f64>> {
    model
        .slices
        .iter()
        .map(|sl| {
            if model.reweighted {
                DVector::from_fn(sl.n_obs(), |i, _| sl.base_variance[i] * delta[sl.group[i]])
            } else {
                sl.base_variance.clone()
            }
        })
        .collect()
}

struct Caches {
    v: Vec<DVector<f64>>,
    basis_precision: Vec<DMatrix<f64>>,
    design_precision: Vec<DMatrix<f64>>,
}

impl Caches {
    fn new(model: &SamplerModel, delta: [f64; 2]) -> Result<Self> {
        let v = variances(model, delta);
        let mut basis_precision = Vec::with_capacity(model.n_times());
        let mut design_precision = Vec::with_capacity(model.n_times());
        for (sl, v) in model.slices.iter().zip(&v) {
            let zeros = DVector::zeros(sl.n_obs());
            basis_precision.push(weighted_cross_products(&sl.s, v, &zeros)?.0);
            design_precision.push(weighted_cross_products(&sl.x, v, &zeros)?.0);
        }
        Ok(Caches {
            v,
            basis_precision,
            design_precision,
        })
    }
}

fn initial_state(model: &SamplerModel, caches: &Caches, rng: &mut ChaCha8Rng) -> Result<GibbsState> {
    let t_len = model.n_times();
    let p = model.n_covariates;
    let prior = &model.hyper.beta;
    // generalized least squares start for β
    let fit = |ts: &[usize]| -> Result<DVector<f64>> {
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for &t in ts {
            let sl = &model.slices[t];
            a += &caches.design_precision[t];
            b += weighted_cross_products(&sl.x, &caches.v[t], &sl.z)?.1;
        }
        let (b, precision) = beta_posterior(&a, &b, prior);
        precision
            .cholesky()
            .map(|c| c.solve(&b))
            .ok_or_else(|| MstmError::Invalid("β information matrix is not positive definite".into()))
    };
    let beta = match model.beta_mode {
        BetaMode::Shared => vec![fit(&(0..t_len).collect::<Vec<_>>())?],
        BetaMode::PerTime => (0..t_len).map(|t| fit(&[t])).collect::<Result<_>>()?,
    };
    let sigma_xi2 = (0..t_len)
        .map(|t| {
            let sl = &model.slices[t];
            let b = if beta.len() == 1 { &beta[0] } else { &beta[t] };
            let resid = &sl.z - &sl.x * b;
            let base = if sl.n_obs() > 0 {
                (resid.norm_squared() / sl.n_obs() as f64 / 2.0).max(1e-6)
            } else {
                1.0
            };
            // overdispersed start so that chains do not begin in lockstep
            base * rng.sample::<f64, _>(StandardNormal).exp()
        })
        .collect();
    Ok(GibbsState {
        eta: vec![DVector::zeros(model.rank); t_len],
        xi: model.slices.iter().map(|sl| DVector::zeros(sl.n_obs())).collect(),
        beta,
        sigma_k2: 1.0,
        sigma_xi2,
        delta: [1.0, 1.0],
    })
}

/// Run a single chain; bit-reproducible for a given `(seed, chain)`.
pub fn run_chain(model: &SamplerModel, cfg: &McmcConfig, chain: usize) -> Result<PosteriorDraws> {
    model.validate()?;
    let mut rng = chain_rng(cfg.seed, chain);
    let shapes = ShapeInverses::new(&model.k_star_1, &model.w_star)?;
    let mut caches = Caches::new(model, [1.0, 1.0])?;
    let mut state = initial_state(model, &caches, &mut rng)?;
    let mut draws = PosteriorDraws::new(model, cfg, chain);
    let t_len = model.n_times();
    let hyper = &model.hyper;

    for iter in 0..cfg.iterations {
        let it = iter + 1;

        // η | rest
        let info = (0..t_len)
            .map(|t| {
                let sl = &model.slices[t];
                let shifted = &sl.z - &sl.x * state.beta_at(t) - &state.xi[t];
                let weighted = shifted.component_div(&caches.v[t]);
                Information {
                    precision: caches.basis_precision[t].clone(),
                    score: sl.s.transpose() * weighted,
                }
            })
            .collect::<Vec<_>>();
        let k1 = &model.k_star_1 * state.sigma_k2;
        let w: Vec<DMatrix<f64>> = model.w_star.iter().map(|w| w * state.sigma_k2).collect();
        let moments = kalman_filter_information(&info, &model.propagators, &w, &k1).map_err(fail(it, "eta"))?;
        let back = backward_sample(&moments, &model.propagators, &mut rng).map_err(fail(it, "eta"))?;
        draws.pseudo_inverses += back.pseudo_inverses;
        state.eta = back.trajectory.eta;

        let signal: Vec<DVector<f64>> = (0..t_len).map(|t| &model.slices[t].s * &state.eta[t]).collect();

        // ξ | rest
        for t in 0..t_len {
            let sl = &model.slices[t];
            let resid = &sl.z - &sl.x * state.beta_at(t) - &signal[t];
            state.xi[t] = sample_xi(&resid, &caches.v[t], state.sigma_xi2[t], &mut rng).map_err(fail(it, "xi"))?;
        }

        // β | rest
        let scores: Vec<DVector<f64>> = (0..t_len)
            .map(|t| {
                let sl = &model.slices[t];
                let y = &sl.z - &state.xi[t] - &signal[t];
                sl.x.transpose() * y.component_div(&caches.v[t])
            })
            .collect();
        let singular = || MstmError::Invalid("β information matrix is not positive definite".into());
        state.beta = match model.beta_mode {
            BetaMode::Shared => {
                let p = model.n_covariates;
                let mut a = DMatrix::zeros(p, p);
                let mut b = DVector::zeros(p);
                for t in 0..t_len {
                    a += &caches.design_precision[t];
                    b += &scores[t];
                }
                let (b, precision) = beta_posterior(&a, &b, &hyper.beta);
                vec![sample_canonical(&b, &precision, &mut rng).ok_or_else(singular).map_err(fail(it, "beta"))?]
            }
            BetaMode::PerTime => (0..t_len)
                .map(|t| {
                    let (b, precision) = beta_posterior(&caches.design_precision[t], &scores[t], &hyper.beta);
                    sample_canonical(&b, &precision, &mut rng).ok_or_else(singular)
                })
                .collect::<Result<_>>()
                .map_err(fail(it, "beta"))?,
        };

        // σ_ξ,t² | rest
        for t in 0..t_len {
            state.sigma_xi2[t] = sigma_xi_conditional(&state.xi[t], &hyper.sigma_xi)
                .sample(&mut rng)
                .map_err(fail(it, "sigma_xi2"))?;
        }

        // σ_K² | rest
        state.sigma_k2 = sigma_k_conditional(&state.eta, &shapes, &model.propagators, &hyper.sigma_k)
            .and_then(|ig| ig.sample(&mut rng))
            .map_err(fail(it, "sigma_k2"))?;

        // δ | rest
        if model.reweighted {
            let mut resid: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            let mut base: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for t in 0..t_len {
                let sl = &model.slices[t];
                let e = &sl.z - &sl.x * state.beta_at(t) - &signal[t] - &state.xi[t];
                for i in 0..sl.n_obs() {
                    resid[sl.group[i]].push(e[i]);
                    base[sl.group[i]].push(sl.base_variance[i]);
                }
            }
            for k in 0..2 {
                state.delta[k] = delta_conditional(&resid[k], &base[k], &hyper.delta)
                    .and_then(|ig| ig.sample(&mut rng))
                    .map_err(fail(it, "delta"))?;
            }
            caches = Caches::new(model, state.delta).map_err(fail(it, "delta"))?;
        }

        if iter >= cfg.burn_in {
            draws.record(&state, cfg.store_states);
        }
    }
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, t_len: usize) -> SamplerModel {
        let r = 2;
        SamplerModel {
            slices: (0..t_len)
                .map(|t| TimeSlice {
                    s: DMatrix::from_fn(n, r, |i, j| ((i + 2 * j + t) % 3) as f64 - 1.0),
                    x: DMatrix::from_element(n, 1, 1.0),
                    z: DVector::from_fn(n, |i, _| 5.0 + (i as f64) * 0.1),
                    base_variance: DVector::from_element(n, 0.5),
                    group: (0..n).map(|i| i % 2).collect(),
                })
                .collect(),
            rank: r,
            n_covariates: 1,
            propagators: vec![DMatrix::identity(r, r); t_len - 1],
            k_star_1: DMatrix::identity(r, r),
            w_star: vec![DMatrix::identity(r, r) * 0.1; t_len - 1],
            hyper: Hyperparameters::default(),
            beta_mode: BetaMode::Shared,
            reweighted: false,
        }
    }

    #[test]
    fn retains_post_burn_in_draws() {
        let model = tiny(6, 3);
        let cfg = McmcConfig {
            iterations: 50,
            burn_in: 10,
            chains: 2,
            seed: 7,
            store_states: true,
        };
        let out = gibbs_run(&model, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for d in &out {
            assert_eq!(d.n_draws(), 40);
            assert_eq!(d.eta.len(), 40 * 3 * 2);
            assert_eq!(d.xi.len(), 40 * 18);
            assert_eq!(d.sigma_xi2.len(), 40 * 3);
            assert!(d.delta.is_empty());
        }
        assert_ne!(out[0].sigma_k2, out[1].sigma_k2);
    }

    #[test]
    fn chains_are_reproducible() {
        let mut model = tiny(5, 2);
        model.reweighted = true;
        model.beta_mode = BetaMode::PerTime;
        let cfg = McmcConfig {
            iterations: 30,
            burn_in: 5,
            chains: 1,
            seed: 99,
            store_states: true,
        };
        let a = run_chain(&model, &cfg, 0).unwrap();
        let b = run_chain(&model, &cfg, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.delta.len(), 50);
        assert_eq!(a.beta_width(), 2);
        let other = run_chain(&model, &McmcConfig { seed: 100, ..cfg }, 0).unwrap();
        assert_ne!(a.sigma_k2, other.sigma_k2);
    }

    #[test]
    fn rejects_bad_configs() {
        let model = tiny(4, 2);
        let cfg = McmcConfig {
            iterations: 10,
            burn_in: 10,
            ..McmcConfig::default()
        };
        assert!(gibbs_run(&model, &cfg).is_err());
        let mut bad = model.clone();
        bad.slices[1].base_variance[0] = -1.0;
        assert!(gibbs_run(&bad, &McmcConfig { iterations: 5, burn_in: 1, ..McmcConfig::default() }).is_err());
    }

    #[test]
    fn defaults_match_reference_run_length() {
        let d = McmcConfig::default();
        assert_eq!((d.iterations, d.burn_in, d.chains), (10_000, 1_000, 3));
    }

    #[test]
    fn scalar_series_names() {
        let model = tiny(4, 2);
        let cfg = McmcConfig {
            iterations: 4,
            burn_in: 1,
            chains: 1,
            seed: 1,
            store_states: false,
        };
        let d = run_chain(&model, &cfg, 0).unwrap();
        let names: Vec<String> = d.scalar_series().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["sigma_k2", "sigma_xi2[0]", "sigma_xi2[1]", "beta[0]"]);
        assert!(d.eta.is_empty() && !d.has_states());
    }
}
