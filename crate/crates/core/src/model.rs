//! Binding data, supports, bases, propagators and priors into a fit, plus
//! prediction and fixed-effect contrasts.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{available_rank, mi_basis, MiBasis};
use crate::error::{MstmError, Result};
use crate::graph::{block_adjacency, car_target_precision, AdjacencyGraph, Cell, Coupling, MultivariateSupport};
use crate::linalg::{column_rank, frobenius};
use crate::prior::{k_star, PriorShapes};
use crate::propagator::{build_b, mi_propagator, PropagatorMode};
use crate::sampler::conditionals::{BetaMode, ShapeInverses};
use crate::sampler::gibbs::{gibbs_run, Hyperparameters, McmcConfig, PosteriorDraws, SamplerModel, TimeSlice};

/// One observed cell value; indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: usize,
    pub cell: Cell,
    pub value: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationTable {
    pub rows: Vec<Observation>,
}

impl ObservationTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows sorted by (time, variable, unit).
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by_key(|r| (r.time, r.cell));
        self
    }

    /// Sample variance of all values.
    pub fn value_variance(&self) -> f64 {
        let n = self.rows.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.rows.iter().map(|r| r.value).sum::<f64>() / n;
        self.rows.iter().map(|r| (r.value - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    /// Restrict to the observed cells of `support`.
    pub fn restrict_to_observed(&self, support: &MultivariateSupport) -> Self {
        ObservationTable {
            rows: self
                .rows
                .iter()
                .filter(|r| {
                    r.time < support.n_times()
                        && support
                            .time(r.time)
                            .position(r.cell)
                            .is_some_and(|k| support.time(r.time).is_observed(k))
                })
                .copied()
                .collect(),
        }
    }

    /// Map keyed by (time, cell).
    pub fn index(&self) -> HashMap<(usize, Cell), &Observation> {
        self.rows.iter().map(|r| ((r.time, r.cell), r)).collect()
    }
}

/// Cell-keyed named covariate values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub values: HashMap<(usize, Cell), Vec<f64>>,
}

impl CovariateTable {
    fn column(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MstmError::Config(format!("covariate column `{name}` not found")))
    }
}

/// Declarative description of the design matrix `X_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSpec {
    pub intercept: bool,
    /// One indicator per variable (the first is dropped when an intercept is present).
    pub variable_indicators: bool,
    /// Named columns entered as-is.
    pub columns: Vec<String>,
    /// Named columns interacted with every variable indicator.
    pub interactions: Vec<String>,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec {
            intercept: true,
            variable_indicators: false,
            columns: Vec::new(),
            interactions: Vec::new(),
        }
    }
}

impl CovariateSpec {
    pub fn column_names(&self, n_variables: usize) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("intercept".to_string());
        }
        if self.variable_indicators {
            let first = usize::from(self.intercept);
            names.extend((first..n_variables).map(|l| format!("variable{}", l + 1)));
        }
        names.extend(self.columns.iter().cloned());
        for c in &self.interactions {
            names.extend((0..n_variables).map(|l| format!("{c}:variable{}", l + 1)));
        }
        names
    }

    /// `X_t` over the given cells (rows aligned with `cells`).
    pub fn design(
        &self,
        t: usize,
        cells: &[Cell],
        n_variables: usize,
        table: Option<&CovariateTable>,
    ) -> Result<DMatrix<f64>> {
        let p = self.column_names(n_variables).len();
        let needs_table = !self.columns.is_empty() || !self.interactions.is_empty();
        let table = match (needs_table, table) {
            (true, None) => {
                return Err(MstmError::Config("named covariates requested but no covariate table given".into()))
            }
            (_, t) => t,
        };
        let named: Vec<usize> = match table {
            Some(tab) if needs_table => self.columns.iter().map(|c| tab.column(c)).collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let inter: Vec<usize> = match table {
            Some(tab) if needs_table => self.interactions.iter().map(|c| tab.column(c)).collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let mut x = DMatrix::zeros(cells.len(), p);
        for (i, cell) in cells.iter().enumerate() {
            let mut j = 0;
            if self.intercept {
                x[(i, j)] = 1.0;
                j += 1;
            }
            if self.variable_indicators {
                for l in usize::from(self.intercept)..n_variables {
                    x[(i, j)] = f64::from(u8::from(cell.variable == l));
                    j += 1;
                }
            }
            if needs_table {
                let row = table.and_then(|tab| tab.values.get(&(t, *cell))).ok_or_else(|| {
                    MstmError::Invalid(format!(
                        "no covariates for variable {}, time {}, unit index {}",
                        cell.variable + 1,
                        t + 1,
                        cell.unit
                    ))
                })?;
                for &k in &named {
                    x[(i, j)] = row[k];
                    j += 1;
                }
                for &k in &inter {
                    for l in 0..n_variables {
                        x[(i, j)] = if cell.variable == l { row[k] } else { 0.0 };
                        j += 1;
                    }
                }
            }
        }
        Ok(x)
    }
}

/// How measurement variances are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum VarianceSpec {
    /// Per-observation variances from the observation table.
    Known,
    /// A single value for every observation.
    Constant { value: f64 },
    /// `v = ṽ·δ^(g)`, with `ṽ` the table variance (divided by `exp(2z)` when
    /// `delta_method` is set) and `g` the group of the observation's variable.
    Reweighted {
        /// Group (1 or 2) of each variable, in variable order.
        groups: Vec<usize>,
        #[serde(default)]
        delta_method: bool,
    },
}

impl Default for VarianceSpec {
    fn default() -> Self {
        VarianceSpec::Known
    }
}

/// Target precision used for the prior shapes.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PriorTarget {
    /// `Q_t = I − A_t`.
    #[default]
    Car,
    /// One user-supplied symmetric `N_t × N_t` matrix per time point.
    Explicit(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub rank: usize,
    pub coupling: Coupling,
    pub propagator: PropagatorMode,
    pub prior_target: PriorTarget,
    pub beta_mode: BetaMode,
    pub variance: VarianceSpec,
    pub hyper: Hyperparameters,
    pub covariates: CovariateSpec,
}

impl ModelConfig {
    pub fn with_rank(rank: usize) -> Self {
        ModelConfig {
            rank,
            coupling: Coupling::default(),
            propagator: PropagatorMode::default(),
            prior_target: PriorTarget::default(),
            beta_mode: BetaMode::default(),
            variance: VarianceSpec::default(),
            hyper: Hyperparameters::default(),
            covariates: CovariateSpec::default(),
        }
    }
}

/// How often each cached construction was computed or reused.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub basis_computations: usize,
    pub basis_hits: usize,
    pub propagator_computations: usize,
    pub propagator_hits: usize,
    pub prior_computations: usize,
    pub prior_hits: usize,
}

/// Data-independent model structure on the prediction support.
#[derive(Debug, Clone)]
pub struct Structure {
    pub support: MultivariateSupport,
    pub config: ModelConfig,
    pub covariate_names: Vec<String>,
    /// `X_t` over all prediction cells.
    pub designs: Vec<DMatrix<f64>>,
    pub bases: Vec<Arc<MiBasis>>,
    /// `propagators[t − 1]` is the transition into time `t`.
    pub propagators: Vec<DMatrix<f64>>,
    pub shapes: PriorShapes,
    pub cache: CacheStats,
    pub rank_deficient_times: Vec<usize>,
}

fn digest_cells_and_design(cells: &[Cell], x: &DMatrix<f64>) -> [u8; 32] {
    let mut h = Sha256::new();
    for c in cells {
        h.update((c.variable as u64).to_le_bytes());
        h.update((c.unit as u64).to_le_bytes());
    }
    h.update((x.ncols() as u64).to_le_bytes());
    for v in x.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

fn digest_matrix(seed: &[u8; 32], m: &DMatrix<f64>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed);
    for v in m.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

impl Structure {
    /// Compute `X_t`, `A_t`, `S_t`, `M_t`, `K*_t` and `W*_t`, reusing results
    /// across time points with identical cells and design.
    pub fn build(
        graph: &AdjacencyGraph,
        support: &MultivariateSupport,
        config: &ModelConfig,
        covariates: Option<&CovariateTable>,
    ) -> Result<Self> {
        let t_len = support.n_times();
        if t_len == 0 {
            return Err(MstmError::Invalid("support has no time points".into()));
        }
        if let PriorTarget::Explicit(m) = &config.prior_target {
            if m.len() != t_len {
                return Err(MstmError::Config(format!(
                    "prior target has {} matrices for {} time points",
                    m.len(),
                    t_len
                )));
            }
        }
        let n_vars = support.n_variables();
        let covariate_names = config.covariates.column_names(n_vars);
        let mut cache = CacheStats::default();
        let mut designs = Vec::with_capacity(t_len);
        let mut bases: Vec<Arc<MiBasis>> = Vec::with_capacity(t_len);
        let mut keys = Vec::with_capacity(t_len);
        let mut basis_cache: HashMap<[u8; 32], (Arc<MiBasis>, DMatrix<f64>)> = HashMap::new();
        let mut rank_deficient_times = Vec::new();

        for t in 0..t_len {
            let cells = support.time(t).cells();
            let x = config.covariates.design(t, cells, n_vars, covariates)?;
            if column_rank(&x) < x.ncols() {
                log::warn!("time {}: design matrix is rank deficient", t + 1);
                rank_deficient_times.push(t);
            }
            let key = digest_cells_and_design(cells, &x);
            let basis = match basis_cache.get(&key) {
                Some((b, _)) => {
                    cache.basis_hits += 1;
                    b.clone()
                }
                None => {
                    cache.basis_computations += 1;
                    let a = block_adjacency(graph, support, t, config.coupling)?;
                    let bound = available_rank(&x);
                    if config.rank == 0 || config.rank > bound {
                        return Err(MstmError::RankTooLarge {
                            requested: config.rank,
                            bound,
                        });
                    }
                    let b = Arc::new(mi_basis(&x, &a, config.rank, cells.to_vec())?);
                    basis_cache.insert(key, (b.clone(), a));
                    b
                }
            };
            designs.push(x);
            bases.push(basis);
            keys.push(key);
        }

        let mut propagator_cache: HashMap<[u8; 32], DMatrix<f64>> = HashMap::new();
        let mut propagators = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 1..t_len {
            if let Some(m) = propagator_cache.get(&keys[t]) {
                cache.propagator_hits += 1;
                propagators.push(m.clone());
                continue;
            }
            cache.propagator_computations += 1;
            let b = build_b(&bases[t].s, &designs[t])?;
            let m = mi_propagator(&b, designs[t].ncols(), frobenius(&designs[t]), config.propagator)?;
            propagator_cache.insert(keys[t], m.clone());
            propagators.push(m);
        }

        let mut prior_cache: HashMap<[u8; 32], crate::prior::KStar> = HashMap::new();
        let mut k_stars = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let key = match &config.prior_target {
                PriorTarget::Car => keys[t],
                PriorTarget::Explicit(m) => digest_matrix(&keys[t], &m[t]),
            };
            if let Some(k) = prior_cache.get(&key) {
                cache.prior_hits += 1;
                k_stars.push(k.clone());
                continue;
            }
            cache.prior_computations += 1;
            let target = match &config.prior_target {
                PriorTarget::Car => car_target_precision(&basis_cache[&keys[t]].1),
                PriorTarget::Explicit(m) => m[t].clone(),
            };
            let k = k_star(&bases[t].s, &target)?;
            if k.floored > 0 {
                log::info!(
                    "time {}: {} prior eigenvalue(s) floored at {:e}",
                    t + 1,
                    k.floored,
                    k.floor
                );
            }
            prior_cache.insert(key, k.clone());
            k_stars.push(k);
        }
        let shapes = PriorShapes::from_parts(k_stars, &propagators)?;
        Ok(Structure {
            support: support.clone(),
            config: config.clone(),
            covariate_names,
            designs,
            bases,
            propagators,
            shapes,
            cache,
            rank_deficient_times,
        })
    }

    pub fn n_times(&self) -> usize {
        self.support.n_times()
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    /// Replace the observed/missing split while keeping every cached
    /// construction, which only depends on the prediction cells.
    pub fn with_support(&self, support: MultivariateSupport) -> Result<Self> {
        if support.n_times() != self.n_times()
            || (0..self.n_times()).any(|t| support.time(t).cells() != self.support.time(t).cells())
        {
            return Err(MstmError::Invalid("new support changes the prediction cells".into()));
        }
        let mut out = self.clone();
        out.support = support;
        Ok(out)
    }
}

/// Assembled model: structure plus observed data.
#[derive(Debug, Clone)]
pub struct Model {
    pub structure: Structure,
    pub sampler: SamplerModel,
}

impl Model {
    pub fn n_times(&self) -> usize {
        self.structure.n_times()
    }

    pub fn support(&self) -> &MultivariateSupport {
        &self.structure.support
    }

    /// Deviations from the textbook recursions and prior adjustments that
    /// actually occurred for this model.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sampler.slices.first().is_some_and(|s| s.n_obs() > 0) {
            out.push("first time point: prior followed by a measurement update".into());
        }
        if self.n_times() > 1 {
            out.push("smoother gain uses the transition into t+1".into());
        }
        for (t, w) in self.structure.shapes.w_star.iter().enumerate() {
            if w.lifted {
                out.push(format!("time {}: innovation shape lifted to the PSD cone", t + 2));
            }
        }
        for (t, k) in self.structure.shapes.k_star.iter().enumerate() {
            if k.floored > 0 {
                out.push(format!(
                    "time {}: {} prior eigenvalue(s) floored at {:e}",
                    t + 1,
                    k.floored,
                    k.floor
                ));
            }
        }
        if let Ok(inv) = ShapeInverses::new(&self.sampler.k_star_1, &self.sampler.w_star) {
            let full = self.rank() * self.n_times();
            if inv.dof() < full {
                out.push(format!(
                    "sigma_k2 shape uses {} rank degrees of freedom instead of {}",
                    inv.dof(),
                    full
                ));
            }
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.structure.rank()
    }
}

/// Bind observations to a structure. Every row must sit on an observed cell
/// and every observed cell needs exactly one row.
pub fn bind(structure: Structure, observations: &ObservationTable) -> Result<Model> {
    let support = &structure.support;
    let config = &structure.config;
    let t_len = support.n_times();
    let mut per_time: Vec<Vec<Option<&Observation>>> =
        (0..t_len).map(|t| vec![None; support.time(t).n_prediction()]).collect();
    for row in &observations.rows {
        let pos = (row.time < t_len)
            .then(|| support.time(row.time).position(row.cell))
            .flatten()
            .ok_or(MstmError::UnknownCell {
                variable: row.cell.variable,
                unit: row.cell.unit,
            })?;
        if !support.time(row.time).is_observed(pos) {
            return Err(MstmError::Invalid(format!(
                "observation for variable {}, time {}, unit index {} is not an observed cell",
                row.cell.variable + 1,
                row.time + 1,
                row.cell.unit
            )));
        }
        if per_time[row.time][pos].replace(row).is_some() {
            return Err(MstmError::Invalid(format!(
                "duplicate observation for variable {}, time {}, unit index {}",
                row.cell.variable + 1,
                row.time + 1,
                row.cell.unit
            )));
        }
        if !row.value.is_finite() {
            return Err(MstmError::Invalid(format!("non-finite value at time {}", row.time + 1)));
        }
        if let Some(v) = row.variance {
            if !(v > 0.0) {
                return Err(MstmError::Invalid(format!("variance {v} is not positive")));
            }
        }
    }
    if let VarianceSpec::Reweighted { groups, .. } = &config.variance {
        if groups.len() != support.n_variables() || groups.iter().any(|g| !(1..=2).contains(g)) {
            return Err(MstmError::Config(
                "variance.groups needs one entry (1 or 2) per variable".into(),
            ));
        }
    }

    let mut slices = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let ts = support.time(t);
        let obs = ts.observed_indices();
        let mut z = DVector::zeros(obs.len());
        let mut v = DVector::zeros(obs.len());
        let mut group = Vec::new();
        for (i, &k) in obs.iter().enumerate() {
            let row = per_time[t][k].ok_or_else(|| {
                let c = ts.cells()[k];
                MstmError::Invalid(format!(
                    "observed cell (variable {}, time {}, unit index {}) has no observation",
                    c.variable + 1,
                    t + 1,
                    c.unit
                ))
            })?;
            z[i] = row.value;
            let table_variance = || {
                row.variance.ok_or_else(|| {
                    MstmError::Invalid(format!(
                        "missing variance for variable {}, time {}, unit index {}",
                        row.cell.variable + 1,
                        t + 1,
                        row.cell.unit
                    ))
                })
            };
            v[i] = match &config.variance {
                VarianceSpec::Known => table_variance()?,
                VarianceSpec::Constant { value } => *value,
                VarianceSpec::Reweighted { groups, delta_method } => {
                    group.push(groups[row.cell.variable] - 1);
                    let base = table_variance()?;
                    if *delta_method {
                        base / (2.0 * row.value).exp()
                    } else {
                        base
                    }
                }
            };
            if !(v[i] > 0.0) || !v[i].is_finite() {
                return Err(MstmError::Invalid(format!("measurement variance {} is not usable", v[i])));
            }
        }
        slices.push(TimeSlice {
            s: structure.bases[t].rows(obs),
            x: DMatrix::from_fn(obs.len(), structure.designs[t].ncols(), |i, j| {
                structure.designs[t][(obs[i], j)]
            }),
            z,
            base_variance: v,
            group,
        });
    }
    let sampler = SamplerModel {
        slices,
        rank: config.rank,
        n_covariates: structure.covariate_names.len(),
        propagators: structure.propagators.clone(),
        k_star_1: structure.shapes.k(0).clone(),
        w_star: structure.shapes.w_star.iter().map(|w| w.matrix.clone()).collect(),
        hyper: config.hyper,
        beta_mode: config.beta_mode,
        reweighted: matches!(config.variance, VarianceSpec::Reweighted { .. }),
    };
    Ok(Model { structure, sampler })
}

/// Build the structure and bind the observations in one step.
pub fn assemble(
    graph: &AdjacencyGraph,
    support: &MultivariateSupport,
    observations: &ObservationTable,
    covariates: Option<&CovariateTable>,
    config: &ModelConfig,
) -> Result<Model> {
    bind(Structure::build(graph, support, config, covariates)?, observations)
}

/// Run the Gibbs sampler on an assembled model.
pub fn fit(model: &Model, mcmc: &McmcConfig) -> Result<Vec<PosteriorDraws>> {
    gibbs_run(&model.sampler, mcmc)
}

/// Posterior summary of `Y` at one prediction cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellPrediction {
    pub time: usize,
    pub cell: Cell,
    pub observed: bool,
    pub mean: f64,
    pub variance: f64,
    pub mu_mean: f64,
    pub signal_mean: f64,
    pub xi_mean: f64,
}

impl CellPrediction {
    /// Root mean squared prediction error, the posterior standard deviation.
    pub fn root_mspe(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Sorted by time, then cell.
    pub cells: Vec<CellPrediction>,
}

impl PredictionSet {
    pub fn get(&self, time: usize, cell: Cell) -> Option<&CellPrediction> {
        self.cells
            .binary_search_by(|p| (p.time, p.cell).cmp(&(time, cell)))
            .ok()
            .map(|k| &self.cells[k])
    }
}

/// rng stream for unobserved fine-scale draws at time `t` of `chain`.
fn prediction_rng(seed: u64, chain: usize, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 63) | ((chain as u64) << 32) | t as u64);
    rng
}

/// Posterior mean and variance of `Y = x′β + S′η + ξ` at every prediction
/// cell. Cells without an observation draw ξ from `N(0, σ_ξ,t²)` per draw.
pub fn predict(model: &Model, draws: &[PosteriorDraws]) -> Result<PredictionSet> {
    if draws.is_empty() || draws.iter().all(|d| d.n_draws() == 0) {
        return Err(MstmError::Invalid("prediction needs at least one draw".into()));
    }
    if let Some(d) = draws.iter().find(|d| !d.has_states()) {
        return Err(MstmError::Invalid(format!(
            "chain {} was run without storing state draws",
            d.chain
        )));
    }
    let st = &model.structure;
    let r = st.rank();
    for d in draws {
        if d.n_times != st.n_times() || d.rank != r || d.n_covariates != st.covariate_names.len() {
            return Err(MstmError::Dimension("draws do not belong to this model".into()));
        }
        for t in 0..st.n_times() {
            if d.xi_lengths[t] != st.support.time(t).n_observed() {
                return Err(MstmError::Dimension(format!("time {}: ξ draws do not match the support", t + 1)));
            }
        }
    }
    let per_time: Vec<Vec<CellPrediction>> = (0..st.n_times())
        .into_par_iter()
        .map(|t| {
            let ts = st.support.time(t);
            let n = ts.n_prediction();
            let x = &st.designs[t];
            let s = &st.bases[t].s;
            let obs_slot: Vec<Option<usize>> = {
                let mut slot = vec![None; n];
                for (i, &k) in ts.observed_indices().iter().enumerate() {
                    slot[k] = Some(i);
                }
                slot
            };
            let mut count = 0.0;
            let mut mean = vec![0.0; n];
            let mut m2 = vec![0.0; n];
            let mut mu_sum = vec![0.0; n];
            let mut sig_sum = vec![0.0; n];
            let mut xi_sum = vec![0.0; n];
            for d in draws {
                let mut rng = prediction_rng(d.seed, d.chain, t);
                for k in 0..d.n_draws() {
                    let beta = DVector::from_column_slice(d.beta_at(k, t));
                    let eta = DVector::from_column_slice(d.eta_at(k, t));
                    let mu = x * beta;
                    let signal = s * eta;
                    let xi_obs = d.xi_at(k, t);
                    let sd = d.sigma_xi2_at(k, t).sqrt();
                    count += 1.0;
                    for i in 0..n {
                        let xi = match obs_slot[i] {
                            Some(j) => xi_obs[j],
                            None => sd * rng.sample::<f64, _>(StandardNormal),
                        };
                        let y = mu[i] + signal[i] + xi;
                        let delta = y - mean[i];
                        mean[i] += delta / count;
                        m2[i] += delta * (y - mean[i]);
                        mu_sum[i] += mu[i];
                        sig_sum[i] += signal[i];
                        xi_sum[i] += xi;
                    }
                }
            }
            (0..n)
                .map(|i| CellPrediction {
                    time: t,
                    cell: ts.cells()[i],
                    observed: obs_slot[i].is_some(),
                    mean: mean[i],
                    variance: if count > 1.0 { m2[i] / (count - 1.0) } else { 0.0 },
                    mu_mean: mu_sum[i] / count,
                    signal_mean: sig_sum[i] / count,
                    xi_mean: xi_sum[i] / count,
                })
                .collect()
        })
        .collect();
    Ok(PredictionSet {
        cells: per_time.into_iter().flatten().collect(),
    })
}

/// Posterior summary of a linear contrast of the fixed-effect surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContrastSummary {
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
    pub draws: usize,
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarize `Σ w·x′β` over all draws. Weights are keyed by (time, cell).
pub fn contrast(model: &Model, draws: &[PosteriorDraws], weights: &[((usize, Cell), f64)]) -> Result<ContrastSummary> {
    if weights.is_empty() {
        return Err(MstmError::Invalid("contrast needs at least one weight".into()));
    }
    let st = &model.structure;
    let rows = weights
        .iter()
        .map(|&((t, cell), w)| {
            let pos = (t < st.n_times())
                .then(|| st.support.time(t).position(cell))
                .flatten()
                .ok_or(MstmError::UnknownCell {
                    variable: cell.variable,
                    unit: cell.unit,
                })?;
            Ok((t, st.designs[t].row(pos).transpose() * w))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::new();
    for d in draws {
        for k in 0..d.n_draws() {
            let v: f64 = rows
                .iter()
                .map(|(t, xw)| xw.iter().zip(d.beta_at(k, *t)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(MstmError::Invalid("contrast needs at least one draw".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    values.sort_by(f64::total_cmp);
    Ok(ContrastSummary {
        mean,
        variance,
        lower: quantile_sorted(&values, 0.025),
        upper: quantile_sorted(&values, 0.975),
        draws: values.len(),
    })
}
