//! Replicated simulate → perturb → mask → fit → score studies.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{median_iqr, mprd, stspe};
use crate::error::{MstmError, Result};
use crate::graph::{MultivariateSupport, SupportEntry};
use crate::linalg::covariance_factor;
use crate::model::{bind, fit, predict, Model, Observation, ObservationTable, Structure, VarianceSpec};
use crate::sampler::gibbs::McmcConfig;

/// Parameters of the generative model used to simulate a truth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfig {
    /// Fixed effects, one per design column.
    pub beta: Vec<f64>,
    /// Scale of the basis coefficients. Mutually exclusive with `signal_variance`.
    #[serde(default)]
    pub sigma_k2: Option<f64>,
    /// Average variance of `S′η` per cell at the first time point; sets σ_K².
    #[serde(default)]
    pub signal_variance: Option<f64>,
    pub sigma_xi2: f64,
    /// Variance of the noise separating the truth from the latent process.
    pub measurement_variance: f64,
}

impl GenerativeConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_xi2", self.sigma_xi2), ("measurement_variance", self.measurement_variance)] {
            if !(v >= 0.0) {
                return Err(MstmError::Config(format!("generative.{name} must be nonnegative")));
            }
        }
        if let Some(v) = self.sigma_k2.or(self.signal_variance) {
            if !(v >= 0.0) {
                return Err(MstmError::Config("generative signal scale must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// σ_K² implied by the configuration on this structure.
    pub fn resolve_sigma_k2(&self, structure: &Structure) -> Result<f64> {
        self.validate()?;
        match (self.sigma_k2, self.signal_variance) {
            (Some(s), None) => Ok(s),
            (None, Some(v)) => {
                let n = structure.support.time(0).n_prediction() as f64;
                let trace = structure.shapes.k(0).trace();
                Ok(if v == 0.0 { 0.0 } else { v * n / trace })
            }
            (None, None) => Err(MstmError::Config(
                "generative needs one of sigma_k2 or signal_variance".into(),
            )),
            (Some(_), Some(_)) => Err(MstmError::Config(
                "generative.sigma_k2 and generative.signal_variance are mutually exclusive".into(),
            )),
        }
    }
}

/// Every latent component of a simulated data set, over all prediction cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub sigma_k2: f64,
    pub eta: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub signal: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub noise: Vec<DVector<f64>>,
}

fn gaussian(cov: &DMatrix<f64>, rng: &mut impl Rng) -> DVector<f64> {
    let z = DVector::from_fn(cov.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    if cov.iter().all(|v| *v == 0.0) {
        return DVector::zeros(cov.nrows());
    }
    covariance_factor(cov) * z
}

fn white(n: usize, variance: f64, rng: &mut impl Rng) -> DVector<f64> {
    let sd = variance.sqrt();
    DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// Draw a truth table over every prediction cell from the generative model:
/// `η` follows the VAR(1) with the structure's propagators and prior shapes,
/// `Y = Xβ + S′η + ξ`, and the truth adds independent measurement noise.
/// The table records the measurement variance with each value.
pub fn simulate(structure: &Structure, gen: &GenerativeConfig, rng: &mut impl Rng) -> Result<(ObservationTable, LatentRecord)> {
    let sigma_k2 = gen.resolve_sigma_k2(structure)?;
    let p = structure.covariate_names.len();
    if gen.beta.len() != p {
        return Err(MstmError::Config(format!(
            "generative.beta has {} entries, the design has {} columns ({})",
            gen.beta.len(),
            p,
            structure.covariate_names.join(", ")
        )));
    }
    let beta = DVector::from_column_slice(&gen.beta);
    let t_len = structure.n_times();
    let mut rec = LatentRecord {
        sigma_k2,
        eta: Vec::with_capacity(t_len),
        mu: Vec::with_capacity(t_len),
        signal: Vec::with_capacity(t_len),
        xi: Vec::with_capacity(t_len),
        y: Vec::with_capacity(t_len),
        noise: Vec::with_capacity(t_len),
    };
    let mut rows = Vec::new();
    for t in 0..t_len {
        let eta = if t == 0 {
            gaussian(&(structure.shapes.k(0) * sigma_k2), rng)
        } else {
            &structure.propagators[t - 1] * &rec.eta[t - 1] + gaussian(&(structure.shapes.w(t) * sigma_k2), rng)
        };
        let cells = structure.support.time(t).cells();
        let n = cells.len();
        let mu = &structure.designs[t] * &beta;
        let signal = &structure.bases[t].s * &eta;
        let xi = white(n, gen.sigma_xi2, rng);
        let noise = white(n, gen.measurement_variance, rng);
        let y = &mu + &signal + &xi;
        for (i, cell) in cells.iter().enumerate() {
            rows.push(Observation {
                time: t,
                cell: *cell,
                value: y[i] + noise[i],
                variance: Some(gen.measurement_variance),
            });
        }
        rec.eta.push(eta);
        rec.mu.push(mu);
        rec.signal.push(signal);
        rec.xi.push(xi);
        rec.y.push(y);
        rec.noise.push(noise);
    }
    Ok((ObservationTable { rows }, rec))
}

/// Add i.i.d. `N(0, σ_ε²)` noise to every value; the recorded variance of
/// each row grows by `σ_ε²`.
pub fn perturb(table: &ObservationTable, variance: f64, rng: &mut impl Rng) -> Result<ObservationTable> {
    if !(variance >= 0.0) {
        return Err(MstmError::Invalid(format!("perturbation variance {variance} is negative")));
    }
    let sd = variance.sqrt();
    Ok(ObservationTable {
        rows: table
            .rows
            .iter()
            .map(|r| Observation {
                value: r.value + sd * rng.sample::<f64, _>(StandardNormal),
                variance: match r.variance {
                    Some(v) => Some(v + variance),
                    None if variance > 0.0 => Some(variance),
                    None => None,
                },
                ..*r
            })
            .collect(),
    })
}

/// For every (variable, time), mark a uniformly random subset of
/// `round(fraction · N)` prediction cells as observed.
pub fn mask_observed(support: &MultivariateSupport, fraction: f64, rng: &mut impl Rng) -> Result<MultivariateSupport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MstmError::Config(format!("observed fraction {fraction} outside (0, 1]")));
    }
    let mut entries = Vec::new();
    for (t, ts) in support.times().iter().enumerate() {
        for l in 0..support.n_variables() {
            let cells: Vec<_> = ts.cells().iter().filter(|c| c.variable == l).copied().collect();
            let k = (fraction * cells.len() as f64).round() as usize;
            let mut flags = vec![false; cells.len()];
            for i in sample(rng, cells.len(), k.min(cells.len())) {
                flags[i] = true;
            }
            entries.extend(cells.iter().zip(flags).map(|(c, o)| SupportEntry {
                time: t,
                cell: *c,
                observed: o,
            }));
        }
    }
    MultivariateSupport::from_entries(support.n_variables(), support.n_units(), support.n_times(), entries)
}

/// Perturbation variance: fixed, or the sample variance of the truth table
/// (signal-to-noise ratio one).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PerturbationVariance {
    #[default]
    Auto,
    Fixed(f64),
}

impl PerturbationVariance {
    pub fn resolve(&self, truth: &ObservationTable) -> f64 {
        match self {
            PerturbationVariance::Auto => truth.value_variance(),
            PerturbationVariance::Fixed(v) => *v,
        }
    }
}

impl Serialize for PerturbationVariance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PerturbationVariance::Auto => s.serialize_str("auto"),
            PerturbationVariance::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for PerturbationVariance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) if v >= 0.0 => Ok(PerturbationVariance::Fixed(v)),
            Raw::Number(v) => Err(serde::de::Error::custom(format!("perturbation variance {v} is negative"))),
            Raw::Word(w) if w == "auto" => Ok(PerturbationVariance::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got `{w}`"))),
        }
    }
}

/// Where each replicate's truth comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TruthSource {
    Simulate(GenerativeConfig),
    /// A fixed truth table covering every prediction cell.
    Table(ObservationTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub replicates: usize,
    pub observed_fraction: f64,
    pub perturbation: PerturbationVariance,
    pub seed: u64,
    pub mcmc: McmcConfig,
    pub truth: TruthSource,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(MstmError::Config("study.replicates must be at least 1".into()));
        }
        if !(self.observed_fraction > 0.0 && self.observed_fraction <= 1.0) {
            return Err(MstmError::Config("study.observed_fraction must lie in (0, 1]".into()));
        }
        if let PerturbationVariance::Fixed(v) = self.perturbation {
            if !(v >= 0.0) {
                return Err(MstmError::Config("perturbation variance must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Seed for replicate `index`, derived from the study seed.
pub fn replicate_seed(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"replicate");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    /// 1-based.
    pub replicate: usize,
    pub seed: u64,
    pub perturbation_variance: f64,
    pub n_observed: usize,
    pub n_missing: usize,
    pub mprd_observed: f64,
    pub mprd_missing: f64,
    pub stspe_observed: f64,
    pub stspe_missing: f64,
    pub mprd_excluded: usize,
    pub error: Option<String>,
}

impl ReplicateResult {
    fn failed(replicate: usize, seed: u64, e: &MstmError) -> Self {
        ReplicateResult {
            replicate,
            seed,
            perturbation_variance: f64::NAN,
            n_observed: 0,
            n_missing: 0,
            mprd_observed: f64::NAN,
            mprd_missing: f64::NAN,
            stspe_observed: f64::NAN,
            stspe_missing: f64::NAN,
            mprd_excluded: 0,
            error: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub median: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub replicates: Vec<ReplicateResult>,
    pub mprd_observed: MetricSummary,
    pub mprd_missing: MetricSummary,
    pub stspe_observed: MetricSummary,
    pub stspe_missing: MetricSummary,
    pub failures: usize,
}

impl StudyReport {
    pub fn from_replicates(replicates: Vec<ReplicateResult>) -> Self {
        let ok: Vec<&ReplicateResult> = replicates.iter().filter(|r| r.error.is_none()).collect();
        let summary = |f: fn(&ReplicateResult) -> f64| {
            let (median, iqr) = median_iqr(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            MetricSummary { median, iqr }
        };
        StudyReport {
            mprd_observed: summary(|r| r.mprd_observed),
            mprd_missing: summary(|r| r.mprd_missing),
            stspe_observed: summary(|r| r.stspe_observed),
            stspe_missing: summary(|r| r.stspe_missing),
            failures: replicates.len() - ok.len(),
            replicates,
        }
    }

    /// Per-replicate rows as CSV.
    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "replicate",
            "seed",
            "perturbation_variance",
            "n_observed",
            "n_missing",
            "mprd_observed",
            "mprd_missing",
            "stspe_observed",
            "stspe_missing",
            "mprd_excluded",
            "error",
        ])?;
        for r in &self.replicates {
            w.write_record([
                r.replicate.to_string(),
                r.seed.to_string(),
                format!("{:?}", r.perturbation_variance),
                r.n_observed.to_string(),
                r.n_missing.to_string(),
                format!("{:?}", r.mprd_observed),
                format!("{:?}", r.mprd_missing),
                format!("{:?}", r.stspe_observed),
                format!("{:?}", r.stspe_missing),
                r.mprd_excluded.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| MstmError::io("<study csv>", e))?;
        Ok(())
    }
}

/// Data for one replicate: the bound model on the masked support, the truth
/// table and the resolved perturbation variance.
#[derive(Debug, Clone)]
pub struct PreparedReplicate {
    pub seed: u64,
    pub model: Model,
    pub truth: ObservationTable,
    pub perturbation_variance: f64,
}

/// Simulate (or take) the truth, perturb it and mask the support.
pub fn prepare_replicate(structure: &Structure, cfg: &StudyConfig, index: usize) -> Result<PreparedReplicate> {
    if !matches!(structure.config.variance, VarianceSpec::Known) {
        return Err(MstmError::Config("studies fit with variance.mode = known".into()));
    }
    let seed = replicate_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = match &cfg.truth {
        TruthSource::Simulate(gen) => simulate(structure, gen, &mut rng)?.0,
        TruthSource::Table(t) => t.clone(),
    };
    let eps = cfg.perturbation.resolve(&truth);
    let perturbed = perturb(&truth, eps, &mut rng)?;
    let support = mask_observed(&structure.support, cfg.observed_fraction, &mut rng)?;
    let data = perturbed.restrict_to_observed(&support);
    Ok(PreparedReplicate {
        seed,
        model: bind(structure.with_support(support)?, &data)?,
        truth,
        perturbation_variance: eps,
    })
}

/// Run one replicate against a prebuilt structure whose support lists every
/// prediction cell.
pub fn run_replicate(structure: &Structure, cfg: &StudyConfig, index: usize) -> Result<ReplicateResult> {
    let PreparedReplicate {
        seed,
        model,
        truth,
        perturbation_variance: eps,
    } = prepare_replicate(structure, cfg, index)?;
    let draws = fit(&model, &McmcConfig { seed, ..cfg.mcmc })?;
    let predictions = predict(&model, &draws)?;
    let truth_at = truth.index();
    let (mut obs_pred, mut obs_truth, mut mis_pred, mut mis_truth) = (vec![], vec![], vec![], vec![]);
    for p in &predictions.cells {
        let z = truth_at
            .get(&(p.time, p.cell))
            .ok_or(MstmError::UnknownCell {
                variable: p.cell.variable,
                unit: p.cell.unit,
            })?
            .value;
        if p.observed {
            obs_pred.push(p.mean);
            obs_truth.push(z);
        } else {
            mis_pred.push(p.mean);
            mis_truth.push(z);
        }
    }
    let standardized = |pred: &[f64], z: &[f64]| {
        if eps > 0.0 {
            stspe(pred, z, eps)
        } else {
            Ok(f64::NAN)
        }
    };
    let mprd_obs = mprd(&obs_pred, &obs_truth)?;
    let mprd_mis = mprd(&mis_pred, &mis_truth)?;
    Ok(ReplicateResult {
        replicate: index + 1,
        seed,
        perturbation_variance: eps,
        n_observed: obs_pred.len(),
        n_missing: mis_pred.len(),
        mprd_observed: mprd_obs.value,
        mprd_missing: mprd_mis.value,
        stspe_observed: standardized(&obs_pred, &obs_truth)?,
        stspe_missing: standardized(&mis_pred, &mis_truth)?,
        mprd_excluded: mprd_obs.excluded + mprd_mis.excluded,
        error: None,
    })
}

/// Run every replicate concurrently. Failed replicates are recorded and the
/// study carries on.
pub fn run_study(structure: &Structure, cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    if let TruthSource::Table(t) = &cfg.truth {
        let index = t.index();
        for (time, ts) in structure.support.times().iter().enumerate() {
            if let Some(c) = ts.cells().iter().find(|c| !index.contains_key(&(time, **c))) {
                return Err(MstmError::Invalid(format!(
                    "truth table has no value for variable {}, time {}, unit index {}",
                    c.variable + 1,
                    time + 1,
                    c.unit
                )));
            }
        }
    }
    let results = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            run_replicate(structure, cfg, r).unwrap_or_else(|e| {
                log::error!("replicate {} failed: {e}", r + 1);
                ReplicateResult::failed(r + 1, replicate_seed(cfg.seed, r), &e)
            })
        })
        .collect();
    Ok(StudyReport::from_replicates(results))
}
