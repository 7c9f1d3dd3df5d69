//! TOML run and study configurations.
//!
//! Relative paths inside a configuration file are resolved against the
//! directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MstmError, Result};
use crate::graph::{read_edge_list, read_support_roster, AdjacencyGraph, Coupling, MultivariateSupport};
use crate::io;
use crate::model::{CovariateSpec, ModelConfig, ObservationTable, PriorTarget, VarianceSpec};
use crate::propagator::PropagatorMode;
use crate::sampler::conditionals::{BetaMode, BetaPrior};
use crate::sampler::gibbs::{Hyperparameters, McmcConfig};
use crate::study::{GenerativeConfig, PerturbationVariance, StudyConfig, TruthSource};

/// Environment variable overriding `[output] dir`.
pub const OUTPUT_DIR_ENV: &str = "MSTM_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub edges: PathBuf,
    /// Support roster; without it every variable is predicted at every unit
    /// and time found in the observations.
    #[serde(default)]
    pub support: Option<PathBuf>,
    pub observations: PathBuf,
    #[serde(default)]
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub rank: usize,
    #[serde(default)]
    pub coupling: Coupling,
    #[serde(default)]
    pub covariates: CovariateSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagatorSection {
    pub mode: PropagatorMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// `"car"` or `"file:<path>"` (triplets `time,row,col,value`).
    pub target: String,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { target: "car".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSection {
    pub mode: BetaMode,
    pub prior: BetaPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("mstm-out") }
    }
}

/// One weight of a fixed-effect contrast; indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastWeight {
    pub variable: usize,
    pub time: usize,
    pub unit: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastSpec {
    pub name: String,
    pub weights: Vec<ContrastWeight>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| MstmError::io(path, e))?;
    toml::from_str(&text).map_err(|e| MstmError::Config(format!("{}: {e}", path.display())))
}

fn resolve_target(base: &Path, target: &str) -> Result<String> {
    match target.strip_prefix("file:") {
        Some(p) => Ok(format!("file:{}", resolve(base, Path::new(p)).display())),
        None if target == "car" => Ok(target.to_string()),
        None => Err(MstmError::Config(format!(
            "prior.target must be \"car\" or \"file:<path>\", got `{target}`"
        ))),
    }
}

fn prior_target(target: &str, support: &MultivariateSupport) -> Result<PriorTarget> {
    match target.strip_prefix("file:") {
        Some(p) => {
            let path = Path::new(p);
            Ok(PriorTarget::Explicit(io::read_prior_target(io::open(path)?, support)?))
        }
        None => Ok(PriorTarget::Car),
    }
}

fn output_dir(section: &OutputSection) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => section.dir.clone(),
    }
}

/// Inputs and settings for `fit`, `predict` and `diagnostics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub propagator: PropagatorSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub beta: BetaSection,
    #[serde(default)]
    pub variance: VarianceSpec,
    #[serde(default)]
    pub hyper: Hyperparameters,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, rename = "contrast")]
    pub contrasts: Vec<ContrastSpec>,
}

/// Everything a run needs, read from disk.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub graph: AdjacencyGraph,
    pub support: MultivariateSupport,
    pub observations: ObservationTable,
    pub covariates: Option<crate::model::CovariateTable>,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Parse a file and make every path absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = base.canonicalize().map_err(|e| MstmError::io(base, e))?;
        cfg.data.edges = resolve(&base, &cfg.data.edges);
        cfg.data.observations = resolve(&base, &cfg.data.observations);
        cfg.data.support = cfg.data.support.map(|p| resolve(&base, &p));
        cfg.data.covariates = cfg.data.covariates.map(|p| resolve(&base, &p));
        cfg.prior.target = resolve_target(&base, &cfg.prior.target)?;
        cfg.output.dir = resolve(&base, &cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.rank == 0 {
            return Err(MstmError::Config("model.rank must be at least 1".into()));
        }
        if self.mcmc.burn_in >= self.mcmc.iterations || self.mcmc.chains == 0 {
            return Err(MstmError::Config(
                "mcmc needs iterations > burn_in and at least one chain".into(),
            ));
        }
        Ok(())
    }

    /// Output directory, honouring the environment override.
    pub fn output_dir(&self) -> PathBuf {
        output_dir(&self.output)
    }

    pub fn read_inputs(&self) -> Result<RunInputs> {
        let graph = read_edge_list(&self.data.edges)?;
        let observations = io::read_observations(io::open(&self.data.observations)?, &graph)?;
        let support = match &self.data.support {
            Some(p) => read_support_roster(io::open(p)?, &graph)?,
            None => io::support_from_observations(&observations, &graph)?,
        };
        let covariates = match &self.data.covariates {
            Some(p) => Some(io::read_covariates(io::open(p)?, &graph)?),
            None => None,
        };
        let model = ModelConfig {
            rank: self.model.rank,
            coupling: self.model.coupling,
            propagator: self.propagator.mode,
            prior_target: prior_target(&self.prior.target, &support)?,
            beta_mode: self.beta.mode,
            variance: self.variance.clone(),
            hyper: Hyperparameters {
                beta: self.beta.prior,
                ..self.hyper
            },
            covariates: self.model.covariates.clone(),
        };
        Ok(RunInputs {
            graph,
            support,
            observations,
            covariates,
            model,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub replicates: usize,
    pub observed_fraction: f64,
    #[serde(default)]
    pub perturbation_variance: PerturbationVariance,
    #[serde(default)]
    pub seed: u64,
}

/// The areal partition: a `rows × cols` lattice or an edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    #[serde(default)]
    pub lattice: Option<[usize; 2]>,
    #[serde(default)]
    pub edges: Option<PathBuf>,
}

/// The prediction support: complete over `variables × times`, or a roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSection {
    #[serde(default)]
    pub variables: Option<usize>,
    #[serde(default)]
    pub times: Option<usize>,
    #[serde(default)]
    pub roster: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    pub observations: PathBuf,
}

/// Configuration for `study` and `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    pub study: StudySection,
    pub graph: GraphSection,
    pub support: SupportSection,
    pub model: ModelSection,
    #[serde(default)]
    pub propagator: PropagatorSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub beta: BetaSection,
    #[serde(default)]
    pub hyper: Hyperparameters,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub generative: Option<GenerativeConfig>,
    #[serde(default)]
    pub truth: Option<TruthSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Study ingredients read from disk.
#[derive(Debug, Clone)]
pub struct StudyInputs {
    pub graph: AdjacencyGraph,
    pub support: MultivariateSupport,
    pub model: ModelConfig,
    pub study: StudyConfig,
}

impl StudyFile {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: StudyFile = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = base.canonicalize().map_err(|e| MstmError::io(base, e))?;
        cfg.graph.edges = cfg.graph.edges.map(|p| resolve(&base, &p));
        cfg.support.roster = cfg.support.roster.map(|p| resolve(&base, &p));
        if let Some(t) = &mut cfg.truth {
            t.observations = resolve(&base, &t.observations);
        }
        cfg.prior.target = resolve_target(&base, &cfg.prior.target)?;
        cfg.output.dir = resolve(&base, &cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph.lattice.is_some() == self.graph.edges.is_some() {
            return Err(MstmError::Config("graph needs exactly one of lattice or edges".into()));
        }
        let complete = self.support.variables.is_some() || self.support.times.is_some();
        if complete == self.support.roster.is_some() {
            return Err(MstmError::Config(
                "support needs either variables and times, or a roster".into(),
            ));
        }
        if complete && (self.support.variables.is_none() || self.support.times.is_none()) {
            return Err(MstmError::Config("support needs both variables and times".into()));
        }
        if self.generative.is_some() == self.truth.is_some() {
            return Err(MstmError::Config("study needs exactly one of [generative] or [truth]".into()));
        }
        if self.model.rank == 0 {
            return Err(MstmError::Config("model.rank must be at least 1".into()));
        }
        if self.mcmc.burn_in >= self.mcmc.iterations || self.mcmc.chains == 0 {
            return Err(MstmError::Config(
                "mcmc needs iterations > burn_in and at least one chain".into(),
            ));
        }
        self.study_config(TruthSource::Table(ObservationTable::default())).validate()
    }

    pub fn output_dir(&self) -> PathBuf {
        output_dir(&self.output)
    }

    fn study_config(&self, truth: TruthSource) -> StudyConfig {
        StudyConfig {
            replicates: self.study.replicates,
            observed_fraction: self.study.observed_fraction,
            perturbation: self.study.perturbation_variance,
            seed: self.study.seed,
            mcmc: self.mcmc,
            truth,
        }
    }

    pub fn read_inputs(&self) -> Result<StudyInputs> {
        let graph = match (&self.graph.lattice, &self.graph.edges) {
            (Some([rows, cols]), _) => AdjacencyGraph::lattice(*rows, *cols),
            (None, Some(p)) => read_edge_list(p)?,
            (None, None) => unreachable!("validated"),
        };
        let support = match (&self.support.roster, self.support.variables, self.support.times) {
            (Some(p), _, _) => read_support_roster(io::open(p)?, &graph)?,
            (None, Some(l), Some(t)) => MultivariateSupport::complete(l, graph.n_units(), t),
            _ => unreachable!("validated"),
        };
        let truth = match (&self.generative, &self.truth) {
            (Some(g), _) => TruthSource::Simulate(g.clone()),
            (None, Some(t)) => TruthSource::Table(io::read_observations(io::open(&t.observations)?, &graph)?),
            (None, None) => unreachable!("validated"),
        };
        let model = ModelConfig {
            rank: self.model.rank,
            coupling: self.model.coupling,
            propagator: self.propagator.mode,
            prior_target: prior_target(&self.prior.target, &support)?,
            beta_mode: self.beta.mode,
            variance: VarianceSpec::Known,
            hyper: Hyperparameters {
                beta: self.beta.prior,
                ..self.hyper
            },
            covariates: self.model.covariates.clone(),
        };
        Ok(StudyInputs {
            graph,
            support,
            model,
            study: self.study_config(truth),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn run_config_defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "run.toml",
            "[data]\nedges = \"g.txt\"\nobservations = \"obs.csv\"\n[model]\nrank = 3\n",
        );
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.mcmc.iterations, 10000);
        assert_eq!(cfg.mcmc.burn_in, 1000);
        assert_eq!(cfg.mcmc.chains, 3);
        assert_eq!(cfg.prior.target, "car");
        assert_eq!(cfg.variance, VarianceSpec::Known);
        assert_eq!(cfg.propagator.mode, PropagatorMode::Reduced);
        assert_eq!(cfg.hyper.sigma_k.shape, 2.0);
        assert_eq!(cfg.beta.prior.variance, 1e15);
        assert!(cfg.data.edges.is_absolute());
        assert!(cfg.data.edges.ends_with("g.txt"));
    }

    #[test]
    fn run_config_sections() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
[data]
edges = "g.txt"
observations = "obs.csv"
[model]
rank = 4
coupling = "none"
covariates = { intercept = true, variable_indicators = true }
[propagator]
mode = "paper_literal"
[prior]
target = "file:q.csv"
[beta]
mode = "per_time"
prior = { mean = 1.0 }
[variance]
mode = "reweighted"
groups = [1, 2]
[hyper]
sigma_xi = { shape = 3.0, rate = 0.5 }
[mcmc]
iterations = 50
burn_in = 10
seed = 4
[[contrast]]
name = "gap"
weights = [{ variable = 1, time = 1, unit = "a", weight = 1.0 }]
"#;
        let cfg = RunConfig::load(&write(dir.path(), "run.toml", text)).unwrap();
        assert_eq!(cfg.model.coupling, Coupling::None);
        assert_eq!(cfg.propagator.mode, PropagatorMode::PaperLiteral);
        assert!(cfg.prior.target.starts_with("file:/"));
        assert_eq!(cfg.beta.mode, BetaMode::PerTime);
        assert_eq!(cfg.beta.prior.mean, 1.0);
        assert_eq!(cfg.beta.prior.variance, 1e15);
        assert_eq!(cfg.hyper.sigma_xi.rate, 0.5);
        assert_eq!(cfg.hyper.delta.shape, 2.0);
        assert_eq!(cfg.mcmc.chains, 3);
        assert_eq!(cfg.contrasts[0].weights[0].unit, "a");
        assert!(matches!(cfg.variance, VarianceSpec::Reweighted { ref groups, delta_method: false } if groups == &[1, 2]));
    }

    #[test]
    fn run_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let base = "[data]\nedges = \"g.txt\"\nobservations = \"obs.csv\"\n";
        for bad in [
            format!("{base}[model]\nrank = 3\nextra = 1\n"),
            format!("{base}[model]\nrank = 0\n"),
            format!("{base}[model]\nrank = 3\n[prior]\ntarget = \"icar\"\n"),
            format!("{base}[model]\nrank = 3\n[mcmc]\niterations = 10\nburn_in = 10\n"),
            format!("{base}[model]\nrank = 3\n[variance]\nmode = \"guess\"\n"),
        ] {
            let p = write(dir.path(), "bad.toml", &bad);
            assert!(matches!(RunConfig::load(&p), Err(MstmError::Config(_))), "{bad}");
        }
        assert!(matches!(
            RunConfig::load(&dir.path().join("absent.toml")),
            Err(MstmError::Io { .. })
        ));
    }

    #[test]
    fn study_file_full_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
[study]
replicates = 50
observed_fraction = 0.65
perturbation_variance = "auto"
seed = 3
[graph]
lattice = [4, 4]
[support]
variables = 2
times = 3
[model]
rank = 5
covariates = { variable_indicators = true }
[generative]
beta = [1.0, 0.5]
signal_variance = 0.1
sigma_xi2 = 0.5
measurement_variance = 0.2
"#;
        let cfg = StudyFile::load(&write(dir.path(), "study.toml", text)).unwrap();
        let inputs = cfg.read_inputs().unwrap();
        assert_eq!(inputs.study.replicates, 50);
        assert_eq!(inputs.study.observed_fraction, 0.65);
        assert_eq!(inputs.study.perturbation, PerturbationVariance::Auto);
        assert_eq!(inputs.support.total_prediction(), 96);
        assert_eq!(inputs.graph.n_units(), 16);
        assert!(StudyFile::load(&write(dir.path(), "s2.toml", &text.replace("lattice = [4, 4]", "lattice = [4, 4]\nedges = \"x\""))).is_err());
        assert!(StudyFile::load(&write(dir.path(), "s3.toml", &text.replace("replicates = 50", "replicates = 0"))).is_err());
        assert!(StudyFile::load(&write(dir.path(), "s4.toml", &text.replace("times = 3\n", ""))).is_err());
    }
}
