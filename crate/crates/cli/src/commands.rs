use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mstm::config::{RunConfig, StudyFile};
use mstm::diagnostics::{summarize, DEFAULT_BATCH_SIZE};
use mstm::graph::{write_support_roster, Cell};
use mstm::io::{self, create, open};
use mstm::model::{self, assemble, contrast, CacheStats, Model, Structure};
use mstm::propagator::PropagatorMode;
use mstm::sampler::gibbs::{Hyperparameters, McmcConfig};
use mstm::sampler::BetaMode;
use mstm::study::{run_study, simulate as simulate_truth, TruthSource};
use mstm::{MstmError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Bumped whenever the layout of a fit directory changes.
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct FloorRecord {
    time: usize,
    floored: usize,
    floor: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMetadata {
    format_version: u32,
    mstm_version: String,
    seed: u64,
    mcmc: McmcConfig,
    defaults: McmcConfig,
    rank: usize,
    propagator: PropagatorMode,
    prior_target: String,
    beta_mode: BetaMode,
    hyper: Hyperparameters,
    covariates: Vec<String>,
    n_times: usize,
    n_prediction_cells: usize,
    n_observed_cells: usize,
    /// SHA-256 of every input file.
    inputs: BTreeMap<String, String>,
    deviations: Vec<String>,
    /// One flag per transition, true when the innovation shape was lifted.
    lifted: Vec<bool>,
    eigenvalue_floors: Vec<FloorRecord>,
    /// 1-based.
    rank_deficient_times: Vec<usize>,
    cache: CacheStats,
    /// Backward-pass pseudo-inverse fallbacks per chain.
    pseudo_inverse_fallbacks: Vec<usize>,
    config: RunConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| io_error(path, e))?;
    w.flush().map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> MstmError {
    MstmError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn input_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    let mut paths = vec![cfg.data.edges.clone(), cfg.data.observations.clone()];
    paths.extend(cfg.data.support.clone());
    paths.extend(cfg.data.covariates.clone());
    if let Some(p) = cfg.prior.target.strip_prefix("file:") {
        paths.push(PathBuf::from(p));
    }
    paths
}

fn digests(cfg: &RunConfig) -> Result<BTreeMap<String, String>> {
    input_paths(cfg)
        .iter()
        .map(|p| Ok((p.display().to_string(), io::file_digest(p)?)))
        .collect()
}

fn build(cfg: &RunConfig) -> Result<(Model, mstm::graph::AdjacencyGraph)> {
    let inputs = cfg.read_inputs()?;
    let model = assemble(
        &inputs.graph,
        &inputs.support,
        &inputs.observations,
        inputs.covariates.as_ref(),
        &inputs.model,
    )?;
    Ok((model, inputs.graph))
}

pub fn fit(config: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let out = cfg.output_dir();
    let inputs = digests(&cfg)?;
    let (model, _) = build(&cfg)?;
    log::info!(
        "fitting rank {} over {} time points ({} observed cells)",
        model.rank(),
        model.n_times(),
        model.support().total_observed()
    );
    let draws = model::fit(&model, &cfg.mcmc)?;
    io::write_draws(&out.join("draws"), &draws)?;

    let st = &model.structure;
    let meta = RunMetadata {
        format_version: FORMAT_VERSION,
        mstm_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.mcmc.seed,
        mcmc: cfg.mcmc,
        defaults: McmcConfig::default(),
        rank: model.rank(),
        propagator: cfg.propagator.mode,
        prior_target: cfg.prior.target.clone(),
        beta_mode: cfg.beta.mode,
        hyper: st.config.hyper,
        covariates: st.covariate_names.clone(),
        n_times: model.n_times(),
        n_prediction_cells: model.support().total_prediction(),
        n_observed_cells: model.support().total_observed(),
        inputs,
        deviations: model.deviations(),
        lifted: st.shapes.lifted_flags(),
        eigenvalue_floors: st
            .shapes
            .k_star
            .iter()
            .enumerate()
            .map(|(t, k)| FloorRecord {
                time: t + 1,
                floored: k.floored,
                floor: k.floor,
            })
            .collect(),
        rank_deficient_times: st.rank_deficient_times.iter().map(|t| t + 1).collect(),
        cache: st.cache,
        pseudo_inverse_fallbacks: draws.iter().map(|d| d.pseudo_inverses).collect(),
        config: cfg.clone(),
    };
    write_json(&out.join("run_metadata.json"), &meta)?;
    write_json(&out.join("diagnostics.json"), &summarize(&draws, DEFAULT_BATCH_SIZE)?)?;
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_fit(fit_dir: &Path) -> Result<RunMetadata> {
    let path = fit_dir.join("run_metadata.json");
    let meta: serde_json::Value = serde_json::from_reader(open(&path)?)?;
    let version = meta.get("format_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(FORMAT_VERSION)) {
        return Err(MstmError::Invalid(format!(
            "{}: fit format version {:?} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            version
        )));
    }
    Ok(serde_json::from_value(meta)?)
}

pub fn predict(fit_dir: &Path) -> Result<ExitCode> {
    let meta = load_fit(fit_dir)?;
    for (path, digest) in &meta.inputs {
        if &io::file_digest(Path::new(path))? != digest {
            return Err(MstmError::Invalid(format!("{path} changed since the fit")));
        }
    }
    let (model, graph) = build(&meta.config)?;
    let draws = io::read_draws(&fit_dir.join("draws"))?;
    let predictions = model::predict(&model, &draws)?;
    let path = fit_dir.join("predictions.csv");
    io::write_predictions(&predictions, &graph, create(&path)?)?;
    if !meta.config.contrasts.is_empty() {
        let mut out = BTreeMap::new();
        for c in &meta.config.contrasts {
            let weights = c
                .weights
                .iter()
                .map(|w| {
                    let unit = graph
                        .unit_index(&w.unit)
                        .ok_or_else(|| MstmError::UnknownUnit(w.unit.clone()))?;
                    if w.variable == 0 || w.time == 0 {
                        return Err(MstmError::Config(format!("contrast {}: indices are 1-based", c.name)));
                    }
                    Ok(((w.time - 1, Cell::new(w.variable - 1, unit)), w.weight))
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(c.name.clone(), contrast(&model, &draws, &weights)?);
        }
        write_json(&fit_dir.join("contrasts.json"), &out)?;
    }
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn diagnostics(fit_dir: &Path) -> Result<ExitCode> {
    load_fit(fit_dir)?;
    let draws = io::read_draws(&fit_dir.join("draws"))?;
    let summary = summarize(&draws, DEFAULT_BATCH_SIZE)?;
    write_json(&fit_dir.join("diagnostics.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

pub fn study(config: &Path) -> Result<ExitCode> {
    let file = StudyFile::load(config)?;
    let out = file.output_dir();
    let inputs = file.read_inputs()?;
    let structure = Structure::build(&inputs.graph, &inputs.support, &inputs.model, None)?;
    let report = run_study(&structure, &inputs.study)?;
    write_json(&out.join("study_config.json"), &file)?;
    write_json(&out.join("study_report.json"), &report)?;
    report.write_csv(create(&out.join("study_replicates.csv"))?)?;
    println!("{}", out.display());
    if report.failures > 0 {
        log::error!("{} of {} replicates failed", report.failures, report.replicates.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn simulate(config: &Path) -> Result<ExitCode> {
    let file = StudyFile::load(config)?;
    let out = file.output_dir();
    let inputs = file.read_inputs()?;
    let TruthSource::Simulate(gen) = &inputs.study.truth else {
        return Err(MstmError::Config("simulate needs a [generative] section".into()));
    };
    let structure = Structure::build(&inputs.graph, &inputs.support, &inputs.model, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.study.seed);
    let (table, latent) = simulate_truth(&structure, gen, &mut rng)?;
    let edges = out.join("edges.txt");
    let mut w = create(&edges)?;
    w.write_all(inputs.graph.to_edge_list().as_bytes()).map_err(|e| io_error(&edges, e))?;
    w.flush().map_err(|e| io_error(&edges, e))?;
    write_support_roster(&inputs.support, &inputs.graph, create(&out.join("support.csv"))?)?;
    io::write_observations(&table, &inputs.graph, create(&out.join("observations.csv"))?)?;
    io::write_latent(&latent, &structure, &inputs.graph, create(&out.join("latent.csv"))?)?;
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}
