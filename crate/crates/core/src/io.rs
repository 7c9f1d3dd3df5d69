//! File formats: observations, covariates, prior targets, predictions, draws.
//!
//! Variables and times are 1-based in every file; units are referred to by
//! their graph ids. Floating-point values are written in shortest round-trip
//! form so identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MstmError, Result};
use crate::graph::{AdjacencyGraph, Cell, MultivariateSupport, SupportEntry};
use crate::model::{CovariateTable, Observation, ObservationTable, PredictionSet, Structure};
use crate::sampler::gibbs::PosteriorDraws;
use crate::study::LatentRecord;

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| MstmError::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| MstmError::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| MstmError::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| MstmError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn unit(graph: &AdjacencyGraph, id: &str) -> Result<usize> {
    graph.unit_index(id).ok_or_else(|| MstmError::UnknownUnit(id.to_string()))
}

fn one_based(v: usize, what: &str, line: usize) -> Result<usize> {
    v.checked_sub(1).ok_or_else(|| MstmError::Parse {
        line,
        message: format!("{what} is 1-based"),
    })
}

#[derive(Debug, Deserialize)]
struct ObservationRow {
    variable: usize,
    time: usize,
    unit: String,
    value: f64,
    variance: Option<f64>,
}

/// `variable,time,unit,value,variance` (variance may be empty).
pub fn read_observations(reader: impl Read, graph: &AdjacencyGraph) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for (k, row) in rdr.deserialize::<ObservationRow>().enumerate() {
        let line = k + 2;
        let row = row?;
        rows.push(Observation {
            time: one_based(row.time, "time", line)?,
            cell: Cell::new(one_based(row.variable, "variable", line)?, unit(graph, &row.unit)?),
            value: row.value,
            variance: row.variance,
        });
    }
    Ok(ObservationTable { rows })
}

pub fn write_observations(table: &ObservationTable, graph: &AdjacencyGraph, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "time", "unit", "value", "variance"])?;
    for r in &table.rows {
        w.write_record([
            (r.cell.variable + 1).to_string(),
            (r.time + 1).to_string(),
            graph.unit_id(r.cell.unit).to_string(),
            fmt_f64(r.value),
            r.variance.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| MstmError::io("<observations>", e))?;
    Ok(())
}

/// Complete support implied by an observation table: every variable at every
/// graph unit and time, with the table's cells marked observed.
pub fn support_from_observations(table: &ObservationTable, graph: &AdjacencyGraph) -> Result<MultivariateSupport> {
    let n_vars = table.rows.iter().map(|r| r.cell.variable + 1).max().unwrap_or(0);
    let n_times = table.rows.iter().map(|r| r.time + 1).max().unwrap_or(0);
    if n_vars == 0 {
        return Err(MstmError::Invalid("observation table is empty and no support roster was given".into()));
    }
    let observed = table.index();
    let entries = (0..n_times).flat_map(|t| {
        let observed = &observed;
        (0..n_vars).flat_map(move |l| {
            (0..graph.n_units()).map(move |u| SupportEntry {
                time: t,
                cell: Cell::new(l, u),
                observed: observed.contains_key(&(t, Cell::new(l, u))),
            })
        })
    });
    MultivariateSupport::from_entries(n_vars, graph.n_units(), n_times, entries)
}

/// `variable,time,unit,<name>...`, one row per cell.
pub fn read_covariates(reader: impl Read, graph: &AdjacencyGraph) -> Result<CovariateTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "variable" || &headers[1] != "time" || &headers[2] != "unit" {
        return Err(MstmError::Parse {
            line: 1,
            message: "covariate header must start with variable,time,unit".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let mut table = CovariateTable {
        names,
        values: Default::default(),
    };
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let parse_usize = |i: usize| {
            rec[i].parse::<usize>().map_err(|e| MstmError::Parse {
                line,
                message: format!("{}: {e}", &headers[i]),
            })
        };
        let variable = one_based(parse_usize(0)?, "variable", line)?;
        let time = one_based(parse_usize(1)?, "time", line)?;
        let cell = Cell::new(variable, unit(graph, &rec[2])?);
        let values = (3..rec.len())
            .map(|i| {
                rec[i].parse::<f64>().map_err(|e| MstmError::Parse {
                    line,
                    message: format!("{}: {e}", &headers[i]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if table.values.insert((time, cell), values).is_some() {
            return Err(MstmError::Parse {
                line,
                message: "duplicate covariate row".into(),
            });
        }
    }
    Ok(table)
}

#[derive(Debug, Deserialize)]
struct TripletRow {
    time: usize,
    row: usize,
    col: usize,
    value: f64,
}

/// Per-time target precisions from `time,row,col,value` triplets. Rows and
/// columns index the prediction cells of that time (0-based, variable-major);
/// every entry is mirrored, and absent entries are zero.
pub fn read_prior_target(reader: impl Read, support: &MultivariateSupport) -> Result<Vec<DMatrix<f64>>> {
    let mut mats: Vec<DMatrix<f64>> = support
        .times()
        .iter()
        .map(|ts| DMatrix::zeros(ts.n_prediction(), ts.n_prediction()))
        .collect();
    let mut seen = std::collections::HashMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (k, row) in rdr.deserialize::<TripletRow>().enumerate() {
        let line = k + 2;
        let row = row?;
        let t = one_based(row.time, "time", line)?;
        let m = mats.get_mut(t).ok_or_else(|| MstmError::Parse {
            line,
            message: format!("time {} outside the support", row.time),
        })?;
        let n = m.nrows();
        if row.row >= n || row.col >= n {
            return Err(MstmError::Parse {
                line,
                message: format!("entry ({}, {}) outside {n}x{n}", row.row, row.col),
            });
        }
        let key = (t, row.row.min(row.col), row.row.max(row.col));
        if let Some(prev) = seen.insert(key, row.value) {
            if prev != row.value {
                return Err(MstmError::Parse {
                    line,
                    message: "conflicting values for a symmetric pair".into(),
                });
            }
        }
        m[(row.row, row.col)] = row.value;
        m[(row.col, row.row)] = row.value;
    }
    Ok(mats)
}

/// `variable,time,unit,post_mean,root_mspe,mu_mean`.
pub fn write_predictions(set: &PredictionSet, graph: &AdjacencyGraph, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "time", "unit", "post_mean", "root_mspe", "mu_mean"])?;
    for p in &set.cells {
        w.write_record([
            (p.cell.variable + 1).to_string(),
            (p.time + 1).to_string(),
            graph.unit_id(p.cell.unit).to_string(),
            fmt_f64(p.mean),
            fmt_f64(p.root_mspe()),
            fmt_f64(p.mu_mean),
        ])?;
    }
    w.flush().map_err(|e| MstmError::io("<predictions>", e))?;
    Ok(())
}

/// Latent components of a simulated data set, one row per prediction cell.
pub fn write_latent(record: &LatentRecord, structure: &Structure, graph: &AdjacencyGraph, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "time", "unit", "mu", "signal", "xi", "y", "noise"])?;
    for t in 0..structure.n_times() {
        for (i, c) in structure.support.time(t).cells().iter().enumerate() {
            w.write_record([
                (c.variable + 1).to_string(),
                (t + 1).to_string(),
                graph.unit_id(c.unit).to_string(),
                fmt_f64(record.mu[t][i]),
                fmt_f64(record.signal[t][i]),
                fmt_f64(record.xi[t][i]),
                fmt_f64(record.y[t][i]),
                fmt_f64(record.noise[t][i]),
            ])?;
        }
    }
    w.flush().map_err(|e| MstmError::io("<latent>", e))?;
    Ok(())
}

/// Layout of one chain's draw files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub chain: usize,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub draws: usize,
    pub n_times: usize,
    pub rank: usize,
    pub n_covariates: usize,
    pub beta_per_time: bool,
    pub reweighted: bool,
    pub xi_lengths: Vec<usize>,
    pub states: bool,
    pub pseudo_inverses: usize,
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| MstmError::io(path, e))?;
    }
    w.flush().map_err(|e| MstmError::io(path, e))
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| MstmError::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(MstmError::Invalid(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Write `chain<k>.csv` (scalar blocks with iteration index) and, when
/// stored, `chain<k>_eta.bin` / `chain<k>_xi.bin` (little-endian f64,
/// draw-major), plus `draws.json` describing the layout.
pub fn write_draws(dir: &Path, draws: &[PosteriorDraws]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MstmError::io(dir, e))?;
    let mut manifest = Vec::new();
    for d in draws {
        let path = dir.join(format!("chain{}.csv", d.chain));
        let series = d.scalar_series();
        let mut w = csv::Writer::from_writer(create(&path)?);
        let mut header = vec!["iteration".to_string()];
        header.extend(series.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for k in 0..d.n_draws() {
            let mut rec = vec![(d.burn_in + k + 1).to_string()];
            rec.extend(series.iter().map(|(_, s)| fmt_f64(s[k])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| MstmError::io(&path, e))?;
        if d.has_states() {
            write_f64s(&dir.join(format!("chain{}_eta.bin", d.chain)), &d.eta)?;
            write_f64s(&dir.join(format!("chain{}_xi.bin", d.chain)), &d.xi)?;
        }
        manifest.push(ChainManifest {
            chain: d.chain,
            seed: d.seed,
            iterations: d.iterations,
            burn_in: d.burn_in,
            draws: d.n_draws(),
            n_times: d.n_times,
            rank: d.rank,
            n_covariates: d.n_covariates,
            beta_per_time: d.beta_per_time,
            reweighted: d.reweighted,
            xi_lengths: d.xi_lengths.clone(),
            states: d.has_states(),
            pseudo_inverses: d.pseudo_inverses,
        });
    }
    let path = dir.join("draws.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush().map_err(|e| MstmError::io(&path, e))
}

/// Inverse of [`write_draws`].
pub fn read_draws(dir: &Path) -> Result<Vec<PosteriorDraws>> {
    let manifest: Vec<ChainManifest> = serde_json::from_reader(open(&dir.join("draws.json"))?)?;
    manifest
        .into_iter()
        .map(|m| {
            let path = dir.join(format!("chain{}.csv", m.chain));
            let mut rdr = csv::Reader::from_reader(open(&path)?);
            let headers = rdr.headers()?.clone();
            let col = |name: &str| {
                headers.iter().position(|h| h == name).ok_or_else(|| MstmError::Parse {
                    line: 1,
                    message: format!("{}: missing column {name}", path.display()),
                })
            };
            let p = m.n_covariates;
            let beta_width = if m.beta_per_time { m.n_times * p } else { p };
            let sk = col("sigma_k2")?;
            let sx = (0..m.n_times).map(|t| col(&format!("sigma_xi2[{t}]"))).collect::<Result<Vec<_>>>()?;
            let bc = (0..beta_width)
                .map(|j| {
                    if m.beta_per_time {
                        col(&format!("beta[{},{}]", j / p, j % p))
                    } else {
                        col(&format!("beta[{j}]"))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let dc = if m.reweighted {
                vec![col("delta[0]")?, col("delta[1]")?]
            } else {
                vec![]
            };
            let mut d = PosteriorDraws {
                chain: m.chain,
                seed: m.seed,
                iterations: m.iterations,
                burn_in: m.burn_in,
                n_times: m.n_times,
                rank: m.rank,
                n_covariates: m.n_covariates,
                beta_per_time: m.beta_per_time,
                reweighted: m.reweighted,
                xi_lengths: m.xi_lengths.clone(),
                beta: Vec::with_capacity(m.draws * beta_width),
                sigma_k2: Vec::with_capacity(m.draws),
                sigma_xi2: Vec::with_capacity(m.draws * m.n_times),
                delta: Vec::new(),
                eta: Vec::new(),
                xi: Vec::new(),
                pseudo_inverses: m.pseudo_inverses,
            };
            for (k, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let get = |i: usize| {
                    rec[i].parse::<f64>().map_err(|e| MstmError::Parse {
                        line: k + 2,
                        message: format!("{}: {e}", path.display()),
                    })
                };
                d.sigma_k2.push(get(sk)?);
                for &c in &sx {
                    d.sigma_xi2.push(get(c)?);
                }
                for &c in &bc {
                    d.beta.push(get(c)?);
                }
                for &c in &dc {
                    d.delta.push(get(c)?);
                }
            }
            if d.n_draws() != m.draws {
                return Err(MstmError::Invalid(format!(
                    "{}: expected {} draws, found {}",
                    path.display(),
                    m.draws,
                    d.n_draws()
                )));
            }
            if m.states {
                d.eta = read_f64s(&dir.join(format!("chain{}_eta.bin", m.chain)), m.draws * m.n_times * m.rank)?;
                let width: usize = m.xi_lengths.iter().sum();
                d.xi = read_f64s(&dir.join(format!("chain{}_xi.bin", m.chain)), m.draws * width)?;
            }
            Ok(d)
        })
        .collect()
}
