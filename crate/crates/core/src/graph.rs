//! Areal units, their adjacency graph, and the multivariate support over time.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MstmError, Result};

/// A geographic region in the unit roster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArealUnit {
    pub id: String,
    pub index: usize,
}

/// Undirected 0/1 adjacency between areal units.
#[derive(Debug, Clone, Default)]
pub struct AdjacencyGraph {
    units: Vec<ArealUnit>,
    lookup: HashMap<String, usize>,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<BTreeSet<usize>>,
}

impl AdjacencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a unit id, returning its index. Existing ids keep their index.
    pub fn add_unit(&mut self, id: &str) -> usize {
        if let Some(&k) = self.lookup.get(id) {
            return k;
        }
        let index = self.units.len();
        self.units.push(ArealUnit {
            id: id.to_string(),
            index,
        });
        self.lookup.insert(id.to_string(), index);
        self.neighbors.push(BTreeSet::new());
        index
    }

    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        let n = self.units.len();
        if a >= n || b >= n {
            return Err(MstmError::Invalid(format!(
                "edge ({a}, {b}) references a unit outside 0..{n}"
            )));
        }
        if a == b {
            return Err(MstmError::SelfLoop {
                line: 0,
                unit: self.units[a].id.clone(),
            });
        }
        self.edges.insert((a.min(b), a.max(b)));
        self.neighbors[a].insert(b);
        self.neighbors[b].insert(a);
        Ok(())
    }

    /// Rook-neighbour lattice with units named `r{row}c{col}` in row-major order.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut g = Self::new();
        for r in 0..rows {
            for c in 0..cols {
                g.add_unit(&format!("r{r}c{c}"));
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                if c + 1 < cols {
                    g.add_edge(k, k + 1).expect("lattice edge");
                }
                if r + 1 < rows {
                    g.add_edge(k, k + cols).expect("lattice edge");
                }
            }
        }
        g
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[ArealUnit] {
        &self.units
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn unit_id(&self, index: usize) -> &str {
        &self.units[index].id
    }

    /// Edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degree(&self, unit: usize) -> usize {
        self.neighbors[unit].len()
    }

    /// Edge list text in the format accepted by [`load_edge_list`].
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let mut linked = vec![false; self.n_units()];
        for (a, b) in self.edges() {
            linked[a] = true;
            linked[b] = true;
            out.push_str(&format!("{} {}\n", self.units[a].id, self.units[b].id));
        }
        for (k, seen) in linked.iter().enumerate() {
            if !seen {
                out.push_str(&format!("{}\n", self.units[k].id));
            }
        }
        out
    }
}

/// Parse a whitespace-separated edge list.
///
/// Each non-blank line holds two unit ids; `#` starts a comment. A line with a
/// single id declares an isolated unit. Ids are indexed in order of first
/// appearance and duplicate edges collapse.
pub fn load_edge_list(text: &str) -> Result<AdjacencyGraph> {
    let mut graph = AdjacencyGraph::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens.as_slice() {
            [single] => {
                graph.add_unit(single);
            }
            [a, b] => {
                if a == b {
                    return Err(MstmError::SelfLoop {
                        line: line_no,
                        unit: a.to_string(),
                    });
                }
                let ia = graph.add_unit(a);
                let ib = graph.add_unit(b);
                graph.add_edge(ia, ib)?;
            }
            _ => {
                return Err(MstmError::Parse {
                    line: line_no,
                    message: format!("expected two unit ids, found {} fields", tokens.len()),
                })
            }
        }
    }
    Ok(graph)
}

pub fn read_edge_list(path: &Path) -> Result<AdjacencyGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| MstmError::io(path, e))?;
    load_edge_list(&text)
}

/// A (variable, unit) pair at some time; both indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub variable: usize,
    pub unit: usize,
}

impl Cell {
    pub fn new(variable: usize, unit: usize) -> Self {
        Cell { variable, unit }
    }
}

/// Prediction and observed cells at one time point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeSupport {
    cells: Vec<Cell>,
    observed: Vec<usize>,
}

impl TimeSupport {
    /// Prediction cells, sorted by variable then unit.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Positions (into [`Self::cells`]) of the observed cells, ascending.
    pub fn observed_indices(&self) -> &[usize] {
        &self.observed
    }

    pub fn observed_cells(&self) -> Vec<Cell> {
        self.observed.iter().map(|&k| self.cells[k]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        let mut flags = vec![false; self.cells.len()];
        for &k in &self.observed {
            flags[k] = true;
        }
        (0..self.cells.len()).filter(|&k| !flags[k]).collect()
    }

    pub fn position(&self, cell: Cell) -> Option<usize> {
        self.cells.binary_search(&cell).ok()
    }

    pub fn n_prediction(&self) -> usize {
        self.cells.len()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.len()
    }

    pub fn is_observed(&self, position: usize) -> bool {
        self.observed.binary_search(&position).is_ok()
    }
}

/// The indexed set of (variable, time, unit) cells, split into prediction and
/// observed subsets per time.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSupport {
    n_variables: usize,
    n_units: usize,
    times: Vec<TimeSupport>,
}

/// One row of a support roster: 0-based time and cell, plus the observed flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupportEntry {
    pub time: usize,
    pub cell: Cell,
    pub observed: bool,
}

impl MultivariateSupport {
    pub fn from_entries(
        n_variables: usize,
        n_units: usize,
        n_times: usize,
        entries: impl IntoIterator<Item = SupportEntry>,
    ) -> Result<Self> {
        let mut per_time: Vec<Vec<(Cell, bool)>> = vec![Vec::new(); n_times];
        for e in entries {
            if e.time >= n_times {
                return Err(MstmError::Invalid(format!(
                    "time index {} outside 0..{n_times}",
                    e.time
                )));
            }
            if e.cell.variable >= n_variables || e.cell.unit >= n_units {
                return Err(MstmError::UnknownCell {
                    variable: e.cell.variable,
                    unit: e.cell.unit,
                });
            }
            per_time[e.time].push((e.cell, e.observed));
        }
        let mut times = Vec::with_capacity(n_times);
        for (t, mut rows) in per_time.into_iter().enumerate() {
            rows.sort_by_key(|(c, _)| *c);
            if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(MstmError::Invalid(format!(
                    "duplicate support cell (variable {}, unit {}) at time {}",
                    w[0].0.variable + 1,
                    w[0].0.unit,
                    t + 1
                )));
            }
            let observed = rows
                .iter()
                .enumerate()
                .filter(|(_, (_, o))| *o)
                .map(|(k, _)| k)
                .collect();
            times.push(TimeSupport {
                cells: rows.into_iter().map(|(c, _)| c).collect(),
                observed,
            });
        }
        let support = MultivariateSupport {
            n_variables,
            n_units,
            times,
        };
        support.time_windows()?;
        Ok(support)
    }

    /// Every variable at every unit and time, all observed.
    pub fn complete(n_variables: usize, n_units: usize, n_times: usize) -> Self {
        let entries = (0..n_times).flat_map(|t| {
            (0..n_variables).flat_map(move |l| {
                (0..n_units).map(move |u| SupportEntry {
                    time: t,
                    cell: Cell::new(l, u),
                    observed: true,
                })
            })
        });
        Self::from_entries(n_variables, n_units, n_times, entries).expect("complete support")
    }

    pub fn n_variables(&self) -> usize {
        self.n_variables
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn time(&self, t: usize) -> &TimeSupport {
        &self.times[t]
    }

    pub fn times(&self) -> &[TimeSupport] {
        &self.times
    }

    pub fn total_prediction(&self) -> usize {
        self.times.iter().map(|s| s.n_prediction()).sum()
    }

    pub fn total_observed(&self) -> usize {
        self.times.iter().map(|s| s.n_observed()).sum()
    }

    /// Replace the observed subset at time `t` (positions into the prediction cells).
    pub fn set_observed(&mut self, t: usize, mut positions: Vec<usize>) -> Result<()> {
        positions.sort_unstable();
        positions.dedup();
        let n = self.times[t].cells.len();
        if positions.last().is_some_and(|&p| p >= n) {
            return Err(MstmError::Invalid(format!(
                "observed position outside the {n} prediction cells at time {}",
                t + 1
            )));
        }
        self.times[t].observed = positions;
        Ok(())
    }

    /// Per-variable `[T_L, T_U]` (0-based, inclusive).
    pub fn time_windows(&self) -> Result<Vec<(usize, usize)>> {
        let mut windows = vec![None::<(usize, usize)>; self.n_variables];
        for (t, ts) in self.times.iter().enumerate() {
            for c in &ts.cells {
                let w = &mut windows[c.variable];
                *w = Some(match *w {
                    None => (t, t),
                    Some((lo, hi)) => (lo.min(t), hi.max(t)),
                });
            }
        }
        windows
            .into_iter()
            .enumerate()
            .map(|(l, w)| {
                w.ok_or_else(|| {
                    MstmError::Invalid(format!("variable {} has no prediction cells", l + 1))
                })
            })
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct RosterRow {
    variable: usize,
    time: usize,
    unit: String,
    observed: u8,
}

/// Parse a support roster CSV (`variable,time,unit,observed`; 1-based
/// variable and time). Units must exist in the graph.
pub fn read_support_roster(reader: impl Read, graph: &AdjacencyGraph) -> Result<MultivariateSupport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut entries = Vec::new();
    let (mut n_vars, mut n_times) = (0, 0);
    for (k, row) in rdr.deserialize::<RosterRow>().enumerate() {
        let row = row?;
        let line = k + 2;
        if row.variable == 0 || row.time == 0 {
            return Err(MstmError::Parse {
                line,
                message: "variable and time are 1-based".into(),
            });
        }
        if row.observed > 1 {
            return Err(MstmError::Parse {
                line,
                message: format!("observed must be 0 or 1, got {}", row.observed),
            });
        }
        let unit = graph
            .unit_index(&row.unit)
            .ok_or_else(|| MstmError::UnknownUnit(row.unit.clone()))?;
        n_vars = n_vars.max(row.variable);
        n_times = n_times.max(row.time);
        entries.push(SupportEntry {
            time: row.time - 1,
            cell: Cell::new(row.variable - 1, unit),
            observed: row.observed == 1,
        });
    }
    MultivariateSupport::from_entries(n_vars, graph.n_units(), n_times, entries)
}

pub fn write_support_roster(
    support: &MultivariateSupport,
    graph: &AdjacencyGraph,
    writer: impl std::io::Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "time", "unit", "observed"])?;
    for (t, ts) in support.times().iter().enumerate() {
        for (k, c) in ts.cells().iter().enumerate() {
            w.write_record([
                (c.variable + 1).to_string(),
                (t + 1).to_string(),
                graph.unit_id(c.unit).to_string(),
                u8::from(ts.is_observed(k)).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| MstmError::io("<support roster>", e))?;
    Ok(())
}

/// How cells of different variables are linked in the block adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Variables are linked only through the shared basis coefficients.
    None,
    /// `(ℓ, u)` is adjacent to `(ℓ′, u)` for every `ℓ ≠ ℓ′`.
    #[default]
    SameUnit,
}

/// The `N_t × N_t` multivariate adjacency `A_t` over the prediction cells at `t`.
pub fn block_adjacency(
    graph: &AdjacencyGraph,
    support: &MultivariateSupport,
    t: usize,
    coupling: Coupling,
) -> Result<DMatrix<f64>> {
    let cells = support.time(t).cells();
    if let Some(c) = cells.iter().find(|c| c.unit >= graph.n_units()) {
        return Err(MstmError::UnknownCell {
            variable: c.variable,
            unit: c.unit,
        });
    }
    let n = cells.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (ci, cj) = (cells[i], cells[j]);
            let linked = if ci.variable == cj.variable {
                graph.is_adjacent(ci.unit, cj.unit)
            } else {
                coupling == Coupling::SameUnit && ci.unit == cj.unit
            };
            if linked {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    Ok(a)
}

/// CAR-style target precision `Q_t = I − A_t`. May be indefinite.
pub fn car_target_precision(a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::identity(a.nrows(), a.ncols()) - a
}
