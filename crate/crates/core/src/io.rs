//! File formats. Everything is UTF-8 text.
//!
//! **Grid** (CSV with two sections, each opened by a marker line and a header
//! row; blank lines are ignored):
//!
//! ```text
//! #buses
//! bus_id,is_substation
//! sub,1
//! a,0
//! #lines
//! line_id,from,to,r,x,prior,switchable
//! l1,sub,a,0.02,0.03,,1
//! ```
//!
//! Bus and line ids are arbitrary labels, mapped to contiguous indices in
//! file order. `prior` (empty = none) and `switchable` (default 1) are
//! optional columns; unknown columns are rejected.
//!
//! **Stats** (JSON): `sigma_p`, `sigma_q` and optionally `sigma_pq`, each a
//! vector (diagonal) or a matrix, indexed by the non-substation buses in file
//! order; `noise_variance`; optional `alpha` (defaults to the median `r/x`).
//!
//! **Voltages** (CSV): header of non-substation bus labels in any order, one
//! row of per-unit magnitudes per time step.
//!
//! **Line tables** (CSV): `line_id,status` with 0/1 values, or
//! `line_id,prior` with probabilities.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid::{Bus, GridModel, Line};
use crate::stats::{default_alpha, InjectionStatistics};

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

struct Table {
    path: String,
    columns: Vec<String>,
    /// (1-based file line, fields)
    rows: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    /// Parses CSV `text` whose first line sits at file line `first_line`.
    fn parse(path: &str, text: &str, first_line: usize, allowed: &[&str], required: &[&str]) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| parse_err(first_line, e.to_string()))?
            .clone();
        let header_line = header
            .position()
            .map_or(first_line, |p| first_line + p.line() as usize - 1);
        let columns: Vec<String> = header.iter().map(str::to_string).collect();
        for c in &columns {
            if !allowed.contains(&c.as_str()) {
                return Err(parse_err(header_line, format!("unknown column {c:?}")));
            }
        }
        for r in required {
            if !columns.iter().any(|c| c == r) {
                return Err(parse_err(header_line, format!("missing column {r:?}")));
            }
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(first_line, |p| first_line + p.line() as usize - 1);
                parse_err(line, e.to_string())
            })?;
            let line = record
                .position()
                .map_or(first_line, |p| first_line + p.line() as usize - 1);
            rows.push((line, record));
        }
        Ok(Self {
            path: path.to_string(),
            columns,
            rows,
        })
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn number(&self, line: usize, record: &csv::StringRecord, col: usize) -> Result<f64> {
        let raw = &record[col];
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(line, format!("{}: expected a number, got {raw:?}", self.columns[col])))
    }

    fn flag(&self, line: usize, record: &csv::StringRecord, col: usize) -> Result<bool> {
        match record[col].to_ascii_lowercase().as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(self.err(line, format!("{}: expected 0 or 1, got {other:?}", self.columns[col]))),
        }
    }
}

pub fn read_grid(path: &Path) -> Result<GridModel> {
    parse_grid(&path_str(path), &read_text(path)?)
}

pub fn parse_grid(path: &str, text: &str) -> Result<GridModel> {
    let mut sections: HashMap<&str, (usize, String)> = HashMap::new();
    let mut current: Option<&str> = None;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let trimmed = raw.trim();
        if let Some(name) = trimmed.strip_prefix('#') {
            let name = match name.trim().to_ascii_lowercase().as_str() {
                "buses" => "buses",
                "lines" => "lines",
                other => {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: line_no,
                        message: format!("unknown section #{other}"),
                    })
                }
            };
            if sections.contains_key(name) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line_no,
                    message: format!("duplicate section #{name}"),
                });
            }
            sections.insert(name, (line_no + 1, String::new()));
            current = Some(name);
            continue;
        }
        match current {
            Some(name) => {
                let body = &mut sections.get_mut(name).unwrap().1;
                body.push_str(raw);
                body.push('\n');
            }
            None if trimmed.is_empty() => {}
            None => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line_no,
                    message: "content before the #buses section".into(),
                })
            }
        }
    }
    let section = |name: &str| {
        sections.get(name).ok_or_else(|| Error::Parse {
            path: path.into(),
            line: text.lines().count().max(1),
            message: format!("missing #{name} section"),
        })
    };

    let (start, body) = section("buses")?;
    let table = Table::parse(
        path,
        body,
        *start,
        &["bus_id", "is_substation"],
        &["bus_id", "is_substation"],
    )?;
    let (id_col, sub_col) = (table.index("bus_id").unwrap(), table.index("is_substation").unwrap());
    let mut bus_index = HashMap::new();
    let mut buses = Vec::new();
    for (line, rec) in &table.rows {
        let label = rec[id_col].to_string();
        if label.is_empty() {
            return Err(table.err(*line, "empty bus_id"));
        }
        if bus_index.insert(label.clone(), buses.len()).is_some() {
            return Err(table.err(*line, format!("duplicate bus_id {label:?}")));
        }
        buses.push(Bus {
            id: buses.len(),
            label,
            is_substation: table.flag(*line, rec, sub_col)?,
        });
    }

    let (start, body) = section("lines")?;
    let table = Table::parse(
        path,
        body,
        *start,
        &["line_id", "from", "to", "r", "x", "prior", "switchable"],
        &["line_id", "from", "to", "r", "x"],
    )?;
    let col = |name| table.index(name);
    let (id_col, from_col, to_col, r_col, x_col) = (
        col("line_id").unwrap(),
        col("from").unwrap(),
        col("to").unwrap(),
        col("r").unwrap(),
        col("x").unwrap(),
    );
    let mut line_labels = HashMap::new();
    let mut lines = Vec::new();
    for (line, rec) in &table.rows {
        let label = rec[id_col].to_string();
        if label.is_empty() {
            return Err(table.err(*line, "empty line_id"));
        }
        if line_labels.insert(label.clone(), ()).is_some() {
            return Err(table.err(*line, format!("duplicate line_id {label:?}")));
        }
        let bus = |c: usize| {
            bus_index
                .get(&rec[c])
                .copied()
                .ok_or_else(|| table.err(*line, format!("unknown bus {:?}", &rec[c])))
        };
        let prior = match col("prior") {
            Some(c) if !rec[c].is_empty() => Some(table.number(*line, rec, c)?),
            _ => None,
        };
        let switchable = match col("switchable") {
            Some(c) if !rec[c].is_empty() => table.flag(*line, rec, c)?,
            _ => true,
        };
        lines.push(Line {
            id: lines.len(),
            label,
            from_bus: bus(from_col)?,
            to_bus: bus(to_col)?,
            r: table.number(*line, rec, r_col)?,
            x: table.number(*line, rec, x_col)?,
            prior,
            switchable,
        });
    }
    GridModel::new(buses, lines)
}

pub fn format_grid(grid: &GridModel) -> String {
    let mut out = String::from("#buses\nbus_id,is_substation\n");
    for b in grid.buses() {
        out.push_str(&format!("{},{}\n", b.label, u8::from(b.is_substation)));
    }
    out.push_str("#lines\nline_id,from,to,r,x,prior,switchable\n");
    for l in grid.lines() {
        let prior = l.prior.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.label,
            grid.buses()[l.from_bus].label,
            grid.buses()[l.to_bus].label,
            l.r,
            l.x,
            prior,
            u8::from(l.switchable)
        ));
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CovSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    sigma_p: CovSpec,
    sigma_q: CovSpec,
    #[serde(default)]
    sigma_pq: Option<CovSpec>,
    noise_variance: f64,
    #[serde(default)]
    alpha: Option<f64>,
}

impl CovSpec {
    fn to_matrix(&self, name: &str, n: usize) -> Result<DMatrix<f64>> {
        match self {
            CovSpec::Diagonal(d) if d.len() == n => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            CovSpec::Full(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
            _ => Err(Error::InvalidInput(format!(
                "{name} must be a length-{n} vector or a {n}×{n} matrix"
            ))),
        }
    }
}

pub fn read_stats(path: &Path, grid: &GridModel) -> Result<InjectionStatistics> {
    parse_stats(&path_str(path), &read_text(path)?, grid)
}

pub fn parse_stats(path: &str, text: &str, grid: &GridModel) -> Result<InjectionStatistics> {
    let file: StatsFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let n = grid.n();
    let sigma_pq = match &file.sigma_pq {
        Some(spec) => spec.to_matrix("sigma_pq", n)?,
        None => DMatrix::zeros(n, n),
    };
    InjectionStatistics::new(
        file.sigma_p.to_matrix("sigma_p", n)?,
        file.sigma_q.to_matrix("sigma_q", n)?,
        sigma_pq,
        file.noise_variance,
        file.alpha.unwrap_or_else(|| default_alpha(grid)),
    )
}

/// Voltage magnitudes as a `(T+1) × N` matrix in reduced bus order.
pub fn read_voltages(path: &Path, grid: &GridModel) -> Result<DMatrix<f64>> {
    parse_voltages(&path_str(path), &read_text(path)?, grid)
}

pub fn parse_voltages(path: &str, text: &str, grid: &GridModel) -> Result<DMatrix<f64>> {
    let labels: Vec<&str> = grid.load_buses().map(|b| b.label.as_str()).collect();
    let table = Table::parse(path, text, 1, &labels, &labels)?;
    let mut seen = vec![false; labels.len()];
    let mut target = Vec::with_capacity(table.columns.len());
    for c in &table.columns {
        let k = labels.iter().position(|l| l == c).unwrap();
        if std::mem::replace(&mut seen[k], true) {
            return Err(table.err(1, format!("duplicate column {c:?}")));
        }
        target.push(k);
    }
    let mut m = DMatrix::zeros(table.rows.len(), labels.len());
    for (row, (line, rec)) in table.rows.iter().enumerate() {
        for (c, &k) in target.iter().enumerate() {
            let v = table.number(*line, rec, c)?;
            if v <= 0.0 {
                return Err(table.err(*line, format!("voltage magnitude must be positive, got {v}")));
            }
            m[(row, k)] = v;
        }
    }
    Ok(m)
}

pub fn format_voltages(grid: &GridModel, v: &DMatrix<f64>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(grid.load_buses().map(|b| b.label.as_str())).unwrap();
    for row in v.row_iter() {
        w.write_record(row.iter().map(|x| x.to_string())).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

fn read_line_table(path: &str, text: &str, grid: &GridModel, value_col: &str) -> Result<Vec<Option<f64>>> {
    let table = Table::parse(path, text, 1, &["line_id", value_col], &["line_id", value_col])?;
    let (id_col, v_col) = (table.index("line_id").unwrap(), table.index(value_col).unwrap());
    let index: HashMap<&str, usize> = grid.lines().iter().map(|l| (l.label.as_str(), l.id)).collect();
    let mut out = vec![None; grid.num_lines()];
    for (line, rec) in &table.rows {
        let k = *index
            .get(&rec[id_col])
            .ok_or_else(|| table.err(*line, format!("unknown line {:?}", &rec[id_col])))?;
        if out[k].is_some() {
            return Err(table.err(*line, format!("duplicate line {:?}", &rec[id_col])));
        }
        out[k] = Some(table.number(*line, rec, v_col)?);
    }
    Ok(out)
}

/// Binary line statuses; every line must be listed.
pub fn read_status(path: &Path, grid: &GridModel) -> Result<DVector<f64>> {
    parse_status(&path_str(path), &read_text(path)?, grid)
}

pub fn parse_status(path: &str, text: &str, grid: &GridModel) -> Result<DVector<f64>> {
    let values = read_line_table(path, text, grid, "status")?;
    let mut b = DVector::zeros(grid.num_lines());
    for (k, v) in values.into_iter().enumerate() {
        match v {
            Some(s) if s == 0.0 || s == 1.0 => b[k] = s,
            Some(s) => {
                return Err(Error::InvalidInput(format!(
                    "status of line {:?} must be 0 or 1, got {s}",
                    grid.lines()[k].label
                )))
            }
            None => {
                return Err(Error::InvalidInput(format!(
                    "{path}: no status for line {:?}",
                    grid.lines()[k].label
                )))
            }
        }
    }
    Ok(b)
}

pub fn format_status(grid: &GridModel, b: &DVector<f64>) -> String {
    let mut out = String::from("line_id,status\n");
    for (l, v) in grid.lines().iter().zip(b.iter()) {
        out.push_str(&format!("{},{}\n", l.label, u8::from(*v > 0.5)));
    }
    out
}

/// Per-line priors: the prior file wins, then the grid's `prior` column,
/// then 1/2 (no information).
pub fn read_priors(path: Option<&Path>, grid: &GridModel) -> Result<Vec<f64>> {
    let from_file = match path {
        Some(p) => read_line_table(&path_str(p), &read_text(p)?, grid, "prior")?,
        None => vec![None; grid.num_lines()],
    };
    let priors: Vec<f64> = grid
        .lines()
        .iter()
        .zip(from_file)
        .map(|(l, f)| f.or(l.prior).unwrap_or(0.5))
        .collect();
    if let Some((k, p)) = priors.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!(
            "prior of line {:?} must lie in [0, 1], got {p}",
            grid.lines()[k].label
        )));
    }
    Ok(priors)
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: path_str(dir),
            source,
        })?;
    }
    let mut f = fs::File::create(path).map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })?;
    f.write_all(contents).map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}
