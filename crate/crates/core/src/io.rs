//! File formats: grid fields (JSON and CSV), problem specs, and the tidy
//! CSV tables emitted by the solver and the dynamics.
//!
//! Floats are written in shortest round-trip form, so every reader returns
//! bit-identical values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::grid::{Axis, CostGrid, CostKind, Grid, GridDensity};
use crate::sinkhorn::IterRecord;
use crate::uot::ProblemSpec;

fn io_err(path: &Path, e: impl std::fmt::Display) -> UotError {
    UotError::Io(format!("{}: {e}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| UotError::Format(e.to_string()))
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| UotError::Format(e.to_string()))
}

/// Values on a grid: `{dimension, axes: [{lo, hi, n}], values, c_lower?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFile {
    pub dimension: usize,
    pub axes: Vec<Axis>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_lower: Option<f64>,
}

impl FieldFile {
    pub fn new(grid: &Grid, values: &[f64], c_lower: Option<f64>) -> Self {
        Self {
            dimension: grid.dim(),
            axes: grid.axes.clone(),
            values: values.to_vec(),
            c_lower,
        }
    }

    pub fn from_density(d: &GridDensity) -> Self {
        Self::new(&d.grid, &d.values, Some(d.c_lower))
    }

    pub fn grid(&self) -> Result<Grid> {
        if self.dimension != self.axes.len() {
            return Err(UotError::Format(format!(
                "dimension {} but {} axes",
                self.dimension,
                self.axes.len()
            )));
        }
        let axes = self.axes.iter().map(|a| Axis::new(a.lo, a.hi, a.n)).collect::<Result<Vec<_>>>()?;
        let g = Grid::new(axes)?;
        if g.len() != self.values.len() {
            return Err(UotError::GridMismatch(format!(
                "{} values for {} cells",
                self.values.len(),
                g.len()
            )));
        }
        Ok(g)
    }

    /// A density; the witness defaults to the minimum value.
    pub fn density(&self) -> Result<GridDensity> {
        let g = self.grid()?;
        match self.c_lower {
            Some(c) => GridDensity::new(g, self.values.clone(), c),
            None => GridDensity::with_min_witness(g, self.values.clone()),
        }
    }

    /// CSV form: `#`-prefixed header lines, then one value per line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# dimension,{}\n", self.dimension);
        for a in &self.axes {
            s += &format!("# axis,{},{},{}\n", a.lo, a.hi, a.n);
        }
        if let Some(c) = self.c_lower {
            s += &format!("# c_lower,{c}\n");
        }
        s += "value\n";
        for v in &self.values {
            s += &format!("{v}\n");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| UotError::Format(m);
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("'{s}': {e}")));
        let mut dimension = None;
        let mut axes = vec![];
        let mut c_lower = None;
        let mut values = vec![];
        let mut header_seen = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                let parts: Vec<&str> = rest.trim().split(',').collect();
                match parts.as_slice() {
                    ["dimension", d] => dimension = Some(d.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?),
                    ["axis", lo, hi, n] => axes.push(Axis {
                        lo: parse(lo)?,
                        hi: parse(hi)?,
                        n: n.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    }),
                    ["c_lower", c] => c_lower = Some(parse(c)?),
                    _ => return Err(bad(format!("unknown header line '{line}'"))),
                }
            } else if !header_seen && line == "value" {
                header_seen = true;
            } else {
                values.push(parse(line)?);
            }
        }
        let dimension = dimension.ok_or_else(|| bad("missing '# dimension' header".into()))?;
        let f = Self {
            dimension,
            axes,
            values,
            c_lower,
        };
        f.grid()?;
        Ok(f)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "csv") {
            write_text(path, &self.to_csv())
        } else {
            write_text(path, &to_json(self)?)
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        if path.extension().is_some_and(|e| e == "csv") {
            Self::from_csv(&text)
        } else {
            let f: Self = from_json(&text)?;
            f.grid()?;
            Ok(f)
        }
    }
}

/// Inline field or a path relative to the referencing file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldRef {
    Inline(FieldFile),
    Path(PathBuf),
}

impl FieldRef {
    fn resolve(&self, base: &Path) -> Result<FieldFile> {
        match self {
            FieldRef::Inline(f) => Ok(f.clone()),
            FieldRef::Path(p) => FieldFile::read(&base.join(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    /// Required for `tabulated`, row-major with the source index slowest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            kind: CostKind::Zero,
            values: None,
        }
    }
}

/// `{f, g, cost: {kind, values?}, delta}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub f: FieldRef,
    pub g: FieldRef,
    #[serde(default)]
    pub cost: CostSpec,
    pub delta: f64,
}

impl ProblemFile {
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        let values = (spec.cost.kind == CostKind::Tabulated).then(|| spec.cost.values.clone());
        Self {
            f: FieldRef::Inline(FieldFile::from_density(&spec.f)),
            g: FieldRef::Inline(FieldFile::from_density(&spec.g)),
            cost: CostSpec {
                kind: spec.cost.kind,
                values,
            },
            delta: spec.delta,
        }
    }

    pub fn into_spec(&self, base: &Path) -> Result<ProblemSpec> {
        let f = self.f.resolve(base)?.density()?;
        let g = self.g.resolve(base)?.density()?;
        let cost = match (self.cost.kind, &self.cost.values) {
            (CostKind::Zero, _) => CostGrid::zero(&f.grid, &g.grid),
            (CostKind::SquaredDistance, _) => CostGrid::squared_distance(&f.grid, &g.grid)?,
            (CostKind::Distance, _) => CostGrid::distance(&f.grid, &g.grid)?,
            (CostKind::Tabulated, Some(v)) => CostGrid::new(f.len(), g.len(), v.clone(), CostKind::Tabulated)?,
            (CostKind::Tabulated, None) => return Err(UotError::Format("tabulated cost needs values".into())),
        };
        ProblemSpec::new(f, g, cost, self.delta)
    }
}

pub fn load_problem(path: &Path) -> Result<ProblemSpec> {
    let pf: ProblemFile = from_json(&read_text(path)?)?;
    pf.into_spec(path.parent().unwrap_or(Path::new(".")))
}

fn csv_err(e: csv::Error) -> UotError {
    UotError::Format(e.to_string())
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| UotError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| UotError::Format(e.to_string()))
}

/// One row per iteration.
pub fn iterations_csv(records: &[IterRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    csv_string(w)
}

pub fn read_iterations_csv(text: &str) -> Result<Vec<IterRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// One observation per row: time, characteristic label, position, density
/// and accumulated mass factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub characteristic: usize,
    pub x: Vec<f64>,
    pub mu: f64,
    pub mass_factor: f64,
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> Result<String> {
    let d = rows.first().map_or(1, |r| r.x.len());
    let mut w = csv::Writer::from_writer(vec![]);
    let mut header = vec!["t".to_string(), "characteristic".to_string()];
    header.extend((0..d).map(|k| format!("x{k}")));
    header.extend(["mu".to_string(), "mass_factor".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.x.len() != d {
            return Err(UotError::Format("rows of mixed dimension".into()));
        }
        let mut rec = vec![r.t.to_string(), r.characteristic.to_string()];
        rec.extend(r.x.iter().map(f64::to_string));
        rec.extend([r.mu.to_string(), r.mass_factor.to_string()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    csv_string(w)
}

pub fn read_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let d = rd
        .headers()
        .map_err(csv_err)?
        .len()
        .checked_sub(4)
        .filter(|&d| d > 0)
        .ok_or_else(|| UotError::Format("too few columns".into()))?;
    let num = |s: &str| s.parse::<f64>().map_err(|e| UotError::Format(format!("'{s}': {e}")));
    let mut rows = vec![];
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let f: Vec<&str> = rec.iter().collect();
        rows.push(TrajectoryRow {
            t: num(f[0])?,
            characteristic: f[1].parse().map_err(|e| UotError::Format(format!("'{}': {e}", f[1])))?,
            x: f[2..2 + d].iter().map(|s| num(s)).collect::<Result<_>>()?,
            mu: num(f[2 + d])?,
            mass_factor: num(f[3 + d])?,
        });
    }
    Ok(rows)
}

/// Generic tidy table `(series, t, value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub series: String,
    pub t: f64,
    pub value: f64,
}

pub fn tidy_csv(rows: &[TidyRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    csv_string(w)
}

pub fn read_tidy_csv(text: &str) -> Result<Vec<TidyRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}
