//! On-disk formats: a data directory of CSV tables plus `grid.toml`, field
//! files for predictions, metric reports and training logs.
//!
//! Every CSV starts with a comment line `# physkrig <schema> v<version>`.
//! Readers accept files without it but reject a different schema or
//! version. See FORMATS.md for the column definitions.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geo_graph::{NodeSet, WindSeries};
use crate::loss::AodField;
use crate::metrics::{Report, Scores};
use crate::scalar::Real;
use crate::synth::{AodRaster, ScenarioSpec, StationSample, TruthField};
use crate::trainer::{Dataset, EpochLog, GridSpec};

pub const SCHEMA_VERSION: u32 = 1;

pub const NODES_FILE: &str = "nodes.csv";
pub const WIND_FILE: &str = "wind.csv";
pub const EMISSIONS_FILE: &str = "emissions.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const AOD_FILE: &str = "aod.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const GRID_FILE: &str = "grid.toml";
pub const SCENARIO_FILE: &str = "scenario.toml";

/// Header comment for `schema`.
pub fn schema_line(schema: &str) -> String {
    format!("# physkrig {schema} v{SCHEMA_VERSION}")
}

fn schema_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Opens a CSV writer after emitting the schema line.
pub fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", schema_line(schema))?;
    Ok(csv::Writer::from_writer(w))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

/// Parses every row of a CSV with exactly the `columns` header, returning
/// each row with its 1-based line number.
pub fn read_csv<R: DeserializeOwned>(path: &Path, schema: &str, columns: &[&str]) -> Result<Vec<(u64, R)>> {
    let text = fs::read_to_string(path).map_err(|e| schema_err(path, 0, format!("cannot read: {e}")))?;
    if let Some(first) = text.lines().next() {
        if first.starts_with("# physkrig") && first.trim_end() != schema_line(schema) {
            return Err(schema_err(
                path,
                1,
                format!("expected header {:?}, found {first:?}", schema_line(schema)),
            ));
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| schema_err(path, 1, e.to_string()))?.clone();
    if headers.iter().ne(columns.iter().copied()) {
        return Err(schema_err(
            path,
            1,
            format!("expected columns {}, found {}", columns.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                let line = rec.position().map_or(0, |p| p.line());
                let row = rec.deserialize(Some(&headers)).map_err(|e| schema_err(path, line, e.to_string()))?;
                rows.push((line, row));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(schema_err(path, line, e.to_string()));
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Station,
    Grid,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    node_id: String,
    x_km: f64,
    y_km: f64,
    kind: NodeKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct WindRow {
    time: usize,
    node_id: String,
    u_ms: f64,
    v_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmissionRow {
    time: usize,
    node_id: String,
    emission: f64,
}

/// `time,node_id,pm25`: observations, truth and predictions.
#[derive(Debug, Serialize, Deserialize)]
pub struct FieldRow {
    pub time: usize,
    pub node_id: String,
    pub pm25: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AodRow {
    time: usize,
    node_id: String,
    aod: Option<f64>,
    valid: u8,
}

/// `grid.toml`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub schema_version: u32,
    pub nx: usize,
    pub ny: usize,
    pub cell_km: f64,
}

/// Per-node time series read from a `time,node_id,...` table, filled in
/// node-major order; every node/step pair must appear exactly once.
struct Table<'a> {
    path: &'a Path,
    index: &'a HashMap<String, usize>,
    steps: usize,
    filled: Vec<bool>,
}

impl<'a> Table<'a> {
    fn new(path: &'a Path, index: &'a HashMap<String, usize>, nodes: usize, steps: usize) -> Self {
        Self {
            path,
            index,
            steps,
            filled: vec![false; nodes * steps],
        }
    }

    fn slot(&mut self, line: u64, time: usize, id: &str) -> Result<usize> {
        let node = *self
            .index
            .get(id)
            .ok_or_else(|| schema_err(self.path, line, format!("unknown node_id {id:?}")))?;
        if time >= self.steps {
            return Err(schema_err(self.path, line, format!("time {time} outside 0..{}", self.steps)));
        }
        let k = node * self.steps + time;
        if std::mem::replace(&mut self.filled[k], true) {
            return Err(schema_err(self.path, line, format!("duplicate row for node {id:?} at time {time}")));
        }
        Ok(k)
    }

    /// Checks that every node in `nodes` has every step.
    fn complete(&self, nodes: impl Iterator<Item = usize>, names: &[String]) -> Result<()> {
        for i in nodes {
            if let Some(t) = (0..self.steps).find(|&t| !self.filled[i * self.steps + t]) {
                return Err(schema_err(self.path, 0, format!("node {:?} has no row at time {t}", names[i])));
            }
        }
        Ok(())
    }
}

fn finite(path: &Path, line: u64, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(schema_err(path, line, format!("{name} is not finite")))
    }
}

/// Reads a data directory. Stations keep their file order and come first;
/// grid nodes follow in raster order.
pub fn load_dataset<T: Real>(dir: &Path) -> Result<Dataset<T>> {
    let path = |f: &str| dir.join(f);
    let nodes_path = path(NODES_FILE);
    let rows: Vec<(u64, NodeRow)> = read_csv(&nodes_path, "nodes", &["node_id", "x_km", "y_km", "kind"])?;
    let mut stations = Vec::new();
    let mut grid_rows = Vec::new();
    for (line, r) in rows {
        finite(&nodes_path, line, "x_km", r.x_km)?;
        finite(&nodes_path, line, "y_km", r.y_km)?;
        match r.kind {
            NodeKind::Station => stations.push(r),
            NodeKind::Grid => grid_rows.push((line, r)),
        }
    }
    let grid = if grid_rows.is_empty() {
        None
    } else {
        let gpath = path(GRID_FILE);
        let text = fs::read_to_string(&gpath).map_err(|e| schema_err(&gpath, 0, format!("cannot read: {e}")))?;
        let g: GridFile = toml::from_str(&text).map_err(|e| schema_err(&gpath, 0, e.to_string()))?;
        if g.schema_version != SCHEMA_VERSION {
            return Err(schema_err(&gpath, 0, format!("unsupported schema_version {}", g.schema_version)));
        }
        if grid_rows.len() != g.nx * g.ny {
            return Err(schema_err(
                &nodes_path,
                0,
                format!("{} grid nodes for a {} x {} grid", grid_rows.len(), g.nx, g.ny),
            ));
        }
        let mut slots: Vec<Option<NodeRow>> = (0..g.nx * g.ny).map(|_| None).collect();
        for (line, r) in grid_rows {
            let (cx, cy) = ((r.x_km / g.cell_km).floor(), (r.y_km / g.cell_km).floor());
            if cx < 0.0 || cy < 0.0 || cx as usize >= g.nx || cy as usize >= g.ny {
                return Err(schema_err(&nodes_path, line, format!("grid node {:?} lies outside the grid", r.node_id)));
            }
            let k = cy as usize * g.nx + cx as usize;
            if slots[k].replace(r).is_some() {
                return Err(schema_err(&nodes_path, line, format!("two grid nodes in cell {k}")));
            }
        }
        let offset = stations.len();
        stations.extend(slots.into_iter().map(|r| r.expect("every cell filled")));
        Some(GridSpec {
            nx: g.nx,
            ny: g.ny,
            cell_km: g.cell_km,
            offset,
        })
    };
    let all = stations;
    let n = all.len();
    let station_count = grid.map_or(n, |g| g.offset);
    let ids: Vec<String> = all.iter().map(|r| r.node_id.clone()).collect();
    let index: HashMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    if index.len() != n {
        return Err(schema_err(&nodes_path, 0, "duplicate node_id"));
    }
    let nodes = NodeSet::new(all.iter().map(|r| [T::lit(r.x_km), T::lit(r.y_km)]).collect())
        .map_err(|e| schema_err(&nodes_path, 0, e.to_string()))?;

    let wind_path = path(WIND_FILE);
    let wind_rows: Vec<(u64, WindRow)> = read_csv(&wind_path, "wind", &["time", "node_id", "u_ms", "v_ms"])?;
    let steps = wind_rows.iter().map(|(_, r)| r.time + 1).max().unwrap_or(0);
    if steps == 0 {
        return Err(schema_err(&wind_path, 0, "no wind rows"));
    }
    let mut table = Table::new(&wind_path, &index, n, steps);
    let mut wind = vec![[T::zero(); 2]; n * steps];
    for (line, r) in &wind_rows {
        let k = table.slot(*line, r.time, &r.node_id)?;
        let (u, v) = (finite(&wind_path, *line, "u_ms", r.u_ms)?, finite(&wind_path, *line, "v_ms", r.v_ms)?);
        wind[r.time * n + k / steps] = [T::lit(u), T::lit(v)];
    }
    table.complete(0..n, &ids)?;

    let em_path = path(EMISSIONS_FILE);
    let mut table = Table::new(&em_path, &index, n, steps);
    let mut emission = vec![T::zero(); n * steps];
    for (line, r) in read_csv::<EmissionRow>(&em_path, "emissions", &["time", "node_id", "emission"])? {
        let k = table.slot(line, r.time, &r.node_id)?;
        emission[k] = T::lit(finite(&em_path, line, "emission", r.emission)?);
    }
    table.complete(0..n, &ids)?;

    let obs_path = path(OBSERVATIONS_FILE);
    let mut table = Table::new(&obs_path, &index, n, steps);
    let mut pollution = vec![T::zero(); n * steps];
    for (line, r) in read_csv::<FieldRow>(&obs_path, "observations", &["time", "node_id", "pm25"])? {
        let k = table.slot(line, r.time, &r.node_id)?;
        if k / steps >= station_count {
            return Err(schema_err(&obs_path, line, format!("observation for grid node {:?}", r.node_id)));
        }
        pollution[k] = T::lit(finite(&obs_path, line, "pm25", r.pm25)?);
    }
    table.complete(0..station_count, &ids)?;

    let aod_path = path(AOD_FILE);
    let aod = if aod_path.exists() {
        let mut table = Table::new(&aod_path, &index, n, steps);
        let mut values = vec![T::zero(); n * steps];
        let mut valid = vec![T::zero(); n * steps];
        for (line, r) in read_csv::<AodRow>(&aod_path, "aod", &["time", "node_id", "aod", "valid"])? {
            let k = table.slot(line, r.time, &r.node_id)?;
            match (r.valid, r.aod) {
                (0, _) => {}
                (1, Some(v)) => {
                    values[k] = T::lit(finite(&aod_path, line, "aod", v)?);
                    valid[k] = T::one();
                }
                (1, None) => return Err(schema_err(&aod_path, line, "valid row without an aod value")),
                (f, _) => return Err(schema_err(&aod_path, line, format!("valid must be 0 or 1, got {f}"))),
            }
        }
        table.complete(0..n, &ids)?;
        Some(AodField::new(Tensor::new(vec![n, steps], values)?, Tensor::new(vec![n, steps], valid)?)?)
    } else {
        None
    };

    let dataset = Dataset {
        ids,
        nodes,
        steps,
        wind: WindSeries::new(steps, n, wind)?,
        emission,
        pollution,
        stations: (0..station_count).collect(),
        aod,
        grid,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// A `time,node_id,pm25` table keyed by node.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTable {
    /// Node ids in first-appearance order.
    pub ids: Vec<String>,
    /// `(time, value)` pairs per node, sorted by time.
    pub series: Vec<Vec<(usize, f64)>>,
}

impl FieldTable {
    pub fn read(path: &Path, schema: &str) -> Result<Self> {
        let rows: Vec<(u64, FieldRow)> = read_csv(path, schema, &["time", "node_id", "pm25"])?;
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut ids = Vec::new();
        let mut series: Vec<Vec<(usize, f64)>> = Vec::new();
        for (line, r) in rows {
            finite(path, line, "pm25", r.pm25)?;
            let i = *index.entry(r.node_id.clone()).or_insert_with(|| {
                ids.push(r.node_id.clone());
                series.push(Vec::new());
                ids.len() - 1
            });
            series[i].push((r.time, r.pm25));
        }
        for (i, s) in series.iter_mut().enumerate() {
            s.sort_by_key(|p| p.0);
            if s.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(schema_err(path, 0, format!("duplicate time for node {:?}", ids[i])));
            }
        }
        Ok(Self { ids, series })
    }

    pub fn get(&self, id: &str) -> Option<&[(usize, f64)]> {
        self.ids.iter().position(|x| x == id).map(|i| self.series[i].as_slice())
    }

    /// Value of every node at `time`.
    pub fn snapshot(&self, time: usize) -> Vec<(String, f64)> {
        self.ids
            .iter()
            .zip(&self.series)
            .filter_map(|(id, s)| s.binary_search_by_key(&time, |p| p.0).ok().map(|k| (id.clone(), s[k].1)))
            .collect()
    }
}

/// Writes `values [ids, steps]` with times starting at `first_step`.
pub fn write_field<T: Real>(path: &Path, schema: &str, ids: &[String], first_step: usize, values: &Tensor<T>) -> Result<()> {
    let steps = values.shape().get(1).copied().unwrap_or(0);
    if values.rank() != 2 || values.shape()[0] != ids.len() {
        return Err(Error::Shape {
            op: "write_field",
            left: values.shape().to_vec(),
            right: vec![ids.len()],
        });
    }
    let mut w = csv_writer(path, schema)?;
    // time-major, matching the input tables
    for t in 0..steps {
        for (i, id) in ids.iter().enumerate() {
            w.serialize(FieldRow {
                time: first_step + t,
                node_id: id.clone(),
                pm25: values.at(&[i, t]).as_f64(),
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// `node_id,mae,rmse,r2` rows followed by the pooled row `ALL`.
pub fn write_report<W: Write>(out: W, report: &Report) -> Result<()> {
    let mut out = out;
    writeln!(out, "{}", schema_line("report"))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node_id", "mae", "rmse", "r2"]).map_err(csv_err)?;
    let row = |w: &mut csv::Writer<W>, id: &str, s: &Scores| {
        w.write_record([id.to_string(), s.mae.to_string(), s.rmse.to_string(), fmt_opt(s.r2)])
            .map_err(csv_err)
    };
    for (id, s) in &report.nodes {
        row(&mut w, id, s)?;
    }
    row(&mut w, "ALL", &report.pooled)?;
    w.flush()?;
    Ok(())
}

/// `epoch,train_loss,val_mae,val_rmse,val_r2`.
pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv_writer(path, "train-log")?;
    w.write_record(["epoch", "train_loss", "val_mae", "val_rmse", "val_r2"]).map_err(csv_err)?;
    for e in log {
        let v = e.val.as_ref();
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            fmt_opt(v.map(|s| s.mae)),
            fmt_opt(v.map(|s| s.rmse)),
            fmt_opt(v.and_then(|s| s.r2)),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything `simulate` writes.
pub struct SynthBundle<'a> {
    pub spec: &'a ScenarioSpec,
    pub truth: &'a TruthField,
    pub stations: &'a StationSample,
    pub aod: &'a AodRaster,
}

/// Writes a data directory: stations `s000..` and every grid cell
/// `g0000..` as nodes, with truth for all of them.
pub fn write_synth(dir: &Path, bundle: &SynthBundle<'_>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let SynthBundle {
        spec,
        truth,
        stations,
        aod,
    } = *bundle;
    let steps = truth.steps;
    let mut nodes: Vec<(String, usize, NodeKind)> = stations
        .cells
        .iter()
        .enumerate()
        .map(|(i, &k)| (format!("s{i:03}"), k, NodeKind::Station))
        .collect();
    nodes.extend((0..truth.cells()).map(|k| (format!("g{k:04}"), k, NodeKind::Grid)));
    let center = |k: usize| {
        [
            ((k % truth.nx) as f64 + 0.5) * truth.cell_km,
            ((k / truth.nx) as f64 + 0.5) * truth.cell_km,
        ]
    };
    let mut written = Vec::new();
    let mut file = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };

    let mut w = csv_writer(&file(NODES_FILE), "nodes")?;
    for (id, k, kind) in &nodes {
        let [x, y] = center(*k);
        w.serialize(NodeRow {
            node_id: id.clone(),
            x_km: x,
            y_km: y,
            kind: *kind,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;

    let grid = GridFile {
        schema_version: SCHEMA_VERSION,
        nx: truth.nx,
        ny: truth.ny,
        cell_km: truth.cell_km,
    };
    fs::write(file(GRID_FILE), toml::to_string(&grid).expect("grid serializes"))?;
    let scenario = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(
        file(SCENARIO_FILE),
        format!("# physkrig scenario v{SCHEMA_VERSION}\n{scenario}"),
    )?;

    let mut ww = csv_writer(&file(WIND_FILE), "wind")?;
    let mut we = csv_writer(&file(EMISSIONS_FILE), "emissions")?;
    let mut wt = csv_writer(&file(TRUTH_FILE), "truth")?;
    let mut wa = csv_writer(&file(AOD_FILE), "aod")?;
    let mut wo = csv_writer(&file(OBSERVATIONS_FILE), "observations")?;
    for t in 0..steps {
        for (i, (id, k, kind)) in nodes.iter().enumerate() {
            let [u, v] = truth.wind_at(*k, t);
            ww.serialize(WindRow {
                time: t,
                node_id: id.clone(),
                u_ms: u,
                v_ms: v,
            })
            .map_err(csv_err)?;
            we.serialize(EmissionRow {
                time: t,
                node_id: id.clone(),
                emission: truth.emission[k * steps + t],
            })
            .map_err(csv_err)?;
            wt.serialize(FieldRow {
                time: t,
                node_id: id.clone(),
                pm25: truth.at(*k, t),
            })
            .map_err(csv_err)?;
            let ok = aod.valid[k * steps + t];
            wa.serialize(AodRow {
                time: t,
                node_id: id.clone(),
                aod: ok.then(|| aod.values[k * steps + t]),
                valid: u8::from(ok),
            })
            .map_err(csv_err)?;
            if *kind == NodeKind::Station {
                wo.serialize(FieldRow {
                    time: t,
                    node_id: id.clone(),
                    pm25: stations.observed[i * steps + t],
                })
                .map_err(csv_err)?;
            }
        }
    }
    for w in [&mut ww, &mut we, &mut wt, &mut wa, &mut wo] {
        w.flush()?;
    }
    Ok(written)
}
