//! Predictor sequences from ergodic maps and teacher-labelled datasets.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::WeightSet;
use crate::rng::{stream, RNG_ALGORITHM};

/// Recorded trajectory of an arbitrary map, replayed verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Consecutive iterates, one per row.
    pub points: Array2<f64>,
    pub source: Option<String>,
}

impl Trajectory {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() < 2 || points.ncols() == 0 {
            return Err(config_err(
                "trajectory needs at least two points of dimension >= 1",
            ));
        }
        Ok(Trajectory {
            points,
            source: None,
        })
    }

    /// Reads a header-less CSV, one point per row.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Format(format!("{}: ragged rows", path.display())));
        }
        let k = rows.len();
        let points = Array2::from_shape_vec((k, d), rows.into_iter().flatten().collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut traj = Trajectory::new(points)?;
        traj.source = Some(path.display().to_string());
        Ok(traj)
    }
}

/// Data-generating map.
#[derive(Debug, Clone, PartialEq)]
pub enum MapSpec {
    /// Rotation `x -> (x + rotation) mod 2 pi` on `[0, 2 pi)`.
    ShiftCircle { rotation: f64 },
    /// User-supplied table of iterates; no domain checks.
    Custom(Arc<Trajectory>),
}

impl MapSpec {
    pub fn shift_circle() -> Self {
        MapSpec::ShiftCircle { rotation: 1.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            MapSpec::ShiftCircle { .. } => 1,
            MapSpec::Custom(t) => t.points.ncols(),
        }
    }

    pub fn describe(&self) -> MapDescriptor {
        match self {
            MapSpec::ShiftCircle { rotation } => MapDescriptor {
                kind: "shift_circle".into(),
                parameters: vec![*rotation],
                source: None,
            },
            MapSpec::Custom(t) => MapDescriptor {
                kind: "custom".into(),
                parameters: vec![],
                source: t.source.clone(),
            },
        }
    }
}

/// Map selection as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapConfig {
    ShiftCircle {
        #[serde(default = "unit_rotation")]
        rotation: f64,
    },
    Custom {
        path: PathBuf,
    },
}

fn unit_rotation() -> f64 {
    1.0
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig::ShiftCircle { rotation: 1.0 }
    }
}

impl MapConfig {
    /// Relative custom-map paths are resolved against `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<MapSpec> {
        match self {
            MapConfig::ShiftCircle { rotation } => {
                if !rotation.is_finite() {
                    return Err(config_err("shift rotation must be finite"));
                }
                Ok(MapSpec::ShiftCircle {
                    rotation: *rotation,
                })
            }
            MapConfig::Custom { path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let mut traj = Trajectory::from_csv(&full)?;
                traj.source = Some(path.display().to_string());
                Ok(MapSpec::Custom(Arc::new(traj)))
            }
        }
    }
}

/// Serializable description of the map that produced a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDescriptor {
    pub kind: String,
    pub parameters: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

fn reduce_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// One application of the map.
pub fn iterate_map(spec: &MapSpec, x: &[f64]) -> Result<Vec<f64>> {
    match spec {
        MapSpec::ShiftCircle { rotation } => {
            if x.len() != 1 {
                return Err(config_err(format!(
                    "shift_circle acts on scalars, got dimension {}",
                    x.len()
                )));
            }
            let v = x[0];
            if !(0.0..TAU).contains(&v) {
                return Err(Error::Domain(format!("{v} is outside [0, 2pi)")));
            }
            Ok(vec![reduce_angle(v + rotation)])
        }
        MapSpec::Custom(traj) => {
            if x.len() != traj.points.ncols() {
                return Err(config_err("point dimension does not match trajectory"));
            }
            let last = traj.points.nrows() - 1;
            let pos = traj
                .points
                .outer_iter()
                .take(last)
                .position(|row| row.iter().zip(x).all(|(a, b)| a == b));
            match pos {
                Some(i) => Ok(traj.points.row(i + 1).to_vec()),
                None => Err(Error::Domain(
                    "point has no recorded successor in the trajectory table".into(),
                )),
            }
        }
    }
}

/// `m` input sequences of length `L + 1` with optional targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    /// m x (L+1) x d, each sequence ordered `x_{-L}, ..., x_0`.
    pub sequences: Array3<f64>,
    pub targets: Option<Array1<f64>>,
    pub seed: u64,
    pub map: MapDescriptor,
}

impl SequenceBatch {
    pub fn m(&self) -> usize {
        self.sequences.len_of(Axis(0))
    }

    pub fn memory(&self) -> usize {
        self.sequences.len_of(Axis(1)) - 1
    }

    pub fn d(&self) -> usize {
        self.sequences.len_of(Axis(2))
    }

    pub fn sequence(&self, i: usize) -> ArrayView2<'_, f64> {
        self.sequences.index_axis(Axis(0), i)
    }

    /// All samples' `x_{-k}`, m x d.
    pub fn lag(&self, k: usize) -> ArrayView2<'_, f64> {
        self.sequences.index_axis(Axis(1), self.memory() - k)
    }

    pub fn targets(&self) -> Result<&Array1<f64>> {
        self.targets
            .as_ref()
            .ok_or_else(|| Error::Precondition("batch has no targets; label it first".into()))
    }

    pub fn metadata(&self) -> BatchMetadata {
        BatchMetadata {
            schema: 1,
            seed: self.seed,
            m: self.m(),
            memory: self.memory(),
            d: self.d(),
            map: self.map.clone(),
            rng: RNG_ALGORITHM.to_string(),
            labeled: self.targets.is_some(),
        }
    }
}

/// Sidecar metadata record of a batch CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetadata {
    pub schema: u32,
    pub seed: u64,
    pub m: usize,
    #[serde(rename = "L")]
    pub memory: usize,
    pub d: usize,
    pub map: MapDescriptor,
    pub rng: String,
    pub labeled: bool,
}

/// Draws `m` sequences: the oldest point from the invariant measure, the
/// rest by iterating the map. Sample `i` uses RNG stream `i` of `seed`.
pub fn sample_batch(spec: &MapSpec, m: usize, memory: usize, seed: u64) -> Result<SequenceBatch> {
    if m == 0 {
        return Err(config_err("sample count m must be >= 1"));
    }
    let d = spec.dim();
    let len = memory + 1;
    if let MapSpec::Custom(t) = spec {
        if t.points.nrows() < len {
            return Err(config_err(format!(
                "trajectory has {} points, need at least {len}",
                t.points.nrows()
            )));
        }
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = stream(seed, i as u64);
            let mut out = Vec::with_capacity(len * d);
            match spec {
                MapSpec::ShiftCircle { .. } => {
                    let mut x = vec![reduce_angle(rng.random::<f64>() * TAU)];
                    out.extend_from_slice(&x);
                    for _ in 0..memory {
                        x = iterate_map(spec, &x)?;
                        out.extend_from_slice(&x);
                    }
                }
                MapSpec::Custom(t) => {
                    let start = rng.random_range(0..=t.points.nrows() - len);
                    for r in start..start + len {
                        out.extend(t.points.row(r).iter().copied());
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let sequences = Array3::from_shape_vec((m, len, d), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(SequenceBatch {
        sequences,
        targets: None,
        seed,
        map: spec.describe(),
    })
}

/// Attaches `F*(x) = teacher(x)` to every sequence.
pub fn label_with_teacher(batch: &SequenceBatch, teacher: &WeightSet) -> Result<SequenceBatch> {
    if teacher.config.memory != batch.memory() || teacher.config.d != batch.d() {
        return Err(config_err(format!(
            "teacher expects (L={}, d={}), batch has (L={}, d={})",
            teacher.config.memory,
            teacher.config.d,
            batch.memory(),
            batch.d()
        )));
    }
    let pass = crate::batch::forward(teacher, batch)?;
    let mut out = batch.clone();
    out.targets = Some(pass.outputs);
    Ok(out)
}

pub const BATCH_CSV_HEADER: [&str; 5] = ["sample", "k", "dim", "value", "target"];

/// Writes `<stem>.csv` and `<stem>.json` next to each other.
pub fn write_batch(batch: &SequenceBatch, csv_path: &Path, meta_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
    w.write_record(BATCH_CSV_HEADER)?;
    let memory = batch.memory();
    for i in 0..batch.m() {
        let target = batch
            .targets
            .as_ref()
            .map(|t| t[i].to_string())
            .unwrap_or_default();
        let seq = batch.sequence(i);
        for (pos, row) in seq.outer_iter().enumerate() {
            let k = memory - pos;
            for (c, v) in row.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    k.to_string(),
                    c.to_string(),
                    v.to_string(),
                    target.clone(),
                ])?;
            }
        }
    }
    w.flush()?;
    let mut meta = BufWriter::new(File::create(meta_path)?);
    serde_json::to_writer_pretty(&mut meta, &batch.metadata())?;
    meta.write_all(b"\n")?;
    meta.flush()?;
    Ok(())
}

pub fn read_batch(csv_path: &Path, meta_path: &Path) -> Result<SequenceBatch> {
    let meta: BatchMetadata = serde_json::from_reader(File::open(meta_path)?)?;
    let (m, len, d) = (meta.m, meta.memory + 1, meta.d);
    let mut sequences = Array3::<f64>::zeros((m, len, d));
    let mut targets = meta.labeled.then(|| Array1::<f64>::zeros(m));
    let mut filled = 0usize;
    let mut rdr = csv::Reader::from_path(csv_path)?;
    if rdr.headers()?.iter().ne(BATCH_CSV_HEADER) {
        return Err(Error::Format(format!(
            "{}: expected header {}",
            csv_path.display(),
            BATCH_CSV_HEADER.join(",")
        )));
    }
    let bad = |msg: String| Error::Format(format!("{}: {msg}", csv_path.display()));
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("short row".into()));
        let idx = |i: usize| -> Result<usize> {
            field(i)?
                .parse()
                .map_err(|e| bad(format!("bad index: {e}")))
        };
        let (i, k, c) = (idx(0)?, idx(1)?, idx(2)?);
        if i >= m || k >= len || c >= d {
            return Err(bad(format!("row ({i}, {k}, {c}) outside declared shape")));
        }
        let v: f64 = field(3)?
            .parse()
            .map_err(|e| bad(format!("bad value: {e}")))?;
        sequences[[i, meta.memory - k, c]] = v;
        if let Some(t) = targets.as_mut() {
            t[i] = field(4)?
                .parse()
                .map_err(|e| bad(format!("bad target: {e}")))?;
        }
        filled += 1;
    }
    if filled != m * len * d {
        return Err(bad(format!(
            "expected {} rows, found {filled}",
            m * len * d
        )));
    }
    Ok(SequenceBatch {
        sequences,
        targets,
        seed: meta.seed,
        map: meta.map,
    })
}
