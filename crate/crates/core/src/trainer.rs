//! Explicit-Euler integration of the truncated gradient flow.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch;
use crate::data::SequenceBatch;
use crate::error::{config_err, Error, Result};
use crate::grad::{evaluate, GradientSet, Scaling};
use crate::model::{NetConfig, Truncation, WeightSet};
use crate::rng::stream;
use crate::snapshot;

/// Normal law given by mean and variance (not standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalLaw {
    pub mean: f64,
    pub variance: f64,
}

impl NormalLaw {
    pub const fn new(mean: f64, variance: f64) -> Self {
        NormalLaw { mean, variance }
    }

    fn distribution(&self) -> Result<Normal<f64>> {
        if !(self.variance.is_finite() && self.variance >= 0.0 && self.mean.is_finite()) {
            return Err(config_err(format!(
                "normal law needs finite mean and variance >= 0, got N({}, {})",
                self.mean, self.variance
            )));
        }
        Normal::new(self.mean, self.variance.sqrt()).map_err(|e| config_err(e.to_string()))
    }
}

/// Per-block iid initialization laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub xh: NormalLaw,
    pub hh: NormalLaw,
    pub hy: NormalLaw,
}

impl InitSpec {
    /// Teacher laws for width `n_t`.
    pub fn teacher(n_t: usize) -> Self {
        let v = 1.0 / (n_t as f64).powi(2);
        InitSpec {
            xh: NormalLaw::new(1.0, 1.0),
            hh: NormalLaw::new(0.0, v),
            hy: NormalLaw::new(0.0, v),
        }
    }

    /// Student laws for width `n_s`.
    pub fn student(n_s: usize) -> Self {
        let v = 10.0 / (n_s as f64).powi(2);
        InitSpec {
            xh: NormalLaw::new(0.0, 5.0),
            hh: NormalLaw::new(0.0, v),
            hy: NormalLaw::new(0.0, v),
        }
    }
}

/// Draws every entry independently. Blocks use RNG streams 0 (xh),
/// 1 (hh) and 2 (hy) of `seed`, filled in row-major order.
pub fn init_weights(config: NetConfig, spec: &InitSpec, seed: u64) -> Result<WeightSet> {
    config.validate()?;
    let (n, d) = (config.n, config.d);
    let (xh, hh, hy) = (
        spec.xh.distribution()?,
        spec.hh.distribution()?,
        spec.hy.distribution()?,
    );
    let mut r = stream(seed, 0);
    let w_xh = Array2::from_shape_simple_fn((n, d), || xh.sample(&mut r));
    let mut r = stream(seed, 1);
    let w_hh = Array2::from_shape_simple_fn((n, n), || hh.sample(&mut r));
    let mut r = stream(seed, 2);
    let w_hy = Array1::from_shape_simple_fn(n, || hy.sample(&mut r));
    WeightSet::from_parts(config, w_xh, w_hh, w_hy, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub steps: usize,
    pub scaling: Scaling,
    pub snapshot_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(config_err(format!(
                "step size must be positive, got {}",
                self.beta
            )));
        }
        if self.steps == 0 {
            return Err(config_err("steps must be >= 1"));
        }
        if self.snapshot_every == 0 {
            return Err(config_err("snapshot_every must be >= 1"));
        }
        Ok(())
    }

    pub fn time_at(&self, step: usize) -> f64 {
        step as f64 * self.beta
    }
}

/// Empirical risk `(1/m) sum 0.5 (F - F*)^2`.
pub fn loss(w: &WeightSet, batch: &SequenceBatch) -> Result<f64> {
    let targets = batch.targets()?;
    let pass = batch::forward(w, batch)?;
    Ok(batch::half_mse(&pass.residuals(targets)))
}

/// Applies one Euler update in place and returns the number of hidden
/// weights that jumped across the truncation radius and were clamped.
fn apply_update(w: &mut WeightSet, g: &GradientSet, beta: f64, trunc: &Truncation) -> usize {
    w.w_hy.scaled_add(-beta, &g.g_hy);
    w.w_xh.scaled_add(-beta, &g.g_xh);
    let r = trunc.radius();
    let mut clamped = 0;
    Zip::from(&mut w.w_hh).and(&g.g_hh).for_each(|wv, &gv| {
        let before = *wv;
        let after = before - beta * trunc.factor(before) * gv;
        *wv = if before.abs() <= r && after.abs() > r {
            clamped += 1;
            r.copysign(after)
        } else {
            after
        };
    });
    clamped
}

/// A single Euler step: `W <- W - beta * g` with the hidden block
/// multiplied entrywise by `chi_R`, and `t <- t + beta`.
pub fn step(w: &WeightSet, batch: &SequenceBatch, cfg: &TrainConfig) -> Result<WeightSet> {
    cfg.validate()?;
    let eval = evaluate(w, batch, cfg.scaling)?;
    let trunc = Truncation::new(w.config.radius)?;
    let mut next = w.clone();
    apply_update(&mut next, &eval.grad, cfg.beta, &trunc);
    next.t = w.t + cfg.beta;
    if !next.is_finite() {
        return Err(Error::NumericAbort {
            step: 1,
            last_snapshot: None,
        });
    }
    Ok(next)
}

/// Metrics of the state reached at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    pub grad_hy: f64,
    pub grad_hh: f64,
    pub grad_xh: f64,
    pub max_abs_whh: f64,
    /// Clamps performed by the update that produced this state.
    pub clamp_count: usize,
}

impl StepRecord {
    /// Twice the risk, i.e. the plain mean squared error.
    pub fn loss_x2(&self) -> f64 {
        2.0 * self.loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub step: usize,
    pub t: f64,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    NumericAbort {
        step: usize,
        last_snapshot: Option<PathBuf>,
    },
    IoAbort {
        step: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<SnapshotEntry>,
    pub outcome: RunOutcome,
}

impl TrajectoryLog {
    pub fn completed(&self) -> bool {
        self.outcome == RunOutcome::Completed
    }

    pub fn total_clamps(&self) -> usize {
        self.records.iter().map(|r| r.clamp_count).sum()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Receives weight snapshots during training.
pub trait SnapshotSink {
    /// Returns where the snapshot went, if it was persisted.
    fn record(&mut self, step: usize, w: &WeightSet) -> Result<Option<PathBuf>>;
}

/// Discards snapshots.
pub struct NullSink;

impl SnapshotSink for NullSink {
    fn record(&mut self, _: usize, _: &WeightSet) -> Result<Option<PathBuf>> {
        Ok(None)
    }
}

/// Keeps snapshots in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub snapshots: Vec<(usize, WeightSet)>,
}

impl SnapshotSink for MemorySink {
    fn record(&mut self, step: usize, w: &WeightSet) -> Result<Option<PathBuf>> {
        self.snapshots.push((step, w.clone()));
        Ok(None)
    }
}

pub fn snapshot_file_name(step: usize) -> String {
    format!("step_{step:08}.mfw")
}

/// Writes `MFW1` files to `root/subdir`, reporting paths relative to `root`.
pub struct DirSink {
    root: PathBuf,
    subdir: PathBuf,
}

impl DirSink {
    pub fn new(root: impl Into<PathBuf>, subdir: impl Into<PathBuf>) -> Result<Self> {
        let sink = DirSink {
            root: root.into(),
            subdir: subdir.into(),
        };
        fs::create_dir_all(sink.root.join(&sink.subdir))?;
        Ok(sink)
    }
}

impl SnapshotSink for DirSink {
    fn record(&mut self, step: usize, w: &WeightSet) -> Result<Option<PathBuf>> {
        let rel = self.subdir.join(snapshot_file_name(step));
        snapshot::save(self.root.join(&rel), w)?;
        Ok(Some(rel))
    }
}

fn start_step(w0: &WeightSet, cfg: &TrainConfig) -> Result<usize> {
    if w0.t == 0.0 {
        return Ok(0);
    }
    let s = (w0.t / cfg.beta).round();
    if s.is_nan() || s < 0.0 || cfg.time_at(s as usize) != w0.t {
        return Err(Error::Precondition(format!(
            "initial time {} is not on the step grid of beta = {}",
            w0.t, cfg.beta
        )));
    }
    let s = s as usize;
    if s > cfg.steps {
        return Err(Error::Precondition(format!(
            "initial state is at step {s}, beyond the requested {} steps",
            cfg.steps
        )));
    }
    Ok(s)
}

/// Runs Euler steps until step `cfg.steps`. A state with `t > 0` resumes
/// at step `t / beta`. Metrics are recorded for every state from the start
/// step through the final one; snapshots every `snapshot_every` steps and
/// at the end.
///
/// Failures after the run has started are reported in the log's outcome
/// together with everything recorded so far.
pub fn train(
    w0: &WeightSet,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    sink: &mut dyn SnapshotSink,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    batch::check_batch(w0, batch)?;
    batch.targets()?;
    let trunc = Truncation::new(w0.config.radius)?;
    let first = start_step(w0, cfg)?;

    let mut w = w0.clone();
    w.t = cfg.time_at(first);
    let mut log = TrajectoryLog {
        records: Vec::with_capacity(cfg.steps + 1 - first),
        snapshots: Vec::new(),
        outcome: RunOutcome::Completed,
    };
    let mut last_path: Option<PathBuf> = None;
    let mut clamps = 0;

    for s in first..=cfg.steps {
        let eval = match evaluate(&w, batch, cfg.scaling) {
            Ok(e) if e.loss.is_finite() => e,
            Ok(_) | Err(Error::Numeric { .. }) => {
                log.outcome = RunOutcome::NumericAbort {
                    step: s,
                    last_snapshot: last_path,
                };
                return Ok(log);
            }
            Err(e) => return Err(e),
        };
        log.records.push(StepRecord {
            step: s,
            t: cfg.time_at(s),
            loss: eval.loss,
            grad_hy: eval.grad.norm_hy(),
            grad_hh: eval.grad.norm_hh(),
            grad_xh: eval.grad.norm_xh(),
            max_abs_whh: w.max_abs_hh(),
            clamp_count: clamps,
        });
        if s % cfg.snapshot_every == 0 || s == cfg.steps {
            match sink.record(s, &w) {
                Ok(path) => {
                    log.snapshots.push(SnapshotEntry {
                        step: s,
                        t: w.t,
                        path: path.clone(),
                    });
                    if path.is_some() {
                        last_path = path;
                    }
                }
                Err(e) => {
                    log.outcome = RunOutcome::IoAbort {
                        step: s,
                        message: e.to_string(),
                    };
                    return Ok(log);
                }
            }
        }
        if s == cfg.steps {
            break;
        }
        clamps = apply_update(&mut w, &eval.grad, cfg.beta, &trunc);
        w.t = cfg.time_at(s + 1);
        if !w.is_finite() {
            log.outcome = RunOutcome::NumericAbort {
                step: s + 1,
                last_snapshot: last_path,
            };
            return Ok(log);
        }
    }
    Ok(log)
}

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "t",
    "loss",
    "loss_x2",
    "grad_hy",
    "grad_hh",
    "grad_xh",
    "max_abs_whh",
    "clamp_count",
];

pub fn write_metrics<W: Write>(out: W, records: &[StepRecord], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    if header {
        w.write_record(METRICS_HEADER)?;
    }
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.t.to_string(),
            r.loss.to_string(),
            r.loss_x2().to_string(),
            r.grad_hy.to_string(),
            r.grad_hh.to_string(),
            r.grad_xh.to_string(),
            r.max_abs_whh.to_string(),
            r.clamp_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    write_metrics(BufWriter::new(File::create(path)?), records, true)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Format(format!(
            "{}: expected header {}",
            path.display(),
            METRICS_HEADER.join(",")
        )));
    }
    let bad = |e: String| Error::Format(format!("{}: {e}", path.display()));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| bad("short row".into()))?
                .parse::<f64>()
                .map_err(|e| bad(e.to_string()))
        };
        let u = |i: usize| -> Result<usize> {
            rec.get(i)
                .ok_or_else(|| bad("short row".into()))?
                .parse::<usize>()
                .map_err(|e| bad(e.to_string()))
        };
        out.push(StepRecord {
            step: u(0)?,
            t: f(1)?,
            loss: f(2)?,
            grad_hy: f(4)?,
            grad_hh: f(5)?,
            grad_xh: f(6)?,
            max_abs_whh: f(7)?,
            clamp_count: u(8)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_with_teacher, sample_batch, MapSpec};
    use crate::model::forward;
    use ndarray::{array, Array3};

    fn scalar_batch(x0: f64, target: f64) -> SequenceBatch {
        SequenceBatch {
            sequences: Array3::from_elem((1, 1, 1), x0),
            targets: Some(array![target]),
            seed: 0,
            map: MapSpec::shift_circle().describe(),
        }
    }

    fn cfg(beta: f64, steps: usize, scaling: Scaling) -> TrainConfig {
        TrainConfig {
            beta,
            steps,
            scaling,
            snapshot_every: 1,
            seed: 0,
        }
    }

    fn small_problem(n: usize, l: usize, seed: u64) -> (WeightSet, SequenceBatch) {
        let teacher = init_weights(
            NetConfig::new(5, 1, l, 10.0).unwrap(),
            &InitSpec::teacher(5),
            seed,
        )
        .unwrap();
        let b = sample_batch(&MapSpec::shift_circle(), 64, l, seed).unwrap();
        let b = label_with_teacher(&b, &teacher).unwrap();
        let student = init_weights(
            NetConfig::new(n, 1, l, 1.0).unwrap(),
            &InitSpec::student(n),
            seed + 100,
        )
        .unwrap();
        (student, b)
    }

    #[test]
    fn degenerate_law_gives_exact_mean() {
        let spec = InitSpec {
            xh: NormalLaw::new(0.0, 0.0),
            hh: NormalLaw::new(0.0, 0.0),
            hy: NormalLaw::new(0.0, 0.0),
        };
        let w = init_weights(NetConfig::new(4, 2, 1, 1.0).unwrap(), &spec, 3).unwrap();
        assert_eq!(w, WeightSet::zeros(w.config));
    }

    #[test]
    fn negative_variance_rejected() {
        let mut spec = InitSpec::student(10);
        spec.hh.variance = -1.0;
        let err = init_weights(NetConfig::new(4, 1, 1, 1.0).unwrap(), &spec, 3);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn preset_laws() {
        let t = InitSpec::teacher(15);
        assert_eq!(t.xh, NormalLaw::new(1.0, 1.0));
        assert_eq!(t.hh, NormalLaw::new(0.0, 1.0 / 225.0));
        assert_eq!(t.hy, NormalLaw::new(0.0, 1.0 / 225.0));
        let s = InitSpec::student(300);
        assert_eq!(s.xh, NormalLaw::new(0.0, 5.0));
        assert_eq!(s.hh, NormalLaw::new(0.0, 10.0 / 90000.0));
        assert_eq!(s.hy, NormalLaw::new(0.0, 10.0 / 90000.0));
    }

    #[test]
    fn init_moments_match_law() {
        let spec = InitSpec {
            xh: NormalLaw::new(1.0, 4.0),
            hh: NormalLaw::new(-0.5, 0.25),
            hy: NormalLaw::new(0.0, 1.0),
        };
        let w = init_weights(NetConfig::new(400, 1, 0, 100.0).unwrap(), &spec, 9).unwrap();
        let mean = w.w_hh.mean().unwrap();
        let var = w.w_hh.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        // 160000 draws
        assert!((mean + 0.5).abs() < 4.0 * 0.5 / 400.0);
        assert!((var - 0.25).abs() < 0.01);
        let xm = w.w_xh.mean().unwrap();
        assert!((xm - 1.0).abs() < 4.0 * 2.0 / 20.0);
    }

    #[test]
    fn zero_gradient_advances_time_only() {
        let (w, b) = small_problem(4, 2, 1);
        let mut w = w;
        w.w_hy.fill(0.0);
        w.w_xh.fill(0.0);
        w.w_hh.fill(0.0);
        let mut b = b;
        b.targets = Some(Array1::zeros(b.m()));
        let next = step(&w, &b, &cfg(0.1, 1, Scaling::Plain)).unwrap();
        assert_eq!(next.w_hh, w.w_hh);
        assert_eq!(next.w_hy, w.w_hy);
        assert_eq!(next.t, 0.1);
    }

    #[test]
    fn scalar_hand_step() {
        let mut w = WeightSet::zeros(NetConfig::new(1, 1, 0, 1.0).unwrap());
        w.w_hy[0] = 1.0;
        w.w_xh[[0, 0]] = 1.0;
        let next = step(&w, &scalar_batch(0.5, 0.0), &cfg(0.1, 1, Scaling::Plain)).unwrap();
        assert!((next.w_hy[0] - 0.9786447732965927).abs() < 1e-15);
    }

    #[test]
    fn frozen_entries_outside_radius() {
        let (mut w, b) = small_problem(6, 3, 2);
        w.config.radius = 0.5;
        w.w_hh[[1, 2]] = 0.5;
        w.w_hh[[3, 0]] = -0.7;
        w.w_hy.mapv_inplace(|v| v * 1e4);
        let next = step(&w, &b, &cfg(0.5, 1, Scaling::Meanfield)).unwrap();
        assert_eq!(next.w_hh[[1, 2]], 0.5);
        assert_eq!(next.w_hh[[3, 0]], -0.7);
        assert_ne!(next.w_hh[[0, 0]], w.w_hh[[0, 0]]);
    }

    #[test]
    fn band_jumps_are_clamped_and_counted() {
        let (mut w, b) = small_problem(6, 3, 4);
        w.config.radius = 0.02;
        w.w_hh.mapv_inplace(|v| v.clamp(-0.02, 0.02));
        w.w_hy.mapv_inplace(|v| v * 1e3);
        let c = TrainConfig {
            beta: 5.0,
            steps: 3,
            scaling: Scaling::Meanfield,
            snapshot_every: 1,
            seed: 0,
        };
        let log = train(&w, &b, &c, &mut NullSink).unwrap();
        assert!(log.completed());
        assert!(log.total_clamps() > 0);
        assert!(log.records.iter().all(|r| r.max_abs_whh <= 0.02));
    }

    #[test]
    fn loss_definition() {
        let (w, b) = small_problem(5, 2, 3);
        let t = b.targets().unwrap();
        let mut reference = 0.0;
        for i in 0..b.m() {
            let out = forward(&w, b.sequence(i)).unwrap().output;
            reference += 0.5 * (out - t[i]).powi(2);
        }
        reference /= b.m() as f64;
        assert!((loss(&w, &b).unwrap() - reference).abs() < 1e-14);

        let mut b2 = b.clone();
        let outs: Vec<f64> = (0..b.m())
            .map(|i| forward(&w, b.sequence(i)).unwrap().output)
            .collect();
        b2.targets = Some(Array1::from(
            outs.iter().map(|o| o - 0.25).collect::<Vec<_>>(),
        ));
        assert!((loss(&w, &b2).unwrap() - 0.25 * 0.25 / 2.0).abs() < 1e-14);
        b2.targets = Some(Array1::from(outs));
        assert!(loss(&w, &b2).unwrap() < 1e-30);
    }

    #[test]
    fn time_is_step_times_beta() {
        let (w, b) = small_problem(4, 2, 5);
        let c = TrainConfig {
            beta: 0.1,
            steps: 30,
            scaling: Scaling::Meanfield,
            snapshot_every: 7,
            seed: 0,
        };
        let mut sink = MemorySink::default();
        let log = train(&w, &b, &c, &mut sink).unwrap();
        assert_eq!(log.records.len(), 31);
        for r in &log.records {
            assert_eq!(r.t, r.step as f64 * 0.1);
        }
        let steps: Vec<usize> = sink.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(steps, vec![0, 7, 14, 21, 28, 30]);
        assert_eq!(sink.snapshots[5].1.t, 30.0 * 0.1);
    }

    #[test]
    fn student_equal_teacher_stays_flat() {
        let teacher = init_weights(
            NetConfig::new(7, 1, 3, 1.0).unwrap(),
            &InitSpec::teacher(7),
            8,
        )
        .unwrap();
        let b = sample_batch(&MapSpec::shift_circle(), 32, 3, 8).unwrap();
        let b = label_with_teacher(&b, &teacher).unwrap();
        let log = train(&teacher, &b, &cfg(0.01, 20, Scaling::Plain), &mut NullSink).unwrap();
        assert!(log.records.iter().all(|r| r.loss == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (w, b) = small_problem(8, 3, 6);
        let c = TrainConfig {
            beta: 0.05,
            steps: 40,
            scaling: Scaling::Meanfield,
            snapshot_every: 10,
            seed: 0,
        };
        let mut s1 = MemorySink::default();
        let a = train(&w, &b, &c, &mut s1).unwrap();
        let again = train(&w, &b, &c, &mut NullSink).unwrap();
        assert_eq!(a, again);

        let mid = s1.snapshots.iter().find(|s| s.0 == 20).unwrap().1.clone();
        let reloaded = snapshot::decode(&snapshot::encode(&mid).unwrap()).unwrap();
        let mut s2 = MemorySink::default();
        let resumed = train(&reloaded, &b, &c, &mut s2).unwrap();
        assert_eq!(resumed.records[0].step, 20);
        assert_eq!(&resumed.records[1..], &a.records[21..]);
        assert_eq!(
            s2.snapshots.last().unwrap().1,
            s1.snapshots.last().unwrap().1
        );
    }

    #[test]
    fn off_grid_start_rejected() {
        let (mut w, b) = small_problem(4, 1, 7);
        w.t = 0.123;
        assert!(matches!(
            train(&w, &b, &cfg(0.1, 5, Scaling::Plain), &mut NullSink),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn numeric_abort_is_flagged() {
        let (mut w, b) = small_problem(4, 1, 7);
        w.w_hy.fill(1e300);
        let log = train(&w, &b, &cfg(1e10, 5, Scaling::Meanfield), &mut NullSink).unwrap();
        assert!(matches!(log.outcome, RunOutcome::NumericAbort { .. }));
    }

    #[test]
    fn io_failure_is_flagged() {
        struct Failing;
        impl SnapshotSink for Failing {
            fn record(&mut self, step: usize, _: &WeightSet) -> Result<Option<PathBuf>> {
                if step > 0 {
                    Err(Error::Io(std::io::Error::other("disk full")))
                } else {
                    Ok(None)
                }
            }
        }
        let (w, b) = small_problem(4, 1, 7);
        let log = train(&w, &b, &cfg(0.1, 5, Scaling::Plain), &mut Failing).unwrap();
        assert!(matches!(log.outcome, RunOutcome::IoAbort { step: 1, .. }));
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn metrics_round_trip() {
        let (w, b) = small_problem(4, 2, 9);
        let log = train(&w, &b, &cfg(0.1, 5, Scaling::Meanfield), &mut NullSink).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        save_metrics(&p, &log.records).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), log.records);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text
            .starts_with("step,t,loss,loss_x2,grad_hy,grad_hh,grad_xh,max_abs_whh,clamp_count\n"));
    }

    #[test]
    fn invalid_train_config() {
        let (w, b) = small_problem(4, 1, 7);
        for c in [
            cfg(0.0, 5, Scaling::Plain),
            cfg(-1.0, 5, Scaling::Plain),
            cfg(0.1, 0, Scaling::Plain),
        ] {
            assert!(matches!(
                train(&w, &b, &c, &mut NullSink),
                Err(Error::Config(_))
            ));
        }
    }
}
