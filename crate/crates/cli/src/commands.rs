use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mfrnn::config::{ExperimentConfig, ExperimentKind};
use mfrnn::coupling::{write_dtau_csv, write_summary, CouplingPlan};
use mfrnn::data::{read_batch, write_batch};
use mfrnn::diagnostics::{report as stationarity, write_reports};
use mfrnn::snapshot;
use mfrnn::trainer::{read_metrics, save_metrics, DirSink, RunOutcome, SnapshotEntry, StepRecord};
use mfrnn::{init_weights, label_with_teacher, rate_sweep, sample_batch, train, SequenceBatch};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";
pub const DATA_CSV: &str = "data.csv";
pub const DATA_META: &str = "data.json";
pub const TEACHER_FILE: &str = "teacher.mfw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const SWEEP_FILE: &str = "sweep.json";
pub const DTAU_FILE: &str = "dtau.csv";
pub const COUPLING_FILE: &str = "coupling.json";
pub const COUPLING_LOSSES: &str = "coupling_losses.csv";
pub const DTAU_PROFILE: &str = "dtau_profile.csv";
pub const STATIONARITY_FILE: &str = "stationarity.csv";

/// Contents of `run.json` in every training run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub n: usize,
    pub seed: u64,
    /// Data directory, relative to the run directory.
    pub data: PathBuf,
    pub steps: usize,
    pub outcome: RunOutcome,
    pub last_step: Option<usize>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub total_clamps: usize,
    pub snapshots: Vec<SnapshotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub n: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub schema: u32,
    pub runs: Vec<SweepEntry>,
    pub failed: usize,
}

pub fn output_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set \"out\"".into()))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(CliError::io("cannot create directory", path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = BufWriter::new(File::create(path).map_err(CliError::io("cannot write", path))?);
    serde_json::to_writer_pretty(&mut f, value).map_err(mfrnn::Error::from)?;
    f.write_all(b"\n")
        .and_then(|_| f.flush())
        .map_err(CliError::io("cannot write", path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(CliError::io("cannot read", path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Writes the config actually used. The output path is left out so that
/// identical experiments in different directories produce identical files.
fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    let mut echo = cfg.clone();
    echo.out = None;
    echo.write(&dir.join(CONFIG_FILE))?;
    Ok(())
}

fn relative_to(target: &Path, base: &Path) -> CliResult<PathBuf> {
    let t = fs::canonicalize(target).map_err(CliError::io("cannot resolve", target))?;
    let b = fs::canonicalize(base).map_err(CliError::io("cannot resolve", base))?;
    Ok(match pathdiff::diff_paths(&t, &b) {
        Some(p) if p.as_os_str().is_empty() => PathBuf::from("."),
        Some(p) => p,
        None => t,
    })
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<SequenceBatch> {
    create_dir(out)?;
    let spec = cfg.map_spec()?;
    let teacher = init_weights(
        cfg.teacher_net(),
        &cfg.teacher_init(),
        cfg.init.teacher.seed,
    )?;
    let batch = sample_batch(&spec, cfg.data.m, cfg.data.memory, cfg.data.seed)?;
    let batch = label_with_teacher(&batch, &teacher)?;
    write_batch(&batch, &out.join(DATA_CSV), &out.join(DATA_META))?;
    snapshot::save(out.join(TEACHER_FILE), &teacher)?;
    echo_config(&cfg.resolved(cfg.net.n, cfg.train.seed), out)?;
    println!(
        "wrote {} sequences of length {} (d = {}, seed {}) to {}",
        batch.m(),
        batch.memory() + 1,
        batch.d(),
        batch.seed,
        out.join(DATA_CSV).display()
    );
    Ok(batch)
}

pub fn load_data(cfg: &ExperimentConfig, dir: &Path) -> CliResult<SequenceBatch> {
    let csv = dir.join(DATA_CSV);
    if !csv.exists() {
        return Err(CliError::Usage(format!(
            "no data in {} (expected {DATA_CSV} and {DATA_META}; run gen-data first)",
            dir.display()
        )));
    }
    let batch = read_batch(&csv, &dir.join(DATA_META))?;
    let d = &cfg.data;
    if batch.m() != d.m
        || batch.memory() != d.memory
        || batch.seed != d.seed
        || batch.d() != cfg.net.d
    {
        return Err(CliError::Usage(format!(
            "data in {} (m={}, L={}, d={}, seed {}) does not match the config (m={}, L={}, d={}, seed {})",
            dir.display(),
            batch.m(),
            batch.memory(),
            batch.d(),
            batch.seed,
            d.m,
            d.memory,
            cfg.net.d,
            d.seed
        )));
    }
    batch.targets()?;
    Ok(batch)
}

/// Where a training run starts.
#[derive(Debug, Clone)]
pub enum Start {
    Fresh,
    /// Latest snapshot listed in the run directory's `run.json`.
    Latest,
    Snapshot(PathBuf),
}

fn resume_point(run_dir: &Path, start: &Start) -> CliResult<Option<PathBuf>> {
    match start {
        Start::Fresh => Ok(None),
        Start::Snapshot(p) => Ok(Some(p.clone())),
        Start::Latest => {
            let rec: RunRecord = read_json(&run_dir.join(RUN_FILE))?;
            rec.snapshots
                .iter()
                .rev()
                .find_map(|s| s.path.as_ref().map(|p| run_dir.join(p)))
                .map(Some)
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "no snapshot to resume from in {}",
                        run_dir.display()
                    ))
                })
        }
    }
}

/// Trains one student in `run_dir`. The config must already be resolved
/// for the run's width and seed.
pub fn train_run(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    data_dir: &Path,
    batch: &SequenceBatch,
    start: &Start,
) -> CliResult<RunRecord> {
    create_dir(run_dir)?;
    let resume = resume_point(run_dir, start)?;
    let w0 = match &resume {
        None => init_weights(cfg.net, &cfg.student_init(cfg.net.n), cfg.train.seed)?,
        Some(p) => {
            let w = snapshot::load(p)?;
            if w.config.n != cfg.net.n
                || w.config.d != cfg.net.d
                || w.config.memory != cfg.net.memory
                || w.config.radius != cfg.net.radius
            {
                return Err(CliError::Usage(format!(
                    "snapshot {} does not match the configured network",
                    p.display()
                )));
            }
            w
        }
    };
    echo_config(cfg, run_dir)?;

    let mut sink = DirSink::new(run_dir, SNAPSHOT_DIR)?;
    let log = train(&w0, batch, &cfg.train, &mut sink)?;
    let first = log.records.first().map_or(0, |r| r.step);

    let (mut records, mut snaps): (Vec<StepRecord>, Vec<SnapshotEntry>) = (Vec::new(), Vec::new());
    if resume.is_some() {
        let old = read_metrics(&run_dir.join(METRICS_FILE))?;
        records.extend(old.into_iter().filter(|r| r.step <= first));
        let old_run: Option<RunRecord> = read_json(&run_dir.join(RUN_FILE)).ok();
        if let Some(o) = old_run {
            snaps.extend(o.snapshots.into_iter().filter(|s| s.step < first));
        }
    }
    let skip = usize::from(records.last().is_some_and(|r| r.step == first));
    records.extend(log.records.iter().skip(skip).copied());
    snaps.extend(log.snapshots.iter().cloned());
    save_metrics(&run_dir.join(METRICS_FILE), &records)?;

    let rec = RunRecord {
        schema: 1,
        n: cfg.net.n,
        seed: cfg.train.seed,
        data: relative_to(data_dir, run_dir)?,
        steps: cfg.train.steps,
        outcome: log.outcome.clone(),
        last_step: records.last().map(|r| r.step),
        initial_loss: records.first().map(|r| r.loss),
        final_loss: records.last().map(|r| r.loss),
        total_clamps: records.iter().map(|r| r.clamp_count).sum(),
        snapshots: snaps,
    };
    write_json(&run_dir.join(RUN_FILE), &rec)?;
    Ok(rec)
}

fn outcome_error(rec: &RunRecord, run_dir: &Path) -> Option<CliError> {
    match &rec.outcome {
        RunOutcome::Completed => None,
        RunOutcome::NumericAbort {
            step,
            last_snapshot,
        } => Some(CliError::NumericAbort {
            step: *step,
            last_snapshot: last_snapshot.as_ref().map(|p| run_dir.join(p)),
        }),
        RunOutcome::IoAbort { step, message } => Some(CliError::Usage(format!(
            "run stopped at step {step}: {message}"
        ))),
    }
}

pub fn train_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    data_dir: &Path,
    start: &Start,
) -> CliResult<()> {
    let batch = load_data(cfg, data_dir)?;
    let resolved = cfg.resolved(cfg.net.n, cfg.train.seed);
    let rec = train_run(&resolved, out, data_dir, &batch, start)?;
    if let Some(e) = outcome_error(&rec, out) {
        return Err(e);
    }
    println!(
        "n = {}, seed {}: loss {:.6e} -> {:.6e} after {} steps ({} clamps)",
        rec.n,
        rec.seed,
        rec.initial_loss.unwrap_or(f64::NAN),
        rec.final_loss.unwrap_or(f64::NAN),
        rec.steps,
        rec.total_clamps
    );
    Ok(())
}

pub fn run_dir_name(n: usize, seed: u64) -> String {
    format!("n{n}_seed{seed}")
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn sweep_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    data_dir: &Path,
    jobs: usize,
) -> CliResult<()> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Usage("config has no sweep block".into()))?;
    let widths = if sweep.widths.is_empty() {
        vec![cfg.net.n]
    } else {
        sweep.widths.clone()
    };
    let batch = load_data(cfg, data_dir)?;
    create_dir(out)?;
    echo_config(cfg, out)?;

    let runs: Vec<(usize, u64)> = widths
        .iter()
        .flat_map(|&n| sweep.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let results: Vec<SweepEntry> = pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|&(n, seed)| {
                let name = run_dir_name(n, seed);
                let dir = out.join(&name);
                let mut resolved = cfg.resolved(n, seed);
                resolved.kind = ExperimentKind::Optimality;
                resolved.sweep = None;
                resolved.coupling = None;
                let res = train_run(&resolved, &dir, data_dir, &batch, &Start::Fresh);
                let (status, error, rec) = match res {
                    Ok(rec) => match outcome_error(&rec, &dir) {
                        None => ("completed".to_string(), None, Some(rec)),
                        Some(e) => ("failed".to_string(), Some(e.to_string()), Some(rec)),
                    },
                    Err(e) => ("failed".to_string(), Some(e.to_string()), None),
                };
                SweepEntry {
                    n,
                    seed,
                    dir: PathBuf::from(name),
                    status,
                    error,
                    initial_loss: rec.as_ref().and_then(|r| r.initial_loss),
                    final_loss: rec.as_ref().and_then(|r| r.final_loss),
                }
            })
            .collect()
    });
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    for r in &results {
        println!(
            "n = {:>4}, seed {:>3}: {} (loss {:.6e} -> {:.6e})",
            r.n,
            r.seed,
            r.status,
            r.initial_loss.unwrap_or(f64::NAN),
            r.final_loss.unwrap_or(f64::NAN)
        );
    }
    let total = results.len();
    let summary = out.join(SWEEP_FILE);
    write_json(
        &summary,
        &SweepRecord {
            schema: 1,
            runs: results,
            failed,
        },
    )?;
    if failed > 0 {
        return Err(CliError::Partial {
            failed,
            total,
            summary,
        });
    }
    Ok(())
}

pub fn couple_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    data_dir: &Path,
    jobs: usize,
) -> CliResult<()> {
    let coupling = cfg
        .coupling
        .clone()
        .ok_or_else(|| CliError::Usage("config has no coupling block".into()))?;
    let batch = load_data(cfg, data_dir)?;
    create_dir(out)?;
    echo_config(&cfg.resolved(cfg.net.n, cfg.train.seed), out)?;

    let reference = init_weights(cfg.net, &cfg.student_init(cfg.net.n), cfg.train.seed)?;
    let plan = CouplingPlan::new(
        reference,
        coupling.widths.clone(),
        coupling.seed,
        coupling.sampling,
    )?;
    let run = rate_sweep(&plan, &batch, &cfg.train, jobs)?;

    write_dtau_csv(&out.join(DTAU_FILE), &run.table())?;
    let summary = run.summary();
    write_summary(&out.join(COUPLING_FILE), &summary)?;

    let mut losses =
        csv::Writer::from_path(out.join(COUPLING_LOSSES)).map_err(mfrnn::Error::from)?;
    let mut header = vec!["step".to_string(), "t".into(), "reference".into()];
    header.extend(run.widths.iter().map(|w| format!("n_{}", w.n)));
    losses.write_record(&header).map_err(mfrnn::Error::from)?;
    for (i, r) in run.reference.records.iter().enumerate() {
        let mut row = vec![r.step.to_string(), r.t.to_string(), r.loss.to_string()];
        row.extend(run.widths.iter().map(|w| {
            w.log
                .records
                .get(i)
                .map(|c| c.loss.to_string())
                .unwrap_or_default()
        }));
        losses.write_record(&row).map_err(mfrnn::Error::from)?;
    }
    losses
        .flush()
        .map_err(CliError::io("cannot write", out.join(COUPLING_LOSSES)))?;

    let mut prof = csv::Writer::from_path(out.join(DTAU_PROFILE)).map_err(mfrnn::Error::from)?;
    let mut header = vec!["t".to_string()];
    header.extend(run.widths.iter().map(|w| format!("n_{}", w.n)));
    prof.write_record(&header).map_err(mfrnn::Error::from)?;
    let times: Vec<f64> = run
        .widths
        .iter()
        .map(|w| w.profile.len())
        .max()
        .and_then(|len| run.widths.iter().find(|w| w.profile.len() == len))
        .map(|w| w.profile.iter().map(|p| p.0).collect())
        .unwrap_or_default();
    for (i, t) in times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(run.widths.iter().map(|w| {
            w.profile
                .get(i)
                .map(|p| p.1.to_string())
                .unwrap_or_default()
        }));
        prof.write_record(&row).map_err(mfrnn::Error::from)?;
    }
    prof.flush()
        .map_err(CliError::io("cannot write", out.join(DTAU_PROFILE)))?;

    for row in run.table() {
        println!("n = {:>4}: D_tau = {:.6e}", row.n, row.d_tau);
    }
    match summary.slope {
        Some(s) => println!("fitted slope of log D_tau vs log n: {s:.4}"),
        None => println!("fitted slope unavailable (fewer than two nonzero distances)"),
    }
    if summary.partial {
        return Err(CliError::Partial {
            failed: summary.failed_widths.len(),
            total: summary.widths.len(),
            summary: out.join(COUPLING_FILE),
        });
    }
    Ok(())
}

fn diagnose_run(run_dir: &Path, data_override: Option<&Path>) -> CliResult<usize> {
    let rec: RunRecord = read_json(&run_dir.join(RUN_FILE))?;
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let data_dir = data_override.map_or_else(|| run_dir.join(&rec.data), Path::to_path_buf);
    let batch = load_data(&cfg, &data_dir)?;
    let paths: Vec<PathBuf> = rec
        .snapshots
        .iter()
        .filter_map(|s| s.path.as_ref().map(|p| run_dir.join(p)))
        .collect();
    let Some(last) = paths.last() else {
        return Err(CliError::Usage(format!(
            "no snapshots in {}",
            run_dir.display()
        )));
    };
    let reference = snapshot::load(last)?;
    let reports = paths
        .par_iter()
        .map(|p| {
            let w = snapshot::load(p)?;
            stationarity(&w, &reference, &batch)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_reports(&run_dir.join(STATIONARITY_FILE), cfg.net.memory, &reports)?;
    if let (Some(a), Some(b)) = (reports.first(), reports.last()) {
        println!(
            "{}: {} snapshots, q1 {:.4e} -> {:.4e}",
            run_dir.display(),
            reports.len(),
            a.q1,
            b.q1
        );
    }
    Ok(reports.len())
}

pub fn diagnose_cmd(dir: &Path, data_override: Option<&Path>) -> CliResult<()> {
    let sweep_file = dir.join(SWEEP_FILE);
    if sweep_file.exists() {
        let sweep: SweepRecord = read_json(&sweep_file)?;
        for r in sweep.runs.iter().filter(|r| r.error.is_none()) {
            diagnose_run(&dir.join(&r.dir), data_override)?;
        }
        Ok(())
    } else if dir.join(RUN_FILE).exists() {
        diagnose_run(dir, data_override).map(|_| ())
    } else {
        Err(CliError::Usage(format!(
            "{} is not a run directory (expected {RUN_FILE} or {SWEEP_FILE})",
            dir.display()
        )))
    }
}

/// Header order plus values by column name.
pub type Columns = (Vec<String>, BTreeMap<String, Vec<f64>>);

/// Reads a CSV with a header into named numeric columns. Empty cells
/// become NaN.
pub fn read_columns(path: &Path) -> CliResult<Columns> {
    let mut rdr = csv::Reader::from_path(path).map_err(mfrnn::Error::from)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(mfrnn::Error::from)?
        .iter()
        .map(String::from)
        .collect();
    let mut cols: BTreeMap<String, Vec<f64>> =
        header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in rdr.records() {
        let rec = rec.map_err(mfrnn::Error::from)?;
        for (h, v) in header.iter().zip(rec.iter()) {
            let x = if v.is_empty() {
                f64::NAN
            } else {
                v.parse()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            };
            if let Some(c) = cols.get_mut(h) {
                c.push(x);
            }
        }
    }
    Ok((header, cols))
}
