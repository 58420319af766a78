use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mfrnn::coupling::{read_dtau_csv, CouplingSummary};
use mfrnn::diagnostics::read_reports;
use mfrnn::trainer::read_metrics;

use crate::commands::{
    read_columns, SweepRecord, COUPLING_FILE, COUPLING_LOSSES, DTAU_FILE, METRICS_FILE,
    STATIONARITY_FILE, SWEEP_FILE,
};
use crate::error::{CliError, CliResult};
use crate::svg::{Plot, Series};

pub const SUMMARY_FILE: &str = "summary.txt";

fn save(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(CliError::io("cannot write", path))
}

fn mse_curve(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    Ok(read_metrics(path)?
        .iter()
        .map(|r| (r.step as f64, r.loss_x2()))
        .collect())
}

fn loss_line(name: &str, path: &Path, summary: &mut String) -> CliResult<Series> {
    let pts = mse_curve(path)?;
    if let (Some(a), Some(b)) = (pts.first(), pts.last()) {
        let _ = writeln!(
            summary,
            "{name}: mse {:.6e} -> {:.6e} over {} steps (ratio {:.4e})",
            a.1,
            b.1,
            b.0,
            b.1 / a.1
        );
    }
    Ok(Series::line(name, pts))
}

fn stationarity_plot(dir: &Path, title: &str, summary: &mut String) -> CliResult<bool> {
    let path = dir.join(STATIONARITY_FILE);
    if !path.exists() {
        return Ok(false);
    }
    let reports = read_reports(&path)?;
    let mut plot = Plot::new(title, "t", "value").log_y();
    let col = |f: &dyn Fn(&mfrnn::StationarityReport) -> f64| -> Vec<(f64, f64)> {
        reports.iter().map(|r| (r.t, f(r))).collect()
    };
    plot.push(Series::line("q1", col(&|r| r.q1)).with_markers());
    plot.push(Series::line("q2", col(&|r| r.q2)).with_markers());
    let depth = reports.first().map_or(0, |r| r.q3.len());
    for i in 0..depth {
        plot.push(Series::line(format!("q3_{}", i + 1), col(&|r| r.q3[i])));
    }
    for i in 0..depth {
        plot.push(Series::line(format!("q4_{}", i + 1), col(&|r| r.q4[i])).dashed());
    }
    save(&dir.join("stationarity.svg"), &plot.render())?;
    if let (Some(a), Some(b)) = (reports.first(), reports.last()) {
        let _ = writeln!(
            summary,
            "{title}: q1 {:.4e} at t = {} -> {:.4e} at t = {}",
            a.q1, a.t, b.q1, b.t
        );
    }
    Ok(true)
}

fn coupling_plots(dir: &Path, summary: &mut String) -> CliResult<()> {
    let rows = read_dtau_csv(&dir.join(DTAU_FILE))?;
    let mut plot = Plot::new("coupling distance", "width n", "D_tau").log_log();
    plot.push(
        Series::line(
            "D_tau",
            rows.iter().map(|r| (r.n as f64, r.d_tau)).collect(),
        )
        .with_markers(),
    );
    let fitted: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.fitted.map(|f| (r.n as f64, f)))
        .collect();
    if !fitted.is_empty() {
        plot.push(Series::line("fit", fitted).dashed());
    }
    save(&dir.join("dtau.svg"), &plot.render())?;

    let cpath = dir.join(COUPLING_FILE);
    if cpath.exists() {
        let text = fs::read_to_string(&cpath).map_err(CliError::io("cannot read", &cpath))?;
        let s: CouplingSummary = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", cpath.display())))?;
        let _ = writeln!(
            summary,
            "coupling: N_ref = {}, tau = {}, slope = {}, partial = {}",
            s.n_ref,
            s.tau,
            s.slope.map_or("n/a".into(), |v| format!("{v:.4}")),
            s.partial
        );
        for (n, gap) in s.widths.iter().zip(&s.loss_gap) {
            if let Some(g) = gap {
                let _ = writeln!(summary, "  n = {n}: sup loss gap {g:.6e}");
            }
        }
    }

    let lpath = dir.join(COUPLING_LOSSES);
    if lpath.exists() {
        let (header, cols) = read_columns(&lpath)?;
        let steps = &cols["step"];
        let mut plot = Plot::new("coupled loss curves", "step", "mse").log_log();
        for h in header.iter().skip(2) {
            let pts = steps
                .iter()
                .zip(&cols[h])
                .map(|(&s, &l)| (s, 2.0 * l))
                .collect();
            let series = Series::line(h.as_str(), pts);
            plot.push(if h == "reference" {
                series.dashed()
            } else {
                series
            });
        }
        save(&dir.join("coupling_loss.svg"), &plot.render())?;
    }
    Ok(())
}

pub fn report_cmd(dir: &Path) -> CliResult<()> {
    let has = |f: &str| dir.join(f).exists();
    if !has(METRICS_FILE) && !has(SWEEP_FILE) && !has(DTAU_FILE) {
        return Err(CliError::Usage(format!(
            "nothing to report in {}: expected {METRICS_FILE} (train), {SWEEP_FILE} (sweep) or {DTAU_FILE} (couple)",
            dir.display()
        )));
    }
    let mut summary = String::new();

    if has(METRICS_FILE) {
        let mut plot = Plot::new("training loss", "step", "mse").log_log();
        plot.push(loss_line("run", &dir.join(METRICS_FILE), &mut summary)?);
        save(&dir.join("loss.svg"), &plot.render())?;
        stationarity_plot(dir, "stationarity", &mut summary)?;
    }

    if has(SWEEP_FILE) {
        let path = dir.join(SWEEP_FILE);
        let text = fs::read_to_string(&path).map_err(CliError::io("cannot read", &path))?;
        let sweep: SweepRecord = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut by_seed: BTreeMap<u64, Vec<_>> = BTreeMap::new();
        for r in &sweep.runs {
            by_seed.entry(r.seed).or_default().push(r);
        }
        for (seed, runs) in by_seed {
            let mut plot =
                Plot::new(format!("training loss, seed {seed}"), "step", "mse").log_log();
            for r in runs {
                let run_dir = dir.join(&r.dir);
                let metrics = run_dir.join(METRICS_FILE);
                if !metrics.exists() {
                    let _ = writeln!(
                        summary,
                        "n = {}, seed {}: no metrics ({})",
                        r.n, r.seed, r.status
                    );
                    continue;
                }
                let name = format!("n = {}", r.n);
                plot.push(loss_line(
                    &format!("{name}, seed {seed}"),
                    &metrics,
                    &mut summary,
                )?);
                if let Some(last) = plot.series.last_mut() {
                    last.name = name;
                }
                stationarity_plot(
                    &run_dir,
                    &format!("stationarity n = {}, seed {}", r.n, r.seed),
                    &mut summary,
                )?;
            }
            save(&dir.join(format!("loss_seed{seed}.svg")), &plot.render())?;
        }
    }

    if has(DTAU_FILE) {
        coupling_plots(dir, &mut summary)?;
    }

    save(&dir.join(SUMMARY_FILE), &summary)?;
    print!("{summary}");
    Ok(())
}
