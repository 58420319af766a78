//! Coupled finite-width trajectories and the D_tau distance.
//!
//! Children of width `n` are built by gathering neurons of a width-`N_ref`
//! reference network at sampled indices. The reference trajectory, restricted
//! to those indices, stands in for the mean-field trajectory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{config_err, Error, Result};
use crate::grad::Scaling;
use crate::model::WeightSet;
use crate::rng::stream;
use crate::trainer::{train, MemorySink, StepRecord, TrainConfig, TrajectoryLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingRule {
    /// Distinct reference neurons in random order.
    #[default]
    WithoutReplacement,
    /// iid uniform indices; repeats possible.
    WithReplacement,
    /// The first `n` reference neurons, in order.
    Identity,
}

/// Indices into a width-`n_ref` reference. Width `n` always draws from
/// RNG stream `n` of `seed`, independent of the rest of the grid. Drawing
/// all `n_ref` neurons without replacement returns them in order.
pub fn sample_indices(n_ref: usize, n: usize, seed: u64, rule: SamplingRule) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(config_err("child width must be >= 1"));
    }
    if n > n_ref && rule != SamplingRule::WithReplacement {
        return Err(config_err(format!(
            "child width {n} exceeds reference width {n_ref}"
        )));
    }
    let mut rng = stream(seed, n as u64);
    Ok(match rule {
        SamplingRule::Identity => (0..n).collect(),
        // a full draw is a relabelling of the reference; keep its order
        SamplingRule::WithoutReplacement if n == n_ref => (0..n).collect(),
        SamplingRule::WithoutReplacement => rand::seq::index::sample(&mut rng, n_ref, n).into_vec(),
        SamplingRule::WithReplacement => (0..n).map(|_| rng.random_range(0..n_ref)).collect(),
    })
}

/// Width-`n` child at `t = 0` with `W_hh(i, j) = W_ref(S(i), S(j))` etc.
pub fn subsample(
    reference: &WeightSet,
    n: usize,
    seed: u64,
    rule: SamplingRule,
) -> Result<(WeightSet, Vec<usize>)> {
    let idx = sample_indices(reference.n(), n, seed, rule)?;
    let mut child = reference.gather(&idx)?;
    child.t = 0.0;
    Ok((child, idx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub reference: WeightSet,
    pub widths: Vec<usize>,
    pub index_sets: Vec<Vec<usize>>,
    pub seed: u64,
    pub rule: SamplingRule,
}

impl CouplingPlan {
    pub fn new(
        reference: WeightSet,
        widths: Vec<usize>,
        seed: u64,
        rule: SamplingRule,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(config_err("coupling plan needs at least one width"));
        }
        if widths.windows(2).any(|p| p[0] >= p[1]) {
            return Err(config_err("widths must be strictly ascending"));
        }
        let index_sets = widths
            .iter()
            .map(|&n| sample_indices(reference.n(), n, seed, rule))
            .collect::<Result<_>>()?;
        Ok(CouplingPlan {
            reference,
            widths,
            index_sets,
            seed,
            rule,
        })
    }

    pub fn n_ref(&self) -> usize {
        self.reference.n()
    }

    pub fn child(&self, i: usize) -> Result<WeightSet> {
        let mut c = self.reference.gather(&self.index_sets[i])?;
        c.t = 0.0;
        Ok(c)
    }
}

fn frobenius_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance between a child snapshot and the restricted reference at the
/// same time: the max of `||dW_hh||_F / n^2`, `||dW_xh||_F / n` and
/// `||dW_hy||_2 / n`.
pub fn snapshot_distance(child: &WeightSet, restricted: &WeightSet) -> Result<f64> {
    let n = child.n();
    if restricted.n() != n || restricted.config.d != child.config.d {
        return Err(Error::Precondition(format!(
            "width mismatch: child {n}, restricted reference {}",
            restricted.n()
        )));
    }
    let nf = n as f64;
    let hh = frobenius_diff(child.w_hh.iter(), restricted.w_hh.iter()) / (nf * nf);
    let xh = frobenius_diff(child.w_xh.iter(), restricted.w_xh.iter()) / nf;
    let hy = frobenius_diff(child.w_hy.iter(), restricted.w_hy.iter()) / nf;
    Ok(hh.max(xh).max(hy))
}

fn check_aligned(child: &[WeightSet], reference: &[WeightSet]) -> Result<()> {
    if child.len() != reference.len() || child.is_empty() {
        return Err(Error::Precondition(format!(
            "snapshot grids differ in length ({} vs {})",
            child.len(),
            reference.len()
        )));
    }
    if let Some((c, r)) = child.iter().zip(reference).find(|(c, r)| c.t != r.t) {
        return Err(Error::Precondition(format!(
            "snapshot times are misaligned ({} vs {})",
            c.t, r.t
        )));
    }
    Ok(())
}

/// Running supremum of the snapshot distance: `(t, D_t)` for each grid time.
pub fn d_tau_profile(child: &[WeightSet], reference: &[WeightSet]) -> Result<Vec<(f64, f64)>> {
    check_aligned(child, reference)?;
    let mut sup = 0.0f64;
    child
        .iter()
        .zip(reference)
        .map(|(c, r)| {
            sup = sup.max(snapshot_distance(c, r)?);
            Ok((c.t, sup))
        })
        .collect()
}

/// `D_tau` over the snapshot grid: max over snapshots with `t <= tau`.
/// `reference` must already be restricted to the child's indices.
pub fn d_tau(child: &[WeightSet], reference: &[WeightSet], tau: f64) -> Result<f64> {
    check_aligned(child, reference)?;
    let last = child.last().map_or(f64::NEG_INFINITY, |w| w.t);
    if last < tau {
        return Err(Error::Precondition(format!(
            "snapshot grid ends at t = {last}, before tau = {tau}"
        )));
    }
    let mut sup = 0.0f64;
    for (c, r) in child.iter().zip(reference).filter(|(c, _)| c.t <= tau) {
        sup = sup.max(snapshot_distance(c, r)?);
    }
    Ok(sup)
}

/// Least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(points: &[(f64, f64)]) -> Option<LineFit> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Some(LineFit {
        slope,
        intercept,
        r2,
    })
}

/// `sup_step |loss_a(step) - loss_b(step)|` over the common steps.
pub fn loss_curve_gap(a: &[StepRecord], b: &[StepRecord]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.loss - y.loss).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidthResult {
    pub n: usize,
    pub log: TrajectoryLog,
    /// `None` if the child run did not complete.
    pub d_tau: Option<f64>,
    pub profile: Vec<(f64, f64)>,
    pub loss_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRun {
    pub n_ref: usize,
    pub tau: f64,
    pub reference: TrajectoryLog,
    pub widths: Vec<WidthResult>,
    /// Fit of `ln D_tau` against `ln n` over widths with `D_tau > 0`.
    pub fit: Option<LineFit>,
}

impl CoupledRun {
    pub fn partial(&self) -> bool {
        self.widths.iter().any(|w| w.d_tau.is_none())
    }

    pub fn failed_widths(&self) -> Vec<usize> {
        self.widths
            .iter()
            .filter(|w| w.d_tau.is_none())
            .map(|w| w.n)
            .collect()
    }

    pub fn table(&self) -> Vec<DtauRow> {
        self.widths
            .iter()
            .filter_map(|w| {
                w.d_tau.map(|d| DtauRow {
                    n: w.n,
                    tau: self.tau,
                    d_tau: d,
                    fitted: self
                        .fit
                        .map(|f| (f.intercept + f.slope * (w.n as f64).ln()).exp()),
                })
            })
            .collect()
    }

    pub fn summary(&self) -> CouplingSummary {
        CouplingSummary {
            schema: 1,
            widths: self.widths.iter().map(|w| w.n).collect(),
            n_ref: self.n_ref,
            tau: self.tau,
            slope: self.fit.map(|f| f.slope),
            intercept: self.fit.map(|f| f.intercept),
            r2: self.fit.map(|f| f.r2),
            loss_gap: self.widths.iter().map(|w| w.loss_gap).collect(),
            partial: self.partial(),
            failed_widths: self.failed_widths(),
        }
    }
}

/// One row of the D_tau table. `fitted` is the fitted line evaluated at `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtauRow {
    pub n: usize,
    pub tau: f64,
    pub d_tau: f64,
    pub fitted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub schema: u32,
    pub widths: Vec<usize>,
    #[serde(rename = "N_ref")]
    pub n_ref: usize,
    pub tau: f64,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r2: Option<f64>,
    /// Sup-over-steps loss distance to the reference, per width.
    pub loss_gap: Vec<Option<f64>>,
    pub partial: bool,
    pub failed_widths: Vec<usize>,
}

pub const DTAU_HEADER: [&str; 4] = ["n", "tau", "D_tau", "slope_fit"];

pub fn write_dtau_csv(path: &Path, rows: &[DtauRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(DTAU_HEADER)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.tau.to_string(),
            r.d_tau.to_string(),
            r.fitted.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dtau_csv(path: &Path) -> Result<Vec<DtauRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(DTAU_HEADER) {
        return Err(Error::Format(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let bad = |e: String| Error::Format(format!("{}: {e}", path.display()));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).ok_or_else(|| bad("short row".into()));
        let fitted = get(3)?;
        rows.push(DtauRow {
            n: get(0)?.parse().map_err(|e| bad(format!("{e}")))?,
            tau: get(1)?.parse().map_err(|e| bad(format!("{e}")))?,
            d_tau: get(2)?.parse().map_err(|e| bad(format!("{e}")))?,
            fitted: if fitted.is_empty() {
                None
            } else {
                Some(fitted.parse().map_err(|e| bad(format!("{e}")))?)
            },
        });
    }
    Ok(rows)
}

pub fn write_summary(path: &Path, summary: &CouplingSummary) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Trains the reference and every child on the same data, then measures
/// D_tau at the final time for each width. Children run on a pool of
/// `jobs` threads; results do not depend on `jobs`.
pub fn rate_sweep(
    plan: &CouplingPlan,
    data: &SequenceBatch,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<CoupledRun> {
    if cfg.scaling != Scaling::Meanfield {
        return Err(Error::Precondition(
            "coupling sweeps require mean-field scaling".into(),
        ));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| config_err(e.to_string()))?;

    let mut ref_sink = MemorySink::default();
    let mut ref_start = plan.reference.clone();
    ref_start.t = 0.0;
    let reference = train(&ref_start, data, cfg, &mut ref_sink)?;
    if !reference.completed() {
        return Err(Error::Precondition(format!(
            "reference run did not complete: {:?}",
            reference.outcome
        )));
    }
    let ref_snaps: Vec<WeightSet> = ref_sink.snapshots.into_iter().map(|s| s.1).collect();
    let tau = cfg.time_at(cfg.steps);

    let widths: Vec<WidthResult> = pool.install(|| {
        (0..plan.widths.len())
            .into_par_iter()
            .map(|i| -> Result<WidthResult> {
                let n = plan.widths[i];
                let child = plan.child(i)?;
                let mut sink = MemorySink::default();
                let log = train(&child, data, cfg, &mut sink)?;
                if !log.completed() {
                    return Ok(WidthResult {
                        n,
                        log,
                        d_tau: None,
                        profile: Vec::new(),
                        loss_gap: None,
                    });
                }
                let child_snaps: Vec<WeightSet> = sink.snapshots.into_iter().map(|s| s.1).collect();
                let restricted = ref_snaps
                    .iter()
                    .map(|w| w.gather(&plan.index_sets[i]))
                    .collect::<Result<Vec<_>>>()?;
                let profile = d_tau_profile(&child_snaps, &restricted)?;
                let d = d_tau(&child_snaps, &restricted, tau)?;
                let gap = loss_curve_gap(&log.records, &reference.records);
                Ok(WidthResult {
                    n,
                    log,
                    d_tau: Some(d),
                    profile,
                    loss_gap: Some(gap),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let points: Vec<(f64, f64)> = widths
        .iter()
        .filter_map(|w| {
            w.d_tau
                .filter(|&d| d > 0.0)
                .map(|d| ((w.n as f64).ln(), d.ln()))
        })
        .collect();
    Ok(CoupledRun {
        n_ref: plan.n_ref(),
        tau,
        reference,
        widths,
        fit: fit_line(&points),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_with_teacher, sample_batch, MapSpec};
    use crate::model::NetConfig;
    use crate::trainer::{init_weights, InitSpec};

    fn reference(n: usize, seed: u64) -> WeightSet {
        init_weights(
            NetConfig::new(n, 1, 2, 1.0).unwrap(),
            &InitSpec::student(n),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn full_identity_subsample_is_exact() {
        let r = reference(12, 1);
        let (c, idx) = subsample(&r, 12, 3, SamplingRule::Identity).unwrap();
        assert_eq!(idx, (0..12).collect::<Vec<_>>());
        assert_eq!(c, r);
    }

    #[test]
    fn full_draw_keeps_reference_order() {
        let r = reference(12, 1);
        let (c, idx) = subsample(&r, 12, 3, SamplingRule::WithoutReplacement).unwrap();
        assert_eq!(idx, (0..12).collect::<Vec<_>>());
        assert_eq!(c, r);
    }

    #[test]
    fn partial_draw_is_injective() {
        let idx = sample_indices(12, 11, 3, SamplingRule::WithoutReplacement).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 11);
        assert!(sorted.iter().all(|&i| i < 12));
    }

    #[test]
    fn singleton_takes_diagonal_entry() {
        let r = reference(9, 2);
        let (c, idx) = subsample(&r, 1, 5, SamplingRule::WithoutReplacement).unwrap();
        let s = idx[0];
        assert_eq!(c.w_hh[[0, 0]], r.w_hh[[s, s]]);
        assert_eq!(c.w_hy[0], r.w_hy[s]);
        assert_eq!(c.w_xh[[0, 0]], r.w_xh[[s, 0]]);
    }

    #[test]
    fn index_sets_are_deterministic_and_distinct() {
        for n in [1, 5, 20, 40] {
            let a = sample_indices(40, n, 77, SamplingRule::WithoutReplacement).unwrap();
            let b = sample_indices(40, n, 77, SamplingRule::WithoutReplacement).unwrap();
            assert_eq!(a, b);
            let mut s = a.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), n);
        }
        assert!(sample_indices(10, 11, 1, SamplingRule::WithoutReplacement).is_err());
        assert_eq!(
            sample_indices(10, 15, 1, SamplingRule::WithReplacement)
                .unwrap()
                .len(),
            15
        );
    }

    #[test]
    fn child_gathers_reference_entries() {
        let r = reference(30, 3);
        let plan =
            CouplingPlan::new(r.clone(), vec![4, 10], 9, SamplingRule::WithoutReplacement).unwrap();
        for (i, idx) in plan.index_sets.iter().enumerate() {
            let c = plan.child(i).unwrap();
            for a in 0..idx.len() {
                for b in 0..idx.len() {
                    assert_eq!(c.w_hh[[a, b]], r.w_hh[[idx[a], idx[b]]]);
                }
                assert_eq!(c.w_hy[a], r.w_hy[idx[a]]);
            }
        }
        assert!(CouplingPlan::new(r.clone(), vec![10, 4], 9, SamplingRule::Identity).is_err());
        assert!(CouplingPlan::new(r, vec![31], 9, SamplingRule::Identity).is_err());
    }

    #[test]
    fn distance_hand_cases() {
        let base = reference(4, 4);
        let one = std::slice::from_ref(&base);
        assert_eq!(d_tau(one, one, 0.0).unwrap(), 0.0);

        let mut shifted = base.clone();
        shifted.w_hy += 0.3;
        let d = snapshot_distance(&shifted, &base).unwrap();
        assert!((d - 0.3 / 2.0).abs() < 1e-15);

        let two = reference(2, 5);
        let mut bumped = two.clone();
        bumped.w_hh[[1, 0]] += 0.8;
        let d = snapshot_distance(&bumped, &two).unwrap();
        assert!((d - 0.8 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn d_tau_is_running_sup_and_checks_grids() {
        let base = reference(3, 6);
        let mut traj_c = Vec::new();
        let mut traj_r = Vec::new();
        for (k, eps) in [0.0, 0.4, 0.1, 0.6, 0.2].iter().enumerate() {
            let mut r = base.clone();
            r.t = k as f64;
            let mut c = r.clone();
            c.w_hy[0] += eps;
            traj_c.push(c);
            traj_r.push(r);
        }
        let prof = d_tau_profile(&traj_c, &traj_r).unwrap();
        assert!(prof.windows(2).all(|p| p[1].1 >= p[0].1));
        assert!((d_tau(&traj_c, &traj_r, 2.0).unwrap() - 0.4 / 3.0).abs() < 1e-15);
        assert!((d_tau(&traj_c, &traj_r, 4.0).unwrap() - 0.6 / 3.0).abs() < 1e-15);
        assert!(d_tau(&traj_c, &traj_r, 5.0).is_err());
        let mut shifted = traj_r.clone();
        shifted[2].t = 2.5;
        assert!(d_tau(&traj_c, &shifted, 4.0).is_err());
        assert!(d_tau(&traj_c[..3], &traj_r, 2.0).is_err());
    }

    #[test]
    fn line_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [10.0f64, 20.0, 40.0, 80.0]
            .iter()
            .map(|&n| (n.ln(), (3.0 * n.powf(-0.5)).ln()))
            .collect();
        let f = fit_line(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(fit_line(&pts[..1]).is_none());
    }

    fn sweep_data(seed: u64) -> SequenceBatch {
        let teacher = init_weights(
            NetConfig::new(5, 1, 2, 10.0).unwrap(),
            &InitSpec::teacher(5),
            seed,
        )
        .unwrap();
        let b = sample_batch(&MapSpec::shift_circle(), 48, 2, seed).unwrap();
        label_with_teacher(&b, &teacher).unwrap()
    }

    fn sweep_cfg(scaling: Scaling) -> TrainConfig {
        TrainConfig {
            beta: 0.05,
            steps: 40,
            scaling,
            snapshot_every: 5,
            seed: 0,
        }
    }

    #[test]
    fn self_coupling_has_zero_distance() {
        let r = reference(16, 7);
        let plan = CouplingPlan::new(r, vec![16], 1, SamplingRule::Identity).unwrap();
        let run = rate_sweep(&plan, &sweep_data(3), &sweep_cfg(Scaling::Meanfield), 1).unwrap();
        assert_eq!(run.widths[0].d_tau, Some(0.0));
        assert_eq!(run.widths[0].loss_gap, Some(0.0));
        assert!(run.fit.is_none());
        assert_eq!(run.table().len(), 1);
    }

    #[test]
    fn sweep_rejects_plain_scaling() {
        let plan = CouplingPlan::new(reference(8, 1), vec![4], 1, SamplingRule::Identity).unwrap();
        assert!(matches!(
            rate_sweep(&plan, &sweep_data(3), &sweep_cfg(Scaling::Plain), 1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn sweep_is_independent_of_jobs() {
        let plan = CouplingPlan::new(
            reference(40, 8),
            vec![5, 10, 20, 40],
            2,
            SamplingRule::WithoutReplacement,
        )
        .unwrap();
        let data = sweep_data(4);
        let a = rate_sweep(&plan, &data, &sweep_cfg(Scaling::Meanfield), 1).unwrap();
        let b = rate_sweep(&plan, &data, &sweep_cfg(Scaling::Meanfield), 3).unwrap();
        assert_eq!(a, b);
        for w in &a.widths {
            assert_eq!(w.profile[0].1, 0.0);
            assert!(w.profile.windows(2).all(|p| p[1].1 >= p[0].1));
        }
        assert!(a.fit.unwrap().slope.is_finite());
    }

    #[test]
    fn dtau_csv_round_trip() {
        let rows = vec![
            DtauRow {
                n: 20,
                tau: 3.0,
                d_tau: 0.25,
                fitted: Some(0.26),
            },
            DtauRow {
                n: 300,
                tau: 3.0,
                d_tau: 0.0,
                fitted: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dtau.csv");
        write_dtau_csv(&p, &rows).unwrap();
        assert_eq!(read_dtau_csv(&p).unwrap(), rows);
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("n,tau,D_tau,slope_fit\n"));
    }
}
