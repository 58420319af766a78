//! Stationarity functionals of a trajectory against a late reference state.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{config_err, Error, Result};
use crate::grad::{readout_gradient, Scaling};
use crate::model::WeightSet;

/// `(1/n^{i+1}) sum_{j_0..j_i} v(j_0) M(j_0,j_1) ... M(j_{i-2},j_{i-1}) D(j_{i-1},j_i)`.
///
/// Evaluated right to left as `i - 1` products with `M/n` and one
/// contraction with `D/n`, so the cost is `O(i n^2)`.
pub fn chain_quadratic(v: &Array1<f64>, m: &Array2<f64>, d: &Array2<f64>, i: usize) -> Result<f64> {
    if i < 1 {
        return Err(Error::Precondition("chain length must be >= 1".into()));
    }
    let n = v.len();
    if m.dim() != (n, n) || d.dim() != (n, n) {
        return Err(config_err(format!(
            "chain operands must be {n}x{n}, got M {:?}, D {:?}",
            m.dim(),
            d.dim()
        )));
    }
    let nf = n as f64;
    let mut w = v / nf;
    for _ in 1..i {
        w = m.t().dot(&w) / nf;
    }
    let row_means = d.sum_axis(ndarray::Axis(1)) / nf;
    Ok(w.dot(&row_means))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub t: f64,
    pub t_ref: f64,
    /// `max_j |g_hy(j)|` with mean-field scaling.
    pub q1: f64,
    /// `(1/n) sum_j (Wbar_hy(j) - W_hy(j))^2`.
    pub q2: f64,
    /// Chain-weighted hidden-weight discrepancy, `i = 1..L`.
    pub q3: Vec<f64>,
    /// Chain-weighted input-weight discrepancy, `i = 1..L`.
    pub q4: Vec<f64>,
}

fn check_pair(current: &WeightSet, reference: &WeightSet) -> Result<()> {
    current.check_shapes()?;
    reference.check_shapes()?;
    let (a, b) = (&current.config, &reference.config);
    if a.n != b.n || a.d != b.d || a.memory != b.memory {
        return Err(config_err(format!(
            "snapshot configs differ: (n={}, d={}, L={}) vs (n={}, d={}, L={})",
            a.n, a.d, a.memory, b.n, b.d, b.memory
        )));
    }
    Ok(())
}

/// The four functionals at `current`, with `reference` standing in for the
/// limit point. The gradient term uses `batch`.
pub fn report(
    current: &WeightSet,
    reference: &WeightSet,
    batch: &SequenceBatch,
) -> Result<StationarityReport> {
    check_pair(current, reference)?;
    let n = current.n();
    let depth = current.config.memory;

    let g_hy = readout_gradient(current, batch, Scaling::Meanfield)?;
    let q1 = g_hy.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));

    let q2 = Zip::from(&reference.w_hy)
        .and(&current.w_hy)
        .fold(0.0, |acc, &r, &c| acc + (r - c) * (r - c))
        / n as f64;

    let v = reference.w_hy.mapv(|x| x * x);
    let m = reference.w_hh.mapv(|x| x * x);
    let mut d_hh = &reference.w_hh - &current.w_hh;
    d_hh.mapv_inplace(|x| x * x);
    let xh_gap: Array1<f64> = (&reference.w_xh - &current.w_xh)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r))
        .collect();
    let d_xh = Array2::from_shape_fn((n, n), |(j, _)| xh_gap[j]);

    let q3 = (1..=depth)
        .map(|i| chain_quadratic(&v, &m, &d_hh, i))
        .collect::<Result<Vec<_>>>()?;
    let q4 = (1..=depth)
        .map(|i| chain_quadratic(&v, &m, &d_xh, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(StationarityReport {
        t: current.t,
        t_ref: reference.t,
        q1,
        q2,
        q3,
        q4,
    })
}

pub fn report_header(depth: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "q1".into(), "q2".into()];
    h.extend((1..=depth).map(|i| format!("q3_{i}")));
    h.extend((1..=depth).map(|i| format!("q4_{i}")));
    h
}

pub fn write_reports(path: &Path, depth: usize, reports: &[StationarityReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(report_header(depth))?;
    for r in reports {
        if r.q3.len() != depth || r.q4.len() != depth {
            return Err(config_err("report depth does not match header"));
        }
        let mut row = vec![r.t.to_string(), r.q1.to_string(), r.q2.to_string()];
        row.extend(r.q3.iter().chain(&r.q4).map(|v| v.to_string()));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a report CSV. `t_ref` is not stored and comes back as NaN.
pub fn read_reports(path: &Path) -> Result<Vec<StationarityReport>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let cols = header.len();
    if cols < 3 || (cols - 3) % 2 != 0 {
        return Err(Error::Format(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let depth = (cols - 3) / 2;
    if header
        .iter()
        .ne(report_header(depth).iter().map(String::as_str))
    {
        return Err(Error::Format(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        out.push(StationarityReport {
            t: vals[0],
            t_ref: f64::NAN,
            q1: vals[1],
            q2: vals[2],
            q3: vals[3..3 + depth].to_vec(),
            q4: vals[3 + depth..].to_vec(),
        });
    }
    Ok(out)
}

/// True if no value exceeds its predecessor by more than the relative
/// tolerance `tol` plus the absolute slack `abs_floor`.
pub fn non_increasing_within(xs: &[f64], tol: f64, abs_floor: f64) -> bool {
    xs.windows(2)
        .all(|p| p[1] <= p[0] * (1.0 + tol) + abs_floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_with_teacher, sample_batch, MapSpec};
    use crate::model::NetConfig;
    use crate::trainer::{init_weights, InitSpec};
    use ndarray::array;
    use proptest::prelude::*;

    fn brute(v: &Array1<f64>, m: &Array2<f64>, d: &Array2<f64>, i: usize) -> f64 {
        let n = v.len();
        let mut idx = vec![0usize; i + 1];
        let mut total = 0.0;
        loop {
            let mut term = v[idx[0]];
            for l in 1..i {
                term *= m[[idx[l - 1], idx[l]]];
            }
            term *= d[[idx[i - 1], idx[i]]];
            total += term;
            let mut p = 0;
            loop {
                if p > i {
                    return total / (n as f64).powi(i as i32 + 1);
                }
                idx[p] += 1;
                if idx[p] < n {
                    break;
                }
                idx[p] = 0;
                p += 1;
            }
        }
    }

    #[test]
    fn zero_terminal_gives_zero() {
        let v = array![1.0, 2.0, 3.0];
        let m = Array2::from_elem((3, 3), 0.7);
        let d = Array2::zeros((3, 3));
        for i in 1..4 {
            assert_eq!(chain_quadratic(&v, &m, &d, i).unwrap(), 0.0);
        }
    }

    #[test]
    fn length_one_ignores_edges() {
        let v = array![1.0, -2.0];
        let d = array![[1.0, 2.0], [3.0, 4.0]];
        let m = Array2::from_elem((2, 2), f64::NAN);
        let want = (1.0 * 3.0 - 2.0 * 7.0) / 4.0;
        assert_eq!(chain_quadratic(&v, &m, &d, 1).unwrap(), want);
    }

    #[test]
    fn length_zero_rejected() {
        let v = array![1.0];
        let m = array![[1.0]];
        assert!(matches!(
            chain_quadratic(&v, &m, &m, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn hand_instance_n2_i2() {
        let v = array![0.3, -1.1];
        let m = array![[0.5, -0.2], [1.3, 0.9]];
        let d = array![[0.4, 0.0], [2.0, -0.6]];
        let want = brute(&v, &m, &d, 2);
        assert!((chain_quadratic(&v, &m, &d, 2).unwrap() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_sum(
            n in 1usize..=5,
            i in 1usize..=3,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 0);
            let mut u = || rng.random_range(-1.5..1.5);
            let v = Array1::from_shape_simple_fn(n, &mut u);
            let m = Array2::from_shape_simple_fn((n, n), &mut u);
            let d = Array2::from_shape_simple_fn((n, n), &mut u);
            let fast = chain_quadratic(&v, &m, &d, i).unwrap();
            prop_assert!((fast - brute(&v, &m, &d, i)).abs() < 1e-12);
        }
    }

    fn setup(n: usize, memory: usize, seed: u64) -> (WeightSet, SequenceBatch) {
        let teacher = init_weights(
            NetConfig::new(3, 1, memory, 10.0).unwrap(),
            &InitSpec::teacher(3),
            seed,
        )
        .unwrap();
        let batch = sample_batch(&MapSpec::shift_circle(), 16, memory, seed).unwrap();
        let batch = label_with_teacher(&batch, &teacher).unwrap();
        let w = init_weights(
            NetConfig::new(n, 1, memory, 10.0).unwrap(),
            &InitSpec::student(n),
            seed + 1,
        )
        .unwrap();
        (w, batch)
    }

    #[test]
    fn identical_pair_has_zero_discrepancies() {
        let (w, batch) = setup(4, 2, 3);
        let r = report(&w, &w, &batch).unwrap();
        assert!(r.q1 > 0.0);
        assert_eq!(r.q2, 0.0);
        assert!(r.q3.iter().chain(&r.q4).all(|&q| q == 0.0));
        assert_eq!(r.q3.len(), 2);
    }

    #[test]
    fn exact_stationarity_reports_all_zero() {
        let w = WeightSet::zeros(NetConfig::new(3, 1, 2, 1.0).unwrap());
        let batch = sample_batch(&MapSpec::shift_circle(), 8, 2, 1).unwrap();
        let batch = label_with_teacher(&batch, &w).unwrap();
        let r = report(&w, &w, &batch).unwrap();
        assert_eq!(r.q1, 0.0);
        assert_eq!(r.q2, 0.0);
        assert!(r.q3.iter().chain(&r.q4).all(|&q| q == 0.0));
    }

    #[test]
    fn n3_l2_matches_nested_sums() {
        let (cur, batch) = setup(3, 2, 5);
        let (mut reference, _) = setup(3, 2, 9);
        reference.t = 4.0;
        let r = report(&cur, &reference, &batch).unwrap();
        let n = 3usize;
        let wb = &reference;
        for i in 1..=2usize {
            let (mut s3, mut s4) = (0.0, 0.0);
            let chains = n.pow(i as u32 + 1);
            for c in 0..chains {
                let idx: Vec<usize> = (0..=i).map(|p| (c / n.pow(p as u32)) % n).collect();
                let mut w = wb.w_hy[idx[0]].powi(2);
                for l in 1..i {
                    w *= wb.w_hh[[idx[l - 1], idx[l]]].powi(2);
                }
                let (a, b) = (idx[i - 1], idx[i]);
                s3 += w * (wb.w_hh[[a, b]] - cur.w_hh[[a, b]]).powi(2);
                s4 += w * (wb.w_xh[[a, 0]] - cur.w_xh[[a, 0]]).powi(2);
            }
            let norm = (n as f64).powi(i as i32 + 1);
            assert!((r.q3[i - 1] - s3 / norm).abs() < 1e-12);
            assert!((r.q4[i - 1] - s4 / norm).abs() < 1e-12);
        }
        assert_eq!(r.t_ref, 4.0);
        assert!(r.q2 > 0.0);
    }

    #[test]
    fn config_mismatch_rejected() {
        let (a, batch) = setup(3, 2, 1);
        let (b, _) = setup(4, 2, 1);
        assert!(matches!(report(&a, &b, &batch), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![
            StationarityReport {
                t: 0.0,
                t_ref: 1.0,
                q1: 0.5,
                q2: 0.25,
                q3: vec![1.0, 2.0],
                q4: vec![3.0, 4.0],
            },
            StationarityReport {
                t: 0.5,
                t_ref: 1.0,
                q1: 0.1,
                q2: 0.0,
                q3: vec![0.0, 1e-300],
                q4: vec![0.125, 7.0],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stationarity.csv");
        write_reports(&p, 2, &rs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,q1,q2,q3_1,q3_2,q4_1,q4_2\n"));
        let back = read_reports(&p).unwrap();
        for (a, b) in rs.iter().zip(&back) {
            assert_eq!((a.t, a.q1, a.q2), (b.t, b.q1, b.q2));
            assert_eq!((&a.q3, &a.q4), (&b.q3, &b.q4));
        }
    }

    #[test]
    fn monotone_tolerance() {
        assert!(non_increasing_within(&[5.0, 4.0, 4.3, 3.0], 0.1, 0.0));
        assert!(!non_increasing_within(&[5.0, 4.0, 4.5], 0.1, 0.0));
        assert!(non_increasing_within(&[5.0, 5.4, 5.9], 0.1, 0.0));
        assert!(non_increasing_within(&[0.0, 1e-20], 0.1, 1e-15));
    }
}
