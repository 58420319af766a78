use mfrnn::data::MapDescriptor;
use mfrnn::grad::{backward, chain_oracle};
use mfrnn::model::invert_permutation;
use mfrnn::trainer::{MemorySink, NullSink};
use mfrnn::*;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

fn rng(seed: u64) -> ChaCha20Rng {
    mfrnn::rng::stream(seed, 99)
}

fn random_weights(r: &mut ChaCha20Rng, n: usize, d: usize, l: usize, scale: f64) -> WeightSet {
    let cfg = NetConfig::new(n, d, l, 10.0).unwrap();
    let mut u = || r.random_range(-scale..scale);
    WeightSet::from_parts(
        cfg,
        Array2::from_shape_simple_fn((n, d), &mut u),
        Array2::from_shape_simple_fn((n, n), &mut u),
        Array1::from_shape_simple_fn(n, &mut u),
        0.0,
    )
    .unwrap()
}

fn random_batch(r: &mut ChaCha20Rng, m: usize, l: usize, d: usize) -> SequenceBatch {
    SequenceBatch {
        sequences: Array3::from_shape_simple_fn((m, l + 1, d), || r.random_range(-2.0..2.0)),
        targets: Some(Array1::from_shape_simple_fn(m, || {
            r.random_range(-1.0..1.0)
        })),
        seed: 0,
        map: MapDescriptor {
            kind: "random".into(),
            parameters: vec![],
            source: None,
        },
    }
}

/// Central differences of the risk, one block at a time; returns the
/// largest `max|g - fd| / max|g|` over the three blocks.
fn fd_relative_error(w: &WeightSet, b: &SequenceBatch, h: f64) -> f64 {
    let g = gradient(w, b, Scaling::Plain).unwrap();
    let central = |f: &dyn Fn(&mut WeightSet, f64)| {
        let mut p = w.clone();
        f(&mut p, h);
        let mut q = w.clone();
        f(&mut q, -h);
        (loss(&p, b).unwrap() - loss(&q, b).unwrap()) / (2.0 * h)
    };
    let rel = |pairs: Vec<(f64, f64)>| {
        let scale = pairs.iter().fold(0.0f64, |a, p| a.max(p.0.abs()));
        let err = pairs.iter().fold(0.0f64, |a, p| a.max((p.0 - p.1).abs()));
        if scale == 0.0 {
            err
        } else {
            err / scale
        }
    };
    let (n, d) = (w.n(), w.config.d);
    let hy = (0..n)
        .map(|j| (g.g_hy[j], central(&|v, e| v.w_hy[j] += e)))
        .collect();
    let xh = (0..n)
        .flat_map(|j| (0..d).map(move |c| (j, c)))
        .map(|(j, c)| (g.g_xh[[j, c]], central(&|v, e| v.w_xh[[j, c]] += e)))
        .collect();
    let hh = (0..n)
        .flat_map(|j| (0..n).map(move |k| (j, k)))
        .map(|(j, k)| (g.g_hh[[j, k]], central(&|v, e| v.w_hh[[j, k]] += e)))
        .collect();
    rel(hy).max(rel(xh)).max(rel(hh))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plain_gradient_matches_finite_differences(
        n in 1usize..=12,
        l in 0usize..=4,
        d in 1usize..=3,
        m in 1usize..=16,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let w = random_weights(&mut r, n, d, l, 1.5);
        let b = random_batch(&mut r, m, l, d);
        let err = fd_relative_error(&w, &b, 1e-5);
        prop_assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn adjoint_matches_chain_enumeration(
        n in 1usize..=6,
        l in 0usize..=3,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let w = random_weights(&mut r, n, 1, l, 2.0);
        let x = Array2::from_shape_simple_fn((l + 1, 1), || r.random_range(0.0..std::f64::consts::TAU));
        let trace = mfrnn::forward(&w, x.view()).unwrap();
        let adj = backward(&w, &trace, 0.0).unwrap();
        for i in 0..=l {
            let oracle = chain_oracle(&w, x.view(), i).unwrap();
            for j in 0..n {
                prop_assert!((adj.g[[i, j]] - oracle[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_and_gradients_are_permutation_equivariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (n, l, d) = (8, 3, 2);
        let w = random_weights(&mut r, n, d, l, 1.0);
        let b = random_batch(&mut r, 12, l, d);
        let mut pi: Vec<usize> = (0..n).collect();
        pi.shuffle(&mut r);
        let wp = permute(&w, &pi).unwrap();
        let outs = |v: &WeightSet| -> Vec<f64> {
            (0..b.m()).map(|i| mfrnn::forward(v, b.sequence(i)).unwrap().output).collect()
        };
        let (a, c) = (outs(&w), outs(&wp));
        let scale = a.iter().fold(0.0f64, |s, x| s.max(x.abs()));
        prop_assert!(a.iter().zip(&c).all(|(x, y)| (x - y).abs() <= 1e-12 * scale));
        for scaling in [Scaling::Plain, Scaling::Meanfield] {
            let g = gradient(&w, &b, scaling).unwrap().permuted(&pi).unwrap();
            let gp = gradient(&wp, &b, scaling).unwrap();
            let scale = g.max_abs();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * scale;
            prop_assert!(g.g_hy.iter().zip(&gp.g_hy).all(|(x, y)| close(*x, *y)));
            prop_assert!(g.g_xh.iter().zip(&gp.g_xh).all(|(x, y)| close(*x, *y)));
            prop_assert!(g.g_hh.iter().zip(&gp.g_hh).all(|(x, y)| close(*x, *y)));
        }
        let back = permute(&wp, &invert_permutation(&pi).unwrap()).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn truncated_flow_never_leaves_the_radius(seed in any::<u64>(), beta in 0.01f64..2.0) {
        let mut r = rng(seed);
        let (n, l) = (6, 2);
        let mut w = random_weights(&mut r, n, 1, l, 0.5);
        w.config.radius = 0.6;
        let b = random_batch(&mut r, 8, l, 1);
        let cfg = TrainConfig { beta, steps: 30, scaling: Scaling::Meanfield, snapshot_every: 1, seed: 0 };
        let mut sink = MemorySink::default();
        let log = train(&w, &b, &cfg, &mut sink).unwrap();
        for (_, s) in &sink.snapshots {
            prop_assert!(s.max_abs_hh() <= 0.6);
        }
        prop_assert!(log.records.iter().all(|rec| rec.max_abs_whh <= 0.6));
    }
}

/// Kolmogorov-Smirnov distance of `xs` to the uniform law on [0, 2pi).
fn ks_uniform(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = x / std::f64::consts::TAU;
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn shift_map_preserves_the_uniform_law_at_every_lag() {
    let m = 8192;
    let b = sample_batch(&MapSpec::shift_circle(), m, 10, 2024).unwrap();
    // 99.9% critical value of the one-sample KS statistic
    let crit = 1.95 / (m as f64).sqrt();
    for k in 0..=10 {
        let mut xs: Vec<f64> = b.lag(k).iter().copied().collect();
        let ks = ks_uniform(&mut xs);
        assert!(ks < crit, "lag {k}: KS {ks} >= {crit}");
    }
}

#[test]
fn small_plain_steps_decrease_the_risk_at_desk_scale() {
    let teacher = init_weights(
        NetConfig::new(15, 1, 10, 1.0).unwrap(),
        &InitSpec::teacher(15),
        0,
    )
    .unwrap();
    let b = sample_batch(&MapSpec::shift_circle(), 1024, 10, 7).unwrap();
    let b = label_with_teacher(&b, &teacher).unwrap();
    let w = init_weights(
        NetConfig::new(300, 1, 10, 1.0).unwrap(),
        &InitSpec::student(300),
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        beta: 1e-4,
        steps: 200,
        scaling: Scaling::Plain,
        snapshot_every: 200,
        seed: 1,
    };
    let log = train(&w, &b, &cfg, &mut NullSink).unwrap();
    assert!(log.completed());
    for pair in log.records.windows(2) {
        let (a, c) = (pair[0].loss, pair[1].loss);
        assert!(c <= a * (1.0 + 1e-9), "step {}: {a} -> {c}", pair[1].step);
    }
}

#[test]
fn snapshot_resume_continues_bit_exactly() {
    let mut r = rng(5);
    let w = random_weights(&mut r, 7, 1, 3, 0.8);
    let b = random_batch(&mut r, 10, 3, 1);
    let cfg = TrainConfig {
        beta: 0.02,
        steps: 40,
        scaling: Scaling::Meanfield,
        snapshot_every: 10,
        seed: 0,
    };
    let mut sink = MemorySink::default();
    let full = train(&w, &b, &cfg, &mut sink).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.mfw");
    mfrnn::snapshot::save(&path, &sink.snapshots[2].1).unwrap();
    let mid = mfrnn::snapshot::load(&path).unwrap();
    assert_eq!(mid, sink.snapshots[2].1);

    let mut tail = MemorySink::default();
    let resumed = train(&mid, &b, &cfg, &mut tail).unwrap();
    assert_eq!(resumed.records[0].step, 20);
    for (a, c) in full.records[20..].iter().zip(&resumed.records) {
        assert_eq!(
            (a.step, a.t, a.loss, a.grad_hh),
            (c.step, c.t, c.loss, c.grad_hh)
        );
    }
    assert_eq!(
        tail.snapshots.last().unwrap().1,
        sink.snapshots.last().unwrap().1
    );
}

#[test]
fn chain_quadratic_matches_nested_sums() {
    let mut r = rng(11);
    for n in 1..=5usize {
        for i in 1..=3usize {
            let mut u = || r.random_range(-1.0..1.0);
            let v = Array1::from_shape_simple_fn(n, &mut u);
            let m = Array2::from_shape_simple_fn((n, n), &mut u);
            let d = Array2::from_shape_simple_fn((n, n), &mut u);
            let mut total = 0.0;
            for c in 0..n.pow(i as u32 + 1) {
                let idx: Vec<usize> = (0..=i).map(|p| (c / n.pow(p as u32)) % n).collect();
                let mut term = v[idx[0]];
                for l in 1..i {
                    term *= m[[idx[l - 1], idx[l]]];
                }
                total += term * d[[idx[i - 1], idx[i]]];
            }
            let want = total / (n as f64).powi(i as i32 + 1);
            let got = chain_quadratic(&v, &m, &d, i).unwrap();
            assert!((got - want).abs() < 1e-12, "n={n} i={i}: {got} vs {want}");
        }
    }
}
