// SPDX-License-Identifier: Apache-2.0

//! Pipeline-level checks: grid search against step-by-step recomputation,
//! OD-test protocol ordering and self-consistency, and judge composition.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use napmon::calibration::GridCell;
use napmon::eval::{run_odtest_observed, DatasetRole, ProtocolEvent};
use napmon::extraction::extract_layer;
use napmon::synth::{SplitCounts, SyntheticTriplet};
use napmon::{
    accuracy, calibrate, extract_pattern, fit_thresholds, grid_search_layer, run_odtest, synth_generate, BinaryPattern,
    Criterion, LayerSpec, OdTestConfig, OdTestReport, PoolType, SearchSpace, SyntheticSpec, ThresholdMode, VoteScheme,
};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        ood_classes: 4,
        layers: vec![
            LayerSpec::conv("conv", 16, 4, 4),
            LayerSpec::conv("conv2", 24, 2, 2),
            LayerSpec::dense("fc", 48),
        ],
        id_noise_scale: 0.6,
        ood_shift_scale: 1.2,
        samples: SplitCounts {
            train: 300,
            validation: 120,
            test: 120,
        },
        seed,
    }
}

fn triplet(seed: u64) -> SyntheticTriplet {
    synth_generate(&small_spec(seed)).unwrap()
}

fn naive_hamming(a: &BinaryPattern, b: &BinaryPattern) -> u32 {
    a.unpack().iter().zip(b.unpack()).map(|(x, y)| u32::from(*x != y)).sum()
}

/// Exhaustive within-group squared deviation over every observed split,
/// smallest split within a relative 1e-9 of the minimum.
fn otsu_oracle(d_in: &[u32], d_out: &[u32]) -> u32 {
    let pool: Vec<f64> = d_in.iter().chain(d_out).map(|&d| f64::from(d)).collect();
    let mut candidates: Vec<u32> = d_in.iter().chain(d_out).copied().collect();
    candidates.sort_unstable();
    candidates.dedup();
    let ss = |g: &[f64]| {
        let m = g.iter().sum::<f64>() / g.len().max(1) as f64;
        g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let score = |c: u32| {
        let lo: Vec<f64> = pool.iter().copied().filter(|&d| d <= f64::from(c)).collect();
        let hi: Vec<f64> = pool.iter().copied().filter(|&d| d > f64::from(c)).collect();
        ss(&lo) + ss(&hi)
    };
    let best = candidates.iter().map(|&c| score(c)).fold(f64::INFINITY, f64::min);
    *candidates
        .iter()
        .find(|&&c| (score(c) - best).abs() <= 1e-9 * best.max(1.0))
        .unwrap()
}

#[test]
fn grid_cells_match_step_by_step_recomputation() {
    let t = triplet(11);
    let space = SearchSpace {
        p_grid: vec![30.0, 60.0, 90.0],
        pools: vec![PoolType::Max, PoolType::Avg],
        mode: ThresholdMode::PerPattern,
        criterion: Criterion::Hybrid,
    };
    let train = t.train.layer("conv").unwrap();
    let valid = t.validation.layer("conv").unwrap();
    let search = grid_search_layer(train, valid, &space).unwrap();
    assert_eq!(search.cells.len(), 6);

    let mut oracle_cells = Vec::new();
    for &p in &space.p_grid {
        for &pool in &space.pools {
            let cfg = fit_thresholds(train, p, pool, space.mode).unwrap();
            let tr = extract_layer(train, &cfg).unwrap();
            let va = extract_layer(valid, &cfg).unwrap();
            let d_in: Vec<u32> = (0..tr.len())
                .map(|i| {
                    (0..tr.len())
                        .filter(|&j| j != i)
                        .map(|j| naive_hamming(&tr[i], &tr[j]))
                        .min()
                        .unwrap()
                })
                .collect();
            let d_out: Vec<u32> = va
                .iter()
                .map(|q| tr.iter().map(|u| naive_hamming(q, u)).min().unwrap())
                .collect();
            let tau = otsu_oracle(&d_in, &d_out);
            let kept = d_in.iter().filter(|&&d| d <= tau).count() as f64 / d_in.len() as f64;
            let flagged = d_out.iter().filter(|&&d| d > tau).count() as f64 / d_out.len() as f64;
            oracle_cells.push(GridCell {
                tau_scaled: f64::from(tau) / 16.0,
                val_accuracy: 0.5 * (kept + flagged),
                cfg,
                tau,
            });
        }
    }
    for want in &oracle_cells {
        let got = search
            .cells
            .iter()
            .find(|c| c.cfg.p == want.cfg.p && c.cfg.pool == want.cfg.pool)
            .unwrap();
        assert_eq!(got.tau, want.tau, "p={} {:?}", want.cfg.p, want.cfg.pool);
        assert!((got.val_accuracy - want.val_accuracy).abs() < 1e-12);
        assert_eq!(got.cfg, want.cfg);
    }

    // Hybrid re-ranking: near-best accuracy, then smallest scaled tau, then
    // larger p, then max pooling.
    let top = oracle_cells.iter().map(|c| c.val_accuracy).fold(0.0, f64::max);
    let mut eligible: Vec<&GridCell> = oracle_cells
        .iter()
        .filter(|c| c.val_accuracy >= top - 0.01 - 1e-12)
        .collect();
    eligible.sort_by(|a, b| {
        a.tau_scaled
            .total_cmp(&b.tau_scaled)
            .then(b.cfg.p.total_cmp(&a.cfg.p))
            .then((a.cfg.pool == PoolType::Avg).cmp(&(b.cfg.pool == PoolType::Avg)))
    });
    let want = eligible[0];
    assert_eq!((search.best.cfg.p, search.best.cfg.pool), (want.cfg.p, want.cfg.pool));
    assert_eq!(search.best.tau, want.tau);
}

#[test]
fn single_candidate_grid_and_determinism() {
    let t = triplet(12);
    let space = SearchSpace {
        p_grid: vec![70.0],
        pools: vec![PoolType::Avg],
        ..SearchSpace::default()
    };
    let train = t.train.layer("conv2").unwrap();
    let valid = t.validation.layer("conv2").unwrap();
    let a = grid_search_layer(train, valid, &space).unwrap();
    let b = grid_search_layer(train, valid, &space).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cells.len(), 1);
    assert_eq!(a.best.tau, a.cells[0].tau);
    assert_eq!(a.best.val_accuracy, a.cells[0].val_accuracy);
    assert_eq!((a.best.cfg.p, a.best.cfg.pool), (70.0, PoolType::Avg));
}

#[test]
fn test_set_is_read_only_after_calibration_is_frozen() {
    let t = triplet(13);
    let mut events = Vec::new();
    run_odtest_observed(&t.train, &t.validation, &t.test, &OdTestConfig::default(), &mut |e| {
        events.push(e)
    })
    .unwrap();
    let frozen = events
        .iter()
        .position(|e| *e == ProtocolEvent::CalibrationFrozen)
        .unwrap();
    let test = events
        .iter()
        .position(|e| *e == ProtocolEvent::Read(DatasetRole::Test))
        .unwrap();
    let id_eval = events
        .iter()
        .position(|e| *e == ProtocolEvent::Read(DatasetRole::IdEval))
        .unwrap();
    assert!(frozen < test && frozen < id_eval);
    assert!(events[..frozen].contains(&ProtocolEvent::Read(DatasetRole::Train)));
    assert!(events[..frozen].contains(&ProtocolEvent::Read(DatasetRole::Validation)));
}

fn without_latency(r: &OdTestReport) -> OdTestReport {
    OdTestReport {
        latency_s: 0.0,
        ..r.clone()
    }
}

#[test]
fn report_is_populated_and_deterministic() {
    let t = triplet(14);
    let cfg = OdTestConfig::default();
    let a = run_odtest(&t.train, &t.validation, &t.test, &cfg).unwrap();
    let b = run_odtest(&t.train, &t.validation, &t.test, &cfg).unwrap();
    assert_eq!(without_latency(&a), without_latency(&b));
    assert_eq!(a.layers.len(), 3);
    assert_eq!(a.n_id_test, 60);
    assert_eq!(a.n_ood_test, 60);
    assert!(a.latency_s > 0.0);
    for m in [a.val_accuracy, a.test_accuracy, a.test_auroc.unwrap()] {
        assert!((0.0..=1.0).contains(&m));
    }
    assert_eq!(a.train_dataset, "synthetic-id");
    assert_eq!(a.test_dataset, "synthetic-ood-b");

    let other = run_odtest(
        &t.train,
        &t.validation,
        &t.test,
        &OdTestConfig { seed: 1, ..cfg.clone() },
    )
    .unwrap();
    assert_ne!(without_latency(&a), without_latency(&other));

    let s2 = OdTestConfig {
        scheme: VoteScheme::Scheme2,
        ..cfg
    };
    assert!(run_odtest(&t.train, &t.validation, &t.test, &s2)
        .unwrap()
        .test_auroc
        .is_none());
}

#[test]
fn validation_as_test_is_self_consistent() {
    let t = synth_generate(&SyntheticSpec::reference()).unwrap();
    let r = run_odtest(&t.train, &t.validation, &t.validation, &OdTestConfig::default()).unwrap();
    assert!(
        (r.test_accuracy - r.val_accuracy).abs() <= 0.05,
        "test {} vs validation {}",
        r.test_accuracy,
        r.val_accuracy
    );
}

#[test]
fn protocol_errors() {
    let t = triplet(15);
    let other = synth_generate(&SyntheticSpec {
        layers: vec![LayerSpec::dense("fc", 48)],
        ..small_spec(15)
    })
    .unwrap();
    assert!(run_odtest(&t.train, &other.validation, &t.test, &OdTestConfig::default()).is_err());

    let tiny = synth_generate(&SyntheticSpec {
        samples: SplitCounts {
            train: 2,
            validation: 5,
            test: 5,
        },
        ..small_spec(15)
    })
    .unwrap();
    assert!(run_odtest(&tiny.train, &tiny.validation, &tiny.test, &OdTestConfig::default()).is_err());
    let bad = OdTestConfig {
        train_fraction: 1.0,
        ..OdTestConfig::default()
    };
    assert!(run_odtest(&t.train, &t.validation, &t.test, &bad).is_err());
}

#[test]
fn judge_equals_composed_steps() {
    let t = triplet(16);
    let cal = calibrate(&t.train, &t.validation, &SearchSpace::default(), 3, VoteScheme::Scheme1).unwrap();
    let monitor = &cal.monitor;
    for i in 0..t.test.sample_count() {
        let sample = t.test.sample(i);
        let mut score = 0.0;
        for (cal, store) in monitor.config().layers().iter().zip(monitor.stores()) {
            let data = t.test.layer(cal.layer_name()).unwrap();
            let q = extract_pattern(data.sample(i), &cal.spec, &cal.cfg).unwrap();
            let d = (0..store.len())
                .map(|j| naive_hamming(&q, &store.pattern(j)))
                .min()
                .unwrap();
            score += f64::from(d) / cal.bit_len as f64 - f64::from(cal.tau) / cal.bit_len as f64;
        }
        let v = monitor.judge(&sample).unwrap();
        assert!((v.score.unwrap() - score).abs() < 1e-12);
        assert_eq!(v.is_ood, v.score.unwrap() > 0.0);
    }
}

#[test]
fn random_verdicts_sit_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let labels: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
    let trials = 2000;
    let mean: f64 = (0..trials)
        .map(|_| {
            let v: Vec<bool> = (0..400).map(|_| rng.random()).collect();
            accuracy(&v, &labels).unwrap()
        })
        .sum::<f64>()
        / trials as f64;
    assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
}

#[test]
fn activations_by_map_are_accepted() {
    let t = triplet(18);
    let cal = calibrate(&t.train, &t.validation, &SearchSpace::default(), 1, VoteScheme::Scheme2).unwrap();
    let name = cal.monitor.config().layers()[0].layer_name().to_owned();
    let row = t.test.layer(&name).unwrap().sample(0).to_vec();
    let map: HashMap<String, Vec<f32>> = [(name, row)].into();
    assert_eq!(
        cal.monitor.judge(&map).unwrap(),
        cal.monitor.judge(&t.test.sample(0)).unwrap()
    );
}
