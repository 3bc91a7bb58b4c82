// SPDX-License-Identifier: Apache-2.0

//! Three-dataset OOD evaluation.
//!
//! The monitor is calibrated on training ID data (a seeded 80 % share of
//! `D_s`) against a validation OOD set `D_v`, then frozen and tested on the
//! held-out 20 % of `D_s` against an unseen OOD set `D_t`. The test set is
//! balanced by downsampling the larger side.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_layers, cell_distances, select_layers, LayerSearch, SearchSpace, VoteScheme};
use crate::dump::ActivationDump;
use crate::error::{NapError, Result};
use crate::extraction::Features;
use crate::monitor::Monitor;
use crate::store::PatternStore;

/// Area under the ROC curve with `true` labels as the positive (OOD) class:
/// the probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(NapError::InvalidConfig(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(NapError::InvalidConfig("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(NapError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Balanced accuracy: mean of the per-class correct rates. `true` means OOD.
pub fn accuracy(verdicts: &[bool], labels: &[bool]) -> Result<f64> {
    if verdicts.len() != labels.len() {
        return Err(NapError::InvalidConfig(format!(
            "{} verdicts for {} labels",
            verdicts.len(),
            labels.len()
        )));
    }
    if verdicts.is_empty() {
        return Err(NapError::Empty("no verdicts"));
    }
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for (&v, &l) in verdicts.iter().zip(labels) {
        total[usize::from(l)] += 1;
        correct[usize::from(l)] += usize::from(v == l);
    }
    if total.contains(&0) {
        return Err(NapError::SingleClass);
    }
    Ok(0.5 * (correct[0] as f64 / total[0] as f64 + correct[1] as f64 / total[1] as f64))
}

/// Which dataset of the protocol a step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetRole {
    Train,
    Validation,
    IdEval,
    Test,
}

/// Protocol milestones reported to an observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolEvent {
    Read(DatasetRole),
    CalibrationFrozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdTestConfig {
    pub search: SearchSpace,
    pub k: usize,
    pub scheme: VoteScheme,
    pub seed: u64,
    /// Share of `D_s` used for calibration; the rest is the ID test set.
    pub train_fraction: f64,
}

impl Default for OdTestConfig {
    fn default() -> Self {
        Self {
            search: SearchSpace::default(),
            k: 3,
            scheme: VoteScheme::Scheme1,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub p: f64,
    pub pool: crate::extraction::PoolType,
    pub mode: crate::extraction::ThresholdMode,
    pub bit_len: usize,
    pub tau: u32,
    pub tau_scaled: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_auroc: f64,
}

/// Metrics of a frozen monitor on a balanced ID/OOD test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_id: usize,
    pub n_ood: usize,
    pub accuracy: f64,
    /// Absent under majority voting, which yields no ranking score.
    pub auroc: Option<f64>,
    pub per_layer: Vec<LayerSummary>,
    /// Mean wall-clock seconds per `judge` call.
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdTestReport {
    pub train_dataset: String,
    pub validation_dataset: String,
    pub test_dataset: String,
    pub vote_scheme: VoteScheme,
    pub k: usize,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_auroc: Option<f64>,
    pub n_id_test: usize,
    pub n_ood_test: usize,
    pub latency_s: f64,
    pub layers: Vec<LayerSummary>,
}

impl OdTestReport {
    /// Fixed-width human-readable rendering.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "OD-test  D_s={}  D_v={}  D_t={}\n\
             scheme={:?} k={} seed={}\n\
             val_accuracy   {:.4}\n\
             test_accuracy  {:.4}\n\
             test_auroc     {}\n\
             test samples   {} ID / {} OOD\n\
             latency        {:.6} s/sample\n\n",
            self.train_dataset,
            self.validation_dataset,
            self.test_dataset,
            self.vote_scheme,
            self.k,
            self.seed,
            self.val_accuracy,
            self.test_accuracy,
            self.test_auroc.map_or("n/a".into(), |a| format!("{a:.4}")),
            self.n_id_test,
            self.n_ood_test,
            self.latency_s,
        );
        s.push_str(&layer_table(&self.layers));
        s
    }
}

pub fn layer_table(layers: &[LayerSummary]) -> String {
    let mut s = format!(
        "{:<20} {:>6} {:>4} {:>6} {:>5} {:>8} {:>8} {:>8} {:>8}\n",
        "layer", "p", "pool", "bits", "tau", "tau_sc", "val_acc", "test_acc", "auroc"
    );
    for l in layers {
        s.push_str(&format!(
            "{:<20} {:>6.1} {:>4} {:>6} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            l.name,
            l.p,
            format!("{:?}", l.pool).to_lowercase(),
            l.bit_len,
            l.tau,
            l.tau_scaled,
            l.val_accuracy,
            l.test_accuracy,
            l.test_auroc
        ));
    }
    s
}

/// Sorted indices of a seeded random `n`-subset of `0..len`.
fn sample_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Evaluates a frozen monitor on ID samples versus OOD samples, balancing
/// the two sides by seeded downsampling.
pub fn evaluate(
    monitor: &Monitor,
    id_eval: &ActivationDump,
    ood_test: &ActivationDump,
    seed: u64,
) -> Result<Evaluation> {
    let n = id_eval.sample_count().min(ood_test.sample_count());
    if n == 0 {
        return Err(NapError::InsufficientSamples("empty ID or OOD test set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    let id_idx = sample_indices(id_eval.sample_count(), n, &mut rng);
    let ood_idx = sample_indices(ood_test.sample_count(), n, &mut rng);

    let k = monitor.config().k();
    let mut verdicts = Vec::with_capacity(2 * n);
    let mut scores = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut layer_d: Vec<Vec<f64>> = vec![Vec::with_capacity(2 * n); k];
    let mut layer_votes: Vec<Vec<bool>> = vec![Vec::with_capacity(2 * n); k];
    let started = Instant::now();
    for (dump, idx, label) in [(id_eval, &id_idx, false), (ood_test, &ood_idx, true)] {
        for &i in idx {
            let v = monitor.judge(&dump.sample(i))?;
            for (l, lv) in v.per_layer.iter().enumerate() {
                layer_d[l].push(f64::from(lv.distance));
                layer_votes[l].push(lv.vote_ood);
            }
            verdicts.push(v.is_ood);
            scores.push(v.score.unwrap_or(0.0));
            labels.push(label);
        }
    }
    let latency_s = started.elapsed().as_secs_f64() / (2 * n) as f64;

    let per_layer = monitor
        .config()
        .layers()
        .iter()
        .enumerate()
        .map(|(l, cal)| {
            Ok(LayerSummary {
                name: cal.layer_name().to_owned(),
                p: cal.cfg.p,
                pool: cal.cfg.pool,
                mode: cal.cfg.mode,
                bit_len: cal.bit_len,
                tau: cal.tau,
                tau_scaled: cal.tau_scaled,
                val_accuracy: cal.val_accuracy,
                test_accuracy: accuracy(&layer_votes[l], &labels)?,
                test_auroc: auroc(&layer_d[l], &labels)?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(Evaluation {
        n_id: n,
        n_ood: n,
        accuracy: accuracy(&verdicts, &labels)?,
        auroc: match monitor.config().vote_scheme() {
            VoteScheme::Scheme1 => Some(auroc(&scores, &labels)?),
            VoteScheme::Scheme2 => None,
        },
        per_layer,
        latency_s: latency_s.max(f64::MIN_POSITIVE),
    })
}

/// A calibrated monitor plus what was learned on the way.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub monitor: Monitor,
    pub searches: Vec<LayerSearch>,
    /// Balanced accuracy of the combined monitor with leave-one-out training
    /// distances as ID and validation distances as OOD.
    pub val_accuracy: f64,
}

/// Full auto-configuration: per-layer grid search, top-`k` layer choice,
/// store construction and combined validation accuracy.
pub fn calibrate(
    train: &ActivationDump,
    valid: &ActivationDump,
    search: &SearchSpace,
    k: usize,
    scheme: VoteScheme,
) -> Result<Calibrated> {
    let searches = calibrate_layers(train, valid, search)?;
    let best: Vec<_> = searches.iter().map(|s| s.best.clone()).collect();
    let config = select_layers(&best, k, scheme)?;

    let mut stores: Vec<PatternStore> = Vec::with_capacity(k);
    let mut id_d: Vec<Vec<u32>> = Vec::with_capacity(k);
    let mut ood_d: Vec<Vec<u32>> = Vec::with_capacity(k);
    for cal in config.layers() {
        let t = Features::from_layer(train.layer(cal.layer_name())?, cal.cfg.pool)?;
        let v = Features::from_layer(valid.layer(cal.layer_name())?, cal.cfg.pool)?;
        let d = cell_distances(&t, &v, &cal.cfg, cal.layer_name())?;
        stores.push(d.store);
        id_d.push(d.id);
        ood_d.push(d.ood);
    }
    let monitor = Monitor::new(config, stores)?;

    let mut verdicts = Vec::new();
    let mut labels = Vec::new();
    for (dists, label) in [(&id_d, false), (&ood_d, true)] {
        for i in 0..dists[0].len() {
            let per_sample: Vec<u32> = dists.iter().map(|l| l[i]).collect();
            verdicts.push(monitor.decide(&per_sample)?.is_ood);
            labels.push(label);
        }
    }
    Ok(Calibrated {
        monitor,
        searches,
        val_accuracy: accuracy(&verdicts, &labels)?,
    })
}

/// Seeded split of `0..n` into (train, held-out) index sets.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let (a, b) = idx.split_at(n_train.min(n));
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

pub fn run_odtest(
    ds: &ActivationDump,
    dv: &ActivationDump,
    dt: &ActivationDump,
    cfg: &OdTestConfig,
) -> Result<OdTestReport> {
    run_odtest_observed(ds, dv, dt, cfg, &mut |_| {})
}

/// [`run_odtest`] reporting each dataset access and the moment all
/// hyperparameters are frozen.
pub fn run_odtest_observed(
    ds: &ActivationDump,
    dv: &ActivationDump,
    dt: &ActivationDump,
    cfg: &OdTestConfig,
    observer: &mut dyn FnMut(ProtocolEvent),
) -> Result<OdTestReport> {
    if !(0.0 < cfg.train_fraction && cfg.train_fraction < 1.0) {
        return Err(NapError::InvalidConfig(format!(
            "train fraction {} outside (0, 1)",
            cfg.train_fraction
        )));
    }
    ds.check_schema(dv)?;
    ds.check_schema(dt)?;
    let (train_idx, eval_idx) = split_indices(ds.sample_count(), cfg.train_fraction, cfg.seed);
    if train_idx.len() < 2 || eval_idx.is_empty() {
        return Err(NapError::InsufficientSamples(format!(
            "D_s has {} samples; need at least 2 for training and 1 held out",
            ds.sample_count()
        )));
    }

    observer(ProtocolEvent::Read(DatasetRole::Train));
    let train = ds.subset(&train_idx);
    observer(ProtocolEvent::Read(DatasetRole::Validation));
    let calibrated = calibrate(&train, dv, &cfg.search, cfg.k, cfg.scheme)?;
    observer(ProtocolEvent::CalibrationFrozen);

    observer(ProtocolEvent::Read(DatasetRole::IdEval));
    let id_eval = ds.subset(&eval_idx);
    observer(ProtocolEvent::Read(DatasetRole::Test));
    let eval = evaluate(&calibrated.monitor, &id_eval, dt, cfg.seed)?;

    Ok(OdTestReport {
        train_dataset: ds.info.dataset_id.clone(),
        validation_dataset: dv.info.dataset_id.clone(),
        test_dataset: dt.info.dataset_id.clone(),
        vote_scheme: cfg.scheme,
        k: cfg.k,
        seed: cfg.seed,
        val_accuracy: calibrated.val_accuracy,
        test_accuracy: eval.accuracy,
        test_auroc: eval.auroc,
        n_id_test: eval.n_id,
        n_ood_test: eval.n_ood,
        latency_s: eval.latency_s,
        layers: eval.per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[false, true, false, true, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(NapError::SingleClass)));
        assert!(auroc(&[1.0], &[true, false]).is_err());
        assert!(auroc(&[f64::NAN, 1.0], &[true, false]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..200).map(|_| f64::from(rng.random_range(0..30u8))).collect();
            let mut labels: Vec<bool> = (0..200).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            assert!((auroc(&scores, &labels).unwrap() - pairwise(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_examples() {
        let labels = [false, true, true, false, true];
        assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        let inv: Vec<bool> = labels.iter().map(|l| !l).collect();
        assert_eq!(accuracy(&inv, &labels).unwrap(), 0.0);
        assert!(matches!(accuracy(&[true], &[true]), Err(NapError::SingleClass)));
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<bool> = (0..301).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..301).map(|_| rng.random_bool(0.3)).collect();
        let tp = v.iter().zip(&l).filter(|(a, b)| **a && **b).count() as f64;
        let tn = v.iter().zip(&l).filter(|(a, b)| !**a && !**b).count() as f64;
        let p = l.iter().filter(|x| **x).count() as f64;
        let want = 0.5 * (tp / p + tn / (301.0 - p));
        assert!((accuracy(&v, &l).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (a, b) = split_indices(101, 0.8, 3);
        assert_eq!(a.len(), 81);
        assert_eq!(b.len(), 20);
        let mut all = [a.clone(), b.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(split_indices(101, 0.8, 3), (a.clone(), b));
        assert_ne!(split_indices(101, 0.8, 4).0, a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            proptest::collection::vec((-50i32..50, any::<bool>()), 2..80)
                .prop_map(|v| v.into_iter().map(|(s, l)| (f64::from(s), l)).unzip())
                .prop_filter("both classes", |(_, l): &(Vec<f64>, Vec<bool>)| {
                    l.iter().any(|&x| x) && l.iter().any(|&x| !x)
                })
        }

        proptest! {
            #[test]
            fn monotone_transform_invariant((s, l) in case()) {
                let t: Vec<f64> = s.iter().map(|x| (x / 7.0).exp() * 3.0 - 1.0).collect();
                prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            }

            #[test]
            fn complement_labels_sum_to_one(raw in proptest::collection::btree_set(-10_000i32..10_000, 2..80), bits in any::<u64>()) {
                let s: Vec<f64> = raw.into_iter().map(f64::from).collect();
                let mut l: Vec<bool> = (0..s.len()).map(|i| (bits >> (i % 64)) & 1 == 1).collect();
                l[0] = true;
                l[1] = false;
                let inv: Vec<bool> = l.iter().map(|x| !x).collect();
                let sum = auroc(&s, &l).unwrap() + auroc(&s, &inv).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
