// SPDX-License-Identifier: Apache-2.0

//! Fitting a monitor from training (ID) and validation (OOD) activations.
//!
//! For every layer a grid over percentile `p` and pooling type is evaluated:
//! training patterns form the store, training samples give leave-one-out ID
//! distances, validation samples give OOD distances, and the Hamming
//! threshold `tau` is the split of the pooled distances with the lowest
//! weighted within-group variance. The best cell per layer is chosen by the
//! configured criterion and the `k` most accurate layers form the monitor.

use std::cmp::Ordering;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::dump::{ActivationDump, LayerData};
use crate::error::{NapError, Result};
use crate::extraction::{BinarizationConfig, Features, LayerKind, LayerSpec, PoolType, ThresholdMode};
use crate::store::{NearestSearch, PatternStore};

/// Percentiles swept when none are given.
pub const DEFAULT_P_GRID: [f64; 12] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 95.0, 99.0];

/// Accuracy slack within which the hybrid criterion prefers a lower
/// threshold over a more accurate cell.
pub const HYBRID_ACCURACY_SLACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Accuracy,
    Threshold,
    #[default]
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteScheme {
    /// Sum of scaled distance minus scaled threshold; OOD iff the sum is
    /// positive.
    #[default]
    Scheme1,
    /// Majority of per-layer `d > tau` votes; needs odd `k`.
    Scheme2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub spec: LayerSpec,
    pub cfg: BinarizationConfig,
    pub tau: u32,
    pub tau_scaled: f64,
    pub val_accuracy: f64,
    pub bit_len: usize,
}

impl LayerCalibration {
    pub fn new(spec: LayerSpec, cfg: BinarizationConfig, tau: u32, val_accuracy: f64) -> Result<Self> {
        let bit_len = spec.pattern_len();
        if tau as usize > bit_len {
            return Err(NapError::InvalidConfig(format!(
                "layer `{}`: tau {tau} exceeds bit length {bit_len}",
                spec.name
            )));
        }
        if !(0.0..=1.0).contains(&val_accuracy) {
            return Err(NapError::InvalidConfig(format!(
                "layer `{}`: accuracy {val_accuracy} outside [0, 1]",
                spec.name
            )));
        }
        cfg.validate(bit_len)?;
        Ok(Self {
            tau_scaled: f64::from(tau) / bit_len as f64,
            spec,
            cfg,
            tau,
            val_accuracy,
            bit_len,
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.spec.name
    }
}

/// The deployable detector configuration: `k` layers in network order plus
/// the rule that combines their distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    layers: Vec<LayerCalibration>,
    vote_scheme: VoteScheme,
}

impl MonitorConfig {
    pub fn new(layers: Vec<LayerCalibration>, vote_scheme: VoteScheme) -> Result<Self> {
        let k = layers.len();
        if k == 0 {
            return Err(NapError::InvalidConfig("a monitor needs at least one layer".into()));
        }
        if vote_scheme == VoteScheme::Scheme2 && k % 2 == 0 {
            return Err(NapError::EvenMajority(k));
        }
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.layer_name() == l.layer_name()) {
                return Err(NapError::InvalidConfig(format!(
                    "layer `{}` listed twice",
                    l.layer_name()
                )));
            }
        }
        Ok(Self { layers, vote_scheme })
    }

    pub fn layers(&self) -> &[LayerCalibration] {
        &self.layers
    }

    pub fn vote_scheme(&self) -> VoteScheme {
        self.vote_scheme
    }

    pub fn k(&self) -> usize {
        self.layers.len()
    }
}

/// Exhaustive within-group variance minimization over the pooled distances.
///
/// Each distinct observed value `c` splits the pool into `{d <= c}` and
/// `{d > c}`; the objective is the size-weighted sum of the two population
/// variances. Returns the minimizing `c`, the smallest one on ties.
pub fn otsu_tau(d_in: &[u32], d_out: &[u32]) -> Result<u32> {
    if d_in.is_empty() || d_out.is_empty() {
        return Err(NapError::Empty("threshold estimation needs ID and OOD distances"));
    }
    let mut pool: Vec<u32> = d_in.iter().chain(d_out).copied().collect();
    pool.sort_unstable();

    // N * W(c) = sum(d^2) - (S_lo^2 / n_lo + S_hi^2 / n_hi), so minimizing
    // W is maximizing F(c) = S_lo^2 / n_lo + S_hi^2 / n_hi. F is compared as
    // an exact fraction.
    let total_n = pool.len() as u128;
    let total_s: u128 = pool.iter().map(|&d| u128::from(d)).sum();
    let mut best: Option<(u32, BigUint, BigUint)> = None;
    let (mut n_lo, mut s_lo) = (0u128, 0u128);
    let mut i = 0;
    while i < pool.len() {
        let c = pool[i];
        while i < pool.len() && pool[i] == c {
            n_lo += 1;
            s_lo += u128::from(c);
            i += 1;
        }
        let (n_hi, s_hi) = (total_n - n_lo, total_s - s_lo);
        let (num, den) = split_score(n_lo, s_lo, n_hi, s_hi);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((c, num, den));
        }
    }
    Ok(best.expect("pool is non-empty").0)
}

/// `S_lo^2 / n_lo + S_hi^2 / n_hi` as a fraction; an empty group adds 0.
fn split_score(n_lo: u128, s_lo: u128, n_hi: u128, s_hi: u128) -> (BigUint, BigUint) {
    let sq = |s: u128| BigUint::from(s) * BigUint::from(s);
    match (n_lo, n_hi) {
        (0, _) => (sq(s_hi), BigUint::from(n_hi)),
        (_, 0) => (sq(s_lo), BigUint::from(n_lo)),
        _ => (
            sq(s_lo) * BigUint::from(n_hi) + sq(s_hi) * BigUint::from(n_lo),
            BigUint::from(n_lo) * BigUint::from(n_hi),
        ),
    }
}

/// Balanced accuracy of the rule `d > tau => OOD`.
pub fn layer_accuracy(tau: u32, id_distances: &[u32], ood_distances: &[u32]) -> Result<f64> {
    if id_distances.is_empty() || ood_distances.is_empty() {
        return Err(NapError::Empty("accuracy needs ID and OOD distances"));
    }
    let kept = id_distances.iter().filter(|&&d| d <= tau).count();
    let flagged = ood_distances.iter().filter(|&&d| d > tau).count();
    Ok(0.5 * (kept as f64 / id_distances.len() as f64 + flagged as f64 / ood_distances.len() as f64))
}

/// Hyperparameter space for one calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub p_grid: Vec<f64>,
    pub pools: Vec<PoolType>,
    pub mode: ThresholdMode,
    pub criterion: Criterion,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            p_grid: DEFAULT_P_GRID.to_vec(),
            pools: PoolType::ALL.to_vec(),
            mode: ThresholdMode::PerPattern,
            criterion: Criterion::Hybrid,
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<()> {
        if self.p_grid.is_empty() {
            return Err(NapError::InvalidConfig("empty percentile grid".into()));
        }
        if self.pools.is_empty() {
            return Err(NapError::InvalidConfig("no pooling types to search".into()));
        }
        if let Some(p) = self.p_grid.iter().find(|p| !(0.0..=100.0).contains(*p)) {
            return Err(NapError::InvalidConfig(format!("percentile {p} outside [0, 100]")));
        }
        Ok(())
    }
}

/// One evaluated `(p, pool)` cell of a layer's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cfg: BinarizationConfig,
    pub tau: u32,
    pub tau_scaled: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSearch {
    pub best: LayerCalibration,
    pub cells: Vec<GridCell>,
}

/// Per-layer distances behind one grid cell.
#[derive(Debug, Clone)]
pub struct CellDistances {
    pub store: PatternStore,
    /// Leave-one-out distance of every training sample.
    pub id: Vec<u32>,
    /// Nearest distance of every validation sample.
    pub ood: Vec<u32>,
}

/// Builds the store for `cfg` on `train` and measures ID (leave-one-out)
/// and OOD distances.
pub fn cell_distances(
    train: &Features,
    valid: &Features,
    cfg: &BinarizationConfig,
    layer_name: &str,
) -> Result<CellDistances> {
    let train_patterns = train.binarize_all(cfg)?;
    let (store, assign) = PatternStore::build_with_assignments(&train_patterns, layer_name)?;
    let loo = store.loo_all()?;
    let id = assign.iter().map(|&a| loo[a]).collect();
    let ood = store
        .batch_nearest(&valid.binarize_all(cfg)?)?
        .into_iter()
        .map(|n| n.distance)
        .collect();
    Ok(CellDistances { store, id, ood })
}

fn cmp_p_then_pool(a: &GridCell, b: &GridCell) -> Ordering {
    // Larger p first, then max pooling before average.
    b.cfg
        .p
        .total_cmp(&a.cfg.p)
        .then_with(|| pool_rank(a.cfg.pool).cmp(&pool_rank(b.cfg.pool)))
}

fn pool_rank(p: PoolType) -> u8 {
    match p {
        PoolType::Max => 0,
        PoolType::Avg => 1,
    }
}

/// Index of the best cell under `criterion`. `cells` must be non-empty.
pub fn rank_cells(cells: &[&GridCell], criterion: Criterion) -> usize {
    let order = |a: &GridCell, b: &GridCell| -> Ordering {
        match criterion {
            Criterion::Accuracy => b
                .val_accuracy
                .total_cmp(&a.val_accuracy)
                .then_with(|| a.tau_scaled.total_cmp(&b.tau_scaled))
                .then_with(|| cmp_p_then_pool(a, b)),
            Criterion::Threshold => a
                .tau_scaled
                .total_cmp(&b.tau_scaled)
                .then_with(|| b.val_accuracy.total_cmp(&a.val_accuracy))
                .then_with(|| cmp_p_then_pool(a, b)),
            Criterion::Hybrid => a
                .tau_scaled
                .total_cmp(&b.tau_scaled)
                .then_with(|| cmp_p_then_pool(a, b)),
        }
    };
    let eligible: Vec<usize> = match criterion {
        Criterion::Hybrid => {
            let top = cells.iter().map(|c| c.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
            // Slack absorbs rounding in `top - 0.01`.
            let floor = top - HYBRID_ACCURACY_SLACK - 1e-12;
            (0..cells.len()).filter(|&i| cells[i].val_accuracy >= floor).collect()
        }
        _ => (0..cells.len()).collect(),
    };
    eligible
        .into_iter()
        .min_by(|&a, &b| order(cells[a], cells[b]))
        .expect("at least one eligible cell")
}

/// Picks the winning cell of a layer grid.
///
/// Under the accuracy criterion the globally most accurate cell wins. Under
/// the threshold and hybrid criteria selection is staged: `p` is fixed by the
/// hybrid criterion over the whole grid, then the pooling type is chosen by
/// the configured criterion among the cells sharing that `p`.
pub fn select_cell(cells: &[GridCell], criterion: Criterion) -> usize {
    let all: Vec<&GridCell> = cells.iter().collect();
    if criterion == Criterion::Accuracy {
        return rank_cells(&all, criterion);
    }
    let p = cells[rank_cells(&all, Criterion::Hybrid)].cfg.p;
    let same_p: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].cfg.p == p).collect();
    let subset: Vec<&GridCell> = same_p.iter().map(|&i| &cells[i]).collect();
    same_p[rank_cells(&subset, criterion)]
}

/// Grid-searches `(p, pool)` for one layer.
///
/// Pooling only matters for convolutional layers; dense layers are
/// evaluated with a single pooling entry.
pub fn grid_search_layer(train: &LayerData, valid: &LayerData, space: &SearchSpace) -> Result<LayerSearch> {
    space.validate()?;
    let spec = train.spec();
    if valid.spec() != spec {
        return Err(NapError::SchemaMismatch(format!(
            "layer `{}` differs between training and validation dumps",
            spec.name
        )));
    }
    if train.sample_count() < 2 {
        return Err(NapError::InsufficientSamples(format!(
            "layer `{}`: leave-one-out needs at least 2 training samples",
            spec.name
        )));
    }
    if valid.sample_count() == 0 {
        return Err(NapError::InsufficientSamples("validation dump is empty".into()));
    }

    let pools: Vec<PoolType> = match spec.kind {
        LayerKind::Conv => {
            let mut p = space.pools.clone();
            p.dedup();
            p
        }
        LayerKind::Dense => vec![if space.pools.contains(&PoolType::Max) {
            PoolType::Max
        } else {
            space.pools[0]
        }],
    };

    let mut cells = Vec::with_capacity(pools.len() * space.p_grid.len());
    for &pool in &pools {
        let train_f = Features::from_layer(train, pool)?;
        let valid_f = Features::from_layer(valid, pool)?;
        for &p in &space.p_grid {
            let cfg = train_f.fit(p, pool, space.mode)?;
            let dist = cell_distances(&train_f, &valid_f, &cfg, &spec.name)?;
            let tau = otsu_tau(&dist.id, &dist.ood)?;
            cells.push(GridCell {
                tau,
                tau_scaled: f64::from(tau) / spec.pattern_len() as f64,
                val_accuracy: layer_accuracy(tau, &dist.id, &dist.ood)?,
                cfg,
            });
        }
    }
    let winner = &cells[select_cell(&cells, space.criterion)];
    let best = LayerCalibration::new(spec.clone(), winner.cfg.clone(), winner.tau, winner.val_accuracy)?;
    Ok(LayerSearch { best, cells })
}

/// Runs [`grid_search_layer`] for every layer of `train`, in network order.
pub fn calibrate_layers(
    train: &ActivationDump,
    valid: &ActivationDump,
    space: &SearchSpace,
) -> Result<Vec<LayerSearch>> {
    train.check_schema(valid)?;
    train
        .layers()
        .iter()
        .map(|layer| grid_search_layer(layer, valid.layer(layer.name())?, space))
        .collect()
}

/// Chooses the `k` most accurate layers. `calibrations` must be in network
/// order; ties go to the deeper layer, then to the lexicographically smaller
/// name. The result keeps network order.
pub fn select_layers(calibrations: &[LayerCalibration], k: usize, scheme: VoteScheme) -> Result<MonitorConfig> {
    if scheme == VoteScheme::Scheme2 && k % 2 == 0 {
        return Err(NapError::EvenMajority(k));
    }
    if k == 0 {
        return Err(NapError::InvalidConfig("k must be at least 1".into()));
    }
    if k > calibrations.len() {
        return Err(NapError::TooFewLayers {
            requested: k,
            available: calibrations.len(),
        });
    }
    let mut order: Vec<usize> = (0..calibrations.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&calibrations[a], &calibrations[b]);
        cb.val_accuracy
            .total_cmp(&ca.val_accuracy)
            .then(b.cmp(&a))
            .then_with(|| ca.layer_name().cmp(cb.layer_name()))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    MonitorConfig::new(chosen.into_iter().map(|i| calibrations[i].clone()).collect(), scheme)
}
