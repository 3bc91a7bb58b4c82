// SPDX-License-Identifier: Apache-2.0

//! Raw layer activations to binary patterns.
//!
//! Convolutional layers are first reduced to one value per channel (max or
//! mean over the spatial map); dense layers are used as-is. The resulting
//! feature vector is binarized against a percentile threshold: bit `n` is set
//! iff `value[n] > threshold[n]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::LayerData;
use crate::error::{NapError, Result};
use crate::pattern::BinaryPattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Dense,
}

/// Name, kind and shape of one monitored layer: `[C, H, W]` for conv,
/// `[M]` for dense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            shape: vec![channels, height, width],
        }
    }

    pub fn dense(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            shape: vec![width],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rank_ok = match self.kind {
            LayerKind::Conv => self.shape.len() == 3,
            LayerKind::Dense => self.shape.len() == 1,
        };
        if !rank_ok || self.shape.contains(&0) {
            return Err(NapError::InvalidConfig(format!(
                "layer `{}`: invalid {:?} shape {:?}",
                self.name, self.kind, self.shape
            )));
        }
        Ok(())
    }

    /// Values per sample in the raw activation tensor.
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Length of the binary pattern: channel count for conv, width for dense.
    pub fn pattern_len(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolType {
    Max,
    Avg,
}

impl PoolType {
    pub const ALL: [PoolType; 2] = [PoolType::Max, PoolType::Avg];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Threshold is the p-percentile of the sample's own feature vector.
    #[default]
    PerPattern,
    /// Threshold at position n is the p-percentile of position n over a
    /// reference dataset.
    PerPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizationConfig {
    pub p: f64,
    pub pool: PoolType,
    pub mode: ThresholdMode,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "widened")]
    pub thresholds: Option<Vec<f32>>,
}

/// Serializes `f32` thresholds through their exact `f64` widening so text
/// round-trips are bit-exact.
mod widened {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<f32>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref()
            .map(|t| t.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f32>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(|t| t.into_iter().map(|x| x as f32).collect()))
    }
}

impl BinarizationConfig {
    pub fn per_pattern(p: f64, pool: PoolType) -> Self {
        Self {
            p,
            pool,
            mode: ThresholdMode::PerPattern,
            thresholds: None,
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if !(0.0..=100.0).contains(&self.p) {
            return Err(NapError::InvalidConfig(format!(
                "percentile {} outside [0, 100]",
                self.p
            )));
        }
        if let (ThresholdMode::PerPosition, Some(t)) = (self.mode, &self.thresholds) {
            if t.len() != width {
                return Err(NapError::InvalidConfig(format!(
                    "{} per-position thresholds for a {width}-wide layer",
                    t.len()
                )));
            }
        }
        Ok(())
    }
}

/// Reduces a `C×H×W` tensor to one value per channel.
pub fn pool_channels(tensor: &[f32], channels: usize, pool: PoolType) -> Result<Vec<f32>> {
    if channels == 0 || tensor.is_empty() || tensor.len() % channels != 0 {
        return Err(NapError::ShapeMismatch {
            layer: String::new(),
            expected: channels,
            found: tensor.len(),
        });
    }
    check_finite(tensor, "", 0)?;
    Ok(pool_unchecked(tensor, channels, pool))
}

fn pool_unchecked(tensor: &[f32], channels: usize, pool: PoolType) -> Vec<f32> {
    let spatial = tensor.len() / channels;
    tensor
        .chunks_exact(spatial)
        .map(|map| match pool {
            PoolType::Max => map.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            PoolType::Avg => {
                let sum: f64 = map.iter().map(|&v| f64::from(v)).sum();
                (sum / spatial as f64) as f32
            }
        })
        .collect()
}

fn check_finite(values: &[f32], layer: &str, sample: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(position) => Err(NapError::NonFinite {
            layer: layer.to_owned(),
            sample,
            position,
        }),
    }
}

/// 1-based nearest rank for percentile `p` over `n` values.
#[inline]
pub fn nearest_rank(p: f64, n: usize) -> usize {
    let x = p * n as f64 / 100.0;
    // Snap values within rounding error of an integer, so 99.9% of 1000 is 999.
    let r = x.round();
    let rank = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (rank as usize).clamp(1, n)
}

/// Nearest-rank percentile: the `clamp(ceil(p/100 * n), 1, n)`-th smallest
/// value. Always returns an element of `values`.
pub fn percentile_threshold(values: &[f32], p: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(NapError::Empty("percentile of an empty multiset"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(NapError::InvalidConfig(format!("percentile {p} outside [0, 100]")));
    }
    let mut scratch = values.to_vec();
    Ok(select_rank(&mut scratch, nearest_rank(p, values.len())))
}

fn select_rank(scratch: &mut [f32], rank: usize) -> f32 {
    let (_, v, _) = scratch.select_nth_unstable_by(rank - 1, f32::total_cmp);
    *v
}

/// Binarizes against a single scalar threshold (strict `>`).
pub fn binarize_scalar(values: &[f32], threshold: f32) -> BinaryPattern {
    BinaryPattern::from_fn(values.len(), |n| values[n] > threshold)
}

/// Binarizes against per-position thresholds (strict `>`).
pub fn binarize_positions(values: &[f32], thresholds: &[f32]) -> BinaryPattern {
    debug_assert_eq!(values.len(), thresholds.len());
    BinaryPattern::from_fn(values.len(), |n| values[n] > thresholds[n])
}

/// Binarizes one feature vector under `cfg`.
pub fn binarize(values: &[f32], cfg: &BinarizationConfig) -> Result<BinaryPattern> {
    match cfg.mode {
        ThresholdMode::PerPattern => {
            if values.is_empty() {
                return Ok(BinaryPattern::zeros(0));
            }
            let threshold = percentile_threshold(values, cfg.p)?;
            Ok(binarize_scalar(values, threshold))
        }
        ThresholdMode::PerPosition => {
            let thresholds = cfg
                .thresholds
                .as_deref()
                .ok_or_else(|| NapError::CalibrationMissing { layer: String::new() })?;
            if thresholds.len() != values.len() {
                return Err(NapError::ShapeMismatch {
                    layer: String::new(),
                    expected: thresholds.len(),
                    found: values.len(),
                });
            }
            Ok(binarize_positions(values, thresholds))
        }
    }
}

/// Pre-binarization feature vectors for every sample of a layer: pooled
/// channels for conv layers, raw values for dense layers. Row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    width: usize,
    values: Vec<f32>,
}

impl Features {
    pub fn from_layer(layer: &LayerData, pool: PoolType) -> Result<Self> {
        let spec = layer.spec();
        let width = spec.pattern_len();
        let rows: Vec<Vec<f32>> = (0..layer.sample_count())
            .into_par_iter()
            .map(|i| feature_vector(spec, layer.sample(i), pool, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            width,
            values: rows.concat(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    /// Column-wise nearest-rank percentile.
    pub fn position_thresholds(&self, p: f64) -> Result<Vec<f32>> {
        let rows = self.rows();
        if rows == 0 {
            return Err(NapError::Empty("no samples to fit thresholds on"));
        }
        let rank = nearest_rank(p, rows);
        Ok((0..self.width)
            .into_par_iter()
            .map(|n| {
                let mut column: Vec<f32> = (0..rows).map(|i| self.values[i * self.width + n]).collect();
                select_rank(&mut column, rank)
            })
            .collect())
    }

    pub fn fit(&self, p: f64, pool: PoolType, mode: ThresholdMode) -> Result<BinarizationConfig> {
        if !(0.0..=100.0).contains(&p) {
            return Err(NapError::InvalidConfig(format!("percentile {p} outside [0, 100]")));
        }
        if self.rows() == 0 {
            return Err(NapError::Empty("no samples to fit thresholds on"));
        }
        let thresholds = match mode {
            ThresholdMode::PerPattern => None,
            ThresholdMode::PerPosition => Some(self.position_thresholds(p)?),
        };
        Ok(BinarizationConfig {
            p,
            pool,
            mode,
            thresholds,
        })
    }

    pub fn binarize_all(&self, cfg: &BinarizationConfig) -> Result<Vec<BinaryPattern>> {
        cfg.validate(self.width)?;
        (0..self.rows())
            .into_par_iter()
            .map(|i| binarize(self.row(i), cfg))
            .collect()
    }
}

fn feature_vector(spec: &LayerSpec, values: &[f32], pool: PoolType, sample: usize) -> Result<Vec<f32>> {
    if values.len() != spec.element_count() {
        return Err(NapError::ShapeMismatch {
            layer: spec.name.clone(),
            expected: spec.element_count(),
            found: values.len(),
        });
    }
    check_finite(values, &spec.name, sample)?;
    Ok(match spec.kind {
        LayerKind::Conv => pool_unchecked(values, spec.shape[0], pool),
        LayerKind::Dense => values.to_vec(),
    })
}

/// Fits a binarization config for `layer` over all its samples.
pub fn fit_thresholds(layer: &LayerData, p: f64, pool: PoolType, mode: ThresholdMode) -> Result<BinarizationConfig> {
    if layer.sample_count() == 0 {
        return Err(NapError::Empty("activation dump holds no samples"));
    }
    Features::from_layer(layer, pool)?.fit(p, pool, mode)
}

/// Extracts the binary pattern of one sample.
pub fn extract_pattern(values: &[f32], spec: &LayerSpec, cfg: &BinarizationConfig) -> Result<BinaryPattern> {
    let features = feature_vector(spec, values, cfg.pool, 0)?;
    binarize(&features, cfg).map_err(|e| e.in_layer(&spec.name))
}

/// Extracts patterns for every sample of a layer.
pub fn extract_layer(layer: &LayerData, cfg: &BinarizationConfig) -> Result<Vec<BinaryPattern>> {
    Features::from_layer(layer, cfg.pool)?
        .binarize_all(cfg)
        .map_err(|e| e.in_layer(&layer.spec().name))
}

impl NapError {
    /// Fills in the layer name of layer-scoped errors raised without one.
    pub(crate) fn in_layer(self, name: &str) -> Self {
        match self {
            NapError::CalibrationMissing { layer } if layer.is_empty() => {
                NapError::CalibrationMissing { layer: name.to_owned() }
            }
            NapError::ShapeMismatch { layer, expected, found } if layer.is_empty() => NapError::ShapeMismatch {
                layer: name.to_owned(),
                expected,
                found,
            },
            NapError::NonFinite {
                layer,
                sample,
                position,
            } if layer.is_empty() => NapError::NonFinite {
                layer: name.to_owned(),
                sample,
                position,
            },
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted_percentile(values: &[f32], p: f64) -> f32 {
        let mut v = values.to_vec();
        v.sort_by(f32::total_cmp);
        // Exact for percentiles with at most one decimal digit.
        let tenths = (p * 10.0).round() as usize;
        let rank = (tenths * v.len()).div_ceil(1000).clamp(1, v.len());
        v[rank - 1]
    }

    #[test]
    fn pool_two_by_two() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pool_channels(&t, 1, PoolType::Max).unwrap(), vec![4.0]);
        assert_eq!(pool_channels(&t, 1, PoolType::Avg).unwrap(), vec![2.5]);
    }

    #[test]
    fn pool_constant_tensor() {
        let t = vec![1.75f32; 3 * 5 * 5];
        for pool in PoolType::ALL {
            assert_eq!(pool_channels(&t, 3, pool).unwrap(), vec![1.75; 3]);
        }
    }

    #[test]
    fn pool_random_matches_scalar_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: Vec<f32> = (0..8 * 4 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let max = pool_channels(&t, 8, PoolType::Max).unwrap();
        let avg = pool_channels(&t, 8, PoolType::Avg).unwrap();
        for c in 0..8 {
            let mut m = f32::NEG_INFINITY;
            let mut s = 0.0f64;
            for k in 0..16 {
                let v = t[c * 16 + k];
                if v > m {
                    m = v;
                }
                s += f64::from(v);
            }
            assert_eq!(max[c], m);
            assert_eq!(avg[c], (s / 16.0) as f32);
        }
    }

    #[test]
    fn pool_rejects_nan() {
        let t = [1.0, f32::NAN, 0.0, 0.0];
        assert!(matches!(
            pool_channels(&t, 2, PoolType::Max),
            Err(NapError::NonFinite { position: 1, .. })
        ));
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f32> = (1..=10).map(|x| x as f32).collect();
        assert_eq!(percentile_threshold(&v, 80.0).unwrap(), 8.0);
        assert_eq!(percentile_threshold(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile_threshold(&v, 100.0).unwrap(), 10.0);
        assert!(percentile_threshold(&[], 50.0).is_err());
    }

    #[test]
    fn percentile_random_matches_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let v: Vec<f32> = (0..1000).map(|_| rng.random_range(-100.0..100.0)).collect();
        assert_eq!(percentile_threshold(&v, 37.0).unwrap(), sorted_percentile(&v, 37.0));
        for p in [0.0, 0.5, 10.0, 33.3, 99.0, 99.9, 100.0] {
            assert_eq!(percentile_threshold(&v, p).unwrap(), sorted_percentile(&v, p));
        }
    }

    #[test]
    fn binarize_is_strict() {
        let p = binarize_scalar(&[2.0, 8.0, 5.0, 1.0], 5.0);
        assert_eq!(p.unpack(), vec![false, true, false, false]);
    }

    #[test]
    fn binarize_all_equal_is_zero() {
        let cfg = BinarizationConfig::per_pattern(30.0, PoolType::Max);
        assert_eq!(binarize(&[0.4; 17], &cfg).unwrap().count_ones(), 0);
    }

    #[test]
    fn binarize_random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<f32> = (0..333).map(|_| rng.random()).collect();
        let t = 0.42;
        let expected = v.iter().filter(|&&x| x > t).count() as u32;
        assert_eq!(binarize_scalar(&v, t).count_ones(), expected);
    }

    #[test]
    fn per_position_without_thresholds() {
        let cfg = BinarizationConfig {
            p: 50.0,
            pool: PoolType::Max,
            mode: ThresholdMode::PerPosition,
            thresholds: None,
        };
        assert!(matches!(
            binarize(&[1.0], &cfg),
            Err(NapError::CalibrationMissing { .. })
        ));
        let spec = LayerSpec::dense("fc", 1);
        match extract_pattern(&[1.0], &spec, &cfg) {
            Err(NapError::CalibrationMissing { layer }) => assert_eq!(layer, "fc"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fit_per_position_max() {
        let spec = LayerSpec::dense("fc", 2);
        let layer = LayerData::new(spec, 2, vec![1.0, 10.0, 3.0, 20.0]).unwrap();
        let cfg = fit_thresholds(&layer, 100.0, PoolType::Max, ThresholdMode::PerPosition).unwrap();
        assert_eq!(cfg.thresholds, Some(vec![3.0, 20.0]));

        let cfg = fit_thresholds(&layer, 40.0, PoolType::Avg, ThresholdMode::PerPattern).unwrap();
        assert_eq!(cfg.p, 40.0);
        assert_eq!(cfg.pool, PoolType::Avg);
        assert!(cfg.thresholds.is_none());
    }

    #[test]
    fn fit_empty_dump() {
        let layer = LayerData::new(LayerSpec::dense("fc", 2), 0, vec![]).unwrap();
        assert!(fit_thresholds(&layer, 50.0, PoolType::Max, ThresholdMode::PerPosition).is_err());
    }

    #[test]
    fn fit_random_matches_column_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let spec = LayerSpec::conv("c", 6, 3, 3);
        let n = 50;
        let values: Vec<f32> = (0..n * 54).map(|_| rng.random_range(0.0..5.0)).collect();
        let layer = LayerData::new(spec, n, values.clone()).unwrap();
        for pool in PoolType::ALL {
            let cfg = fit_thresholds(&layer, 63.0, pool, ThresholdMode::PerPosition).unwrap();
            let pooled: Vec<Vec<f32>> = values.chunks(54).map(|s| pool_channels(s, 6, pool).unwrap()).collect();
            for c in 0..6 {
                let col: Vec<f32> = pooled.iter().map(|r| r[c]).collect();
                assert_eq!(cfg.thresholds.as_ref().unwrap()[c], sorted_percentile(&col, 63.0));
            }
        }
    }

    #[test]
    fn dense_extraction_example() {
        let spec = LayerSpec::dense("fc", 4);
        let cfg = BinarizationConfig::per_pattern(50.0, PoolType::Max);
        let p = extract_pattern(&[0.1, 0.9, 0.5, 0.2], &spec, &cfg).unwrap();
        assert_eq!(p.unpack(), vec![false, true, true, false]);
    }

    #[test]
    fn zero_activations_give_zero_pattern() {
        let spec = LayerSpec::conv("c", 8, 2, 2);
        for p in [0.0, 50.0, 100.0] {
            let cfg = BinarizationConfig::per_pattern(p, PoolType::Avg);
            let pat = extract_pattern(&[0.0; 32], &spec, &cfg).unwrap();
            assert_eq!(pat.bit_len(), 8);
            assert_eq!(pat.count_ones(), 0);
        }
    }

    #[test]
    fn conv_extraction_is_composition_of_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let spec = LayerSpec::conv("conv", 16, 8, 8);
        let x: Vec<f32> = (0..16 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let cfg = BinarizationConfig::per_pattern(70.0, PoolType::Max);
        let got = extract_pattern(&x, &spec, &cfg).unwrap();

        let pooled: Vec<f32> = x
            .chunks(64)
            .map(|c| c.iter().copied().fold(f32::MIN, f32::max))
            .collect();
        let t = sorted_percentile(&pooled, 70.0);
        let want: Vec<bool> = pooled.iter().map(|&v| v > t).collect();
        assert_eq!(got.unpack(), want);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let spec = LayerSpec::conv("block3", 4, 2, 2);
        let cfg = BinarizationConfig::per_pattern(50.0, PoolType::Max);
        match extract_pattern(&[0.0; 15], &spec, &cfg) {
            Err(NapError::ShapeMismatch {
                layer,
                expected: 16,
                found: 15,
            }) => assert_eq!(layer, "block3"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::conv("a", 1, 1, 1).validate().is_ok());
        assert!(LayerSpec::conv("a", 0, 1, 1).validate().is_err());
        let bad = LayerSpec {
            name: "d".into(),
            kind: LayerKind::Dense,
            shape: vec![2, 2],
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn distinct(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::btree_set(-10_000i32..10_000, 1..max_len)
                .prop_map(|s| s.into_iter().map(|v| v as f32 * 0.25).collect::<Vec<_>>())
                .prop_shuffle()
        }

        proptest! {
            #[test]
            fn popcount_law(v in distinct(200), p in 0.0f64..=100.0) {
                let cfg = BinarizationConfig::per_pattern(p, PoolType::Max);
                let pat = binarize(&v, &cfg).unwrap();
                let l = v.len();
                prop_assert_eq!(pat.count_ones() as usize, l - nearest_rank(p, l));
            }

            #[test]
            fn popcount_monotone_in_p(v in proptest::collection::vec(-5.0f32..5.0, 1..100), a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let plo = binarize(&v, &BinarizationConfig::per_pattern(lo, PoolType::Max)).unwrap();
                let phi = binarize(&v, &BinarizationConfig::per_pattern(hi, PoolType::Max)).unwrap();
                prop_assert!(phi.count_ones() <= plo.count_ones());
            }

            #[test]
            fn max_pool_permutation_invariant(v in proptest::collection::vec(-5.0f32..5.0, 12).prop_shuffle(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut shuffled = v.clone();
                for chan in shuffled.chunks_mut(4) {
                    chan.shuffle(&mut rng);
                }
                prop_assert_eq!(
                    pool_channels(&v, 3, PoolType::Max).unwrap(),
                    pool_channels(&shuffled, 3, PoolType::Max).unwrap()
                );
            }

            #[test]
            fn extraction_deterministic(v in proptest::collection::vec(0.0f32..5.0, 24), p in 0.0f64..=100.0) {
                let spec = LayerSpec::conv("c", 6, 2, 2);
                let cfg = BinarizationConfig::per_pattern(p, PoolType::Avg);
                prop_assert_eq!(
                    extract_pattern(&v, &spec, &cfg).unwrap(),
                    extract_pattern(&v, &spec, &cfg).unwrap()
                );
            }
        }
    }
}
