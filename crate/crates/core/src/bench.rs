// SPDX-License-Identifier: Apache-2.0

//! Query latency measurement on random stores.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{LayerCalibration, MonitorConfig, VoteScheme};
use crate::error::{NapError, Result};
use crate::extraction::{BinarizationConfig, LayerSpec, PoolType};
use crate::index::MultiIndex;
use crate::monitor::Monitor;
use crate::pattern::BinaryPattern;
use crate::store::{NearestSearch, PatternStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTarget {
    /// Linear-scan `nearest` on one store.
    Nearest,
    /// Multi-index `nearest` on one store.
    Indexed,
    /// Full `judge` (extraction, search and vote) over several layers.
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub target: BenchTarget,
    pub layers: usize,
    pub size: usize,
    pub bits: usize,
    pub queries: usize,
    pub mean_s: f64,
    pub p99_s: f64,
}

pub const CSV_HEADER: &str = "target,layers,size,bits,mean_s,p99_s";

impl BenchRow {
    pub fn csv(&self) -> String {
        let target = match self.target {
            BenchTarget::Nearest => "nearest",
            BenchTarget::Indexed => "indexed",
            BenchTarget::Judge => "judge",
        };
        format!(
            "{target},{},{},{},{:.9},{:.9}",
            self.layers, self.size, self.bits, self.mean_s, self.p99_s
        )
    }
}

fn summarize(target: BenchTarget, layers: usize, size: usize, bits: usize, mut times: Vec<f64>) -> BenchRow {
    let queries = times.len();
    let mean_s = times.iter().sum::<f64>() / queries as f64;
    times.sort_by(f64::total_cmp);
    let p99 = times[((queries as f64 * 0.99).ceil() as usize).clamp(1, queries) - 1];
    BenchRow {
        target,
        layers,
        size,
        bits,
        queries,
        mean_s: mean_s.max(f64::MIN_POSITIVE),
        p99_s: p99.max(f64::MIN_POSITIVE),
    }
}

pub fn random_store(rng: &mut impl Rng, size: usize, bits: usize, name: &str) -> Result<PatternStore> {
    let pats: Vec<BinaryPattern> = (0..size)
        .map(|_| BinaryPattern::from_fn(bits, |_| rng.random()))
        .collect();
    PatternStore::build(&pats, name)
}

fn time_queries<S: NearestSearch>(search: &S, queries: &[BinaryPattern]) -> Result<Vec<f64>> {
    let mut times = Vec::with_capacity(queries.len());
    for q in queries {
        let t = Instant::now();
        std::hint::black_box(search.nearest(std::hint::black_box(q))?);
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(times)
}

/// Single-threaded per-query latency of `nearest` for each (size, bits) pair.
pub fn bench_nearest(size: usize, bits: usize, queries: usize, indexed: bool, seed: u64) -> Result<BenchRow> {
    if size == 0 || bits == 0 || queries == 0 {
        return Err(NapError::InvalidConfig(
            "sizes, bit lengths and query count must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_store(&mut rng, size, bits, "bench")?;
    let qs: Vec<BinaryPattern> = (0..queries)
        .map(|_| BinaryPattern::from_fn(bits, |_| rng.random()))
        .collect();
    if indexed {
        let index = MultiIndex::new(&store);
        Ok(summarize(
            BenchTarget::Indexed,
            1,
            store.len(),
            bits,
            time_queries(&index, &qs)?,
        ))
    } else {
        Ok(summarize(
            BenchTarget::Nearest,
            1,
            store.len(),
            bits,
            time_queries(&store, &qs)?,
        ))
    }
}

/// Per-sample latency of a full `judge` over `layers` dense layers of width
/// `bits`, each with a random store of `size` patterns.
pub fn bench_judge(layers: usize, size: usize, bits: usize, queries: usize, seed: u64) -> Result<BenchRow> {
    if layers == 0 || size == 0 || bits == 0 || queries == 0 {
        return Err(NapError::InvalidConfig(
            "layers, sizes, bit lengths and query count must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cals = Vec::with_capacity(layers);
    let mut stores = Vec::with_capacity(layers);
    for l in 0..layers {
        let name = format!("layer{l}");
        cals.push(LayerCalibration::new(
            LayerSpec::dense(&name, bits),
            BinarizationConfig::per_pattern(50.0, PoolType::Max),
            (bits / 4) as u32,
            1.0,
        )?);
        stores.push(random_store(&mut rng, size, bits, &name)?);
    }
    let scheme = if layers % 2 == 1 {
        VoteScheme::Scheme2
    } else {
        VoteScheme::Scheme1
    };
    let monitor = Monitor::new(MonitorConfig::new(cals, scheme)?, stores)?;
    let samples: Vec<std::collections::HashMap<String, Vec<f32>>> = (0..queries)
        .map(|_| {
            (0..layers)
                .map(|l| (format!("layer{l}"), (0..bits).map(|_| rng.random::<f32>()).collect()))
                .collect()
        })
        .collect();
    let mut times = Vec::with_capacity(queries);
    for s in &samples {
        let t = Instant::now();
        std::hint::black_box(monitor.judge(std::hint::black_box(s))?);
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(summarize(BenchTarget::Judge, layers, size, bits, times))
}

/// Runs `bench_nearest` over the cross product of sizes and bit lengths.
pub fn bench_latency(
    sizes: &[usize],
    bits: &[usize],
    queries: usize,
    indexed: bool,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &b in bits {
        for &s in sizes {
            rows.push(bench_nearest(s, b, queries, false, seed)?);
            if indexed {
                rows.push(bench_nearest(s, b, queries, true, seed)?);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pattern_floor() {
        let r = bench_nearest(1, 64, 100, false, 0).unwrap();
        assert_eq!(r.size, 1);
        assert!(r.mean_s > 0.0 && r.mean_s < 1e-3);
        assert!(r.p99_s > 0.0);
    }

    #[test]
    fn rows_cover_cross_product() {
        let rows = bench_latency(&[10, 100], &[64, 128], 5, true, 1).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.mean_s > 0.0));
        assert!(rows[0].csv().starts_with("nearest,1,10,64,"));
        assert!(bench_nearest(0, 64, 1, false, 0).is_err());
    }

    #[test]
    fn judge_runs() {
        let r = bench_judge(3, 50, 32, 10, 0).unwrap();
        assert_eq!((r.target, r.layers), (BenchTarget::Judge, 3));
    }
}
