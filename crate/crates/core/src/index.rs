// SPDX-License-Identifier: Apache-2.0

//! Exact multi-index hashing over a [`PatternStore`].
//!
//! Each pattern is cut into `m` disjoint 16-bit substrings, one hash table
//! per substring. If `H(q, u) < m * (s + 1)` then some substring of `u` is
//! within `s` bits of the matching substring of `q`, so probing every table
//! at radius `0..=s` finds every pattern closer than `m * (s + 1)`. The
//! search widens `s` until the best distance found is covered, then stops.
//! When the probe count of the next radius would exceed a linear scan it
//! falls back to the scan. Results are identical to the linear scan,
//! including the lowest-index tie rule.

use std::collections::HashMap;

use crate::error::{NapError, Result};
use crate::pattern::{hamming_words, BinaryPattern};
use crate::store::{Nearest, NearestSearch, PatternStore};

const SUB_BITS: usize = 16;

#[derive(Debug, Clone)]
pub struct MultiIndex<'a> {
    store: &'a PatternStore,
    tables: Vec<HashMap<u16, Vec<u32>>>,
    widths: Vec<u32>,
}

#[inline]
fn substring(words: &[u64], j: usize) -> u16 {
    let bit = j * SUB_BITS;
    (words[bit / 64] >> (bit % 64)) as u16
}

/// Number of `s`-subsets of `n` items, saturating.
fn binomial(n: u32, s: u32) -> u64 {
    if s > n {
        return 0;
    }
    let mut acc: u64 = 1;
    for i in 0..s.min(n - s) {
        acc = acc.saturating_mul(u64::from(n - i)) / u64::from(i + 1);
    }
    acc
}

/// Calls `f` for every `width`-bit mask with exactly `ones` bits set.
fn for_each_mask(width: u32, ones: u32, mut f: impl FnMut(u16)) {
    if ones > width {
        return;
    }
    if ones == 0 {
        f(0);
        return;
    }
    let limit = 1u32 << width;
    let mut m: u32 = (1 << ones) - 1;
    while m < limit {
        f(m as u16);
        // Gosper's hack: next integer with the same popcount.
        let c = m & m.wrapping_neg();
        let r = m + c;
        m = (((r ^ m) >> 2) / c) | r;
    }
}

impl<'a> MultiIndex<'a> {
    pub fn new(store: &'a PatternStore) -> Self {
        let bit_len = store.bit_len();
        let m = bit_len.div_ceil(SUB_BITS);
        let widths: Vec<u32> = (0..m).map(|j| (bit_len - j * SUB_BITS).min(SUB_BITS) as u32).collect();
        let mut tables: Vec<HashMap<u16, Vec<u32>>> = vec![HashMap::new(); m];
        for i in 0..store.len() {
            let w = store.pattern_words(i);
            for (j, table) in tables.iter_mut().enumerate() {
                table.entry(substring(w, j)).or_default().push(i as u32);
            }
        }
        Self { store, tables, widths }
    }

    pub fn store(&self) -> &PatternStore {
        self.store
    }

    fn linear(&self, q: &[u64]) -> Nearest {
        let mut best = Nearest {
            distance: u32::MAX,
            index: usize::MAX,
        };
        for i in 0..self.store.len() {
            let d = hamming_words(q, self.store.pattern_words(i));
            if d < best.distance {
                best = Nearest { distance: d, index: i };
                if d == 0 {
                    break;
                }
            }
        }
        best
    }
}

impl NearestSearch for MultiIndex<'_> {
    fn bit_len(&self) -> usize {
        self.store.bit_len()
    }

    fn nearest(&self, query: &BinaryPattern) -> Result<Nearest> {
        if query.bit_len() != self.store.bit_len() {
            return Err(NapError::LengthMismatch {
                expected: self.store.bit_len(),
                found: query.bit_len(),
            });
        }
        let n = self.store.len();
        let q = query.words();
        let m = self.tables.len() as u64;
        if m == 0 {
            return Ok(Nearest { distance: 0, index: 0 });
        }
        let mut visited = vec![false; n];
        let mut best = Nearest {
            distance: u32::MAX,
            index: usize::MAX,
        };
        let max_radius = *self.widths.iter().max().unwrap();
        for s in 0..=max_radius {
            let probes: u64 = self.widths.iter().map(|&w| binomial(w, s)).sum();
            if probes > n as u64 {
                return Ok(self.linear(q));
            }
            for (j, table) in self.tables.iter().enumerate() {
                let key = substring(q, j);
                for_each_mask(self.widths[j], s, |mask| {
                    let Some(bucket) = table.get(&(key ^ mask)) else {
                        return;
                    };
                    for &i in bucket {
                        let i = i as usize;
                        if std::mem::replace(&mut visited[i], true) {
                            continue;
                        }
                        let d = hamming_words(q, self.store.pattern_words(i));
                        if d < best.distance || (d == best.distance && i < best.index) {
                            best = Nearest { distance: d, index: i };
                        }
                    }
                });
            }
            // Every pattern at distance < m * (s + 1) has now been seen.
            if u64::from(best.distance) < m * (u64::from(s) + 1) {
                return Ok(best);
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks_enumerate_all_subsets() {
        for w in [1u32, 5, 16] {
            for s in 0..=w.min(4) {
                let mut seen = Vec::new();
                for_each_mask(w, s, |m| seen.push(m));
                assert_eq!(seen.len() as u64, binomial(w, s));
                assert!(seen.iter().all(|m| m.count_ones() == s && u32::from(*m) < (1 << w)));
            }
        }
        let mut all = 0;
        for_each_mask(16, 16, |m| {
            assert_eq!(m, u16::MAX);
            all += 1;
        });
        assert_eq!(all, 1);
    }

    fn flip(rng: &mut impl Rng, p: &BinaryPattern, k: usize) -> BinaryPattern {
        let mut bits = p.unpack();
        for _ in 0..k {
            let j = rng.random_range(0..bits.len());
            bits[j] = !bits[j];
        }
        BinaryPattern::pack(bits)
    }

    #[test]
    fn matches_linear_scan_on_clustered_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &len in &[16usize, 64, 100, 256] {
            let centers: Vec<_> = (0..20).map(|_| BinaryPattern::from_fn(len, |_| rng.random())).collect();
            let pats: Vec<_> = (0..3000)
                .map(|i| {
                    let k = rng.random_range(0..len / 8 + 1);
                    flip(&mut rng, &centers[i % 20], k)
                })
                .collect();
            let store = PatternStore::build(&pats, "l").unwrap();
            let index = MultiIndex::new(&store);
            for i in 0..300 {
                let q = if i % 3 == 0 {
                    BinaryPattern::from_fn(len, |_| rng.random())
                } else {
                    let k = rng.random_range(0..len / 4 + 1);
                    flip(&mut rng, &centers[i % 20], k)
                };
                assert_eq!(index.nearest(&q).unwrap(), store.nearest(&q).unwrap(), "len {len}");
            }
        }
    }

    #[test]
    fn ties_follow_lowest_index() {
        let a = BinaryPattern::pack([false; 6]);
        let b = BinaryPattern::pack([true; 6]);
        let store = PatternStore::build([&a, &b], "l").unwrap();
        let q = BinaryPattern::pack([false, false, false, true, true, true]);
        assert_eq!(
            MultiIndex::new(&store).nearest(&q).unwrap(),
            Nearest { distance: 3, index: 0 }
        );
    }

    #[test]
    fn length_mismatch() {
        let store = PatternStore::build([&BinaryPattern::zeros(20)], "l").unwrap();
        assert!(MultiIndex::new(&store).nearest(&BinaryPattern::zeros(21)).is_err());
    }
}
