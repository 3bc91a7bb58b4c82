// SPDX-License-Identifier: Apache-2.0

//! Training pattern store and exact minimum-Hamming-distance queries.
//!
//! Patterns are deduplicated at build time and kept in one flat word buffer
//! so a query is a single linear XOR-popcount sweep over contiguous memory.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{NapError, Result};
use crate::pattern::{hamming_words, words_for, BinaryPattern};

/// Result of a nearest-pattern query. Among equidistant patterns the lowest
/// store index is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nearest {
    pub distance: u32,
    pub index: usize,
}

/// Exact nearest-pattern search over a fixed pattern set.
pub trait NearestSearch {
    fn bit_len(&self) -> usize;

    fn nearest(&self, query: &BinaryPattern) -> Result<Nearest>;

    fn batch_nearest(&self, queries: &[BinaryPattern]) -> Result<Vec<Nearest>>
    where
        Self: Sync,
    {
        queries
            .par_iter()
            .enumerate()
            .map(|(index, q)| {
                self.nearest(q).map_err(|e| match e {
                    NapError::LengthMismatch { expected, found } => NapError::QueryLength { index, expected, found },
                    other => other,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternStore {
    layer_name: String,
    bit_len: usize,
    stride: usize,
    words: Vec<u64>,
    multiplicities: Vec<u32>,
    total_count: u64,
}

impl PatternStore {
    /// Builds a store from training patterns, merging duplicates.
    pub fn build<'a, I>(patterns: I, layer_name: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a BinaryPattern>,
    {
        Self::build_with_assignments(patterns, layer_name).map(|(s, _)| s)
    }

    /// Like [`PatternStore::build`], also returning the store index each
    /// input pattern was assigned to.
    pub fn build_with_assignments<'a, I>(patterns: I, layer_name: impl Into<String>) -> Result<(Self, Vec<usize>)>
    where
        I: IntoIterator<Item = &'a BinaryPattern>,
    {
        let mut iter = patterns.into_iter().peekable();
        let bit_len = iter
            .peek()
            .ok_or(NapError::Empty("no patterns to build a store from"))?
            .bit_len();
        let mut seen: HashMap<&'a [u64], usize> = HashMap::new();
        let mut words = Vec::new();
        let mut multiplicities: Vec<u32> = Vec::new();
        let mut assignments = Vec::new();
        for p in iter {
            if p.bit_len() != bit_len {
                return Err(NapError::LengthMismatch {
                    expected: bit_len,
                    found: p.bit_len(),
                });
            }
            let idx = *seen.entry(p.words()).or_insert_with(|| {
                words.extend_from_slice(p.words());
                multiplicities.push(0);
                multiplicities.len() - 1
            });
            multiplicities[idx] += 1;
            assignments.push(idx);
        }
        let total_count = assignments.len() as u64;
        Ok((
            Self {
                layer_name: layer_name.into(),
                bit_len,
                stride: words_for(bit_len),
                words,
                multiplicities,
                total_count,
            },
            assignments,
        ))
    }

    /// Reassembles a store from raw parts, validating every invariant.
    pub fn from_parts(
        layer_name: impl Into<String>,
        bit_len: usize,
        words: Vec<u64>,
        multiplicities: Vec<u32>,
    ) -> Result<Self> {
        let stride = words_for(bit_len);
        let unique = multiplicities.len();
        if unique == 0 {
            return Err(NapError::Empty("store holds no patterns"));
        }
        if words.len() != unique * stride {
            return Err(NapError::Corrupt(format!(
                "{} words for {unique} patterns of {stride} words",
                words.len()
            )));
        }
        if multiplicities.contains(&0) {
            return Err(NapError::Corrupt("zero multiplicity".into()));
        }
        if stride > 0 {
            let mask = match bit_len % 64 {
                0 => u64::MAX,
                r => (1u64 << r) - 1,
            };
            if words.chunks_exact(stride).any(|p| p[stride - 1] & !mask != 0) {
                return Err(NapError::Corrupt("padding bits set".into()));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(unique);
        if stride == 0 {
            if unique > 1 {
                return Err(NapError::Corrupt("duplicate patterns".into()));
            }
        } else if !words.chunks_exact(stride).all(|p| seen.insert(p)) {
            return Err(NapError::Corrupt("duplicate patterns".into()));
        }
        let total_count = multiplicities.iter().map(|&m| u64::from(m)).sum();
        Ok(Self {
            layer_name: layer_name.into(),
            bit_len,
            stride,
            words,
            multiplicities,
            total_count,
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    /// Number of unique patterns.
    pub fn len(&self) -> usize {
        self.multiplicities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multiplicities.is_empty()
    }

    pub fn multiplicities(&self) -> &[u32] {
        &self.multiplicities
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn raw_words(&self) -> &[u64] {
        &self.words
    }

    pub fn pattern_words(&self, index: usize) -> &[u64] {
        &self.words[index * self.stride..(index + 1) * self.stride]
    }

    pub fn pattern(&self, index: usize) -> BinaryPattern {
        BinaryPattern::from_words(self.pattern_words(index).to_vec(), self.bit_len)
            .expect("store patterns are canonical")
    }

    fn check_len(&self, q: &BinaryPattern) -> Result<()> {
        if q.bit_len() != self.bit_len {
            return Err(NapError::LengthMismatch {
                expected: self.bit_len,
                found: q.bit_len(),
            });
        }
        Ok(())
    }

    /// Minimum distance from `query` to any stored pattern other than
    /// `skip`.
    fn scan(&self, query: &[u64], skip: Option<usize>) -> Option<Nearest> {
        if self.stride == 0 {
            return (0..self.len())
                .find(|&i| Some(i) != skip)
                .map(|index| Nearest { distance: 0, index });
        }
        let mut best = Nearest {
            distance: u32::MAX,
            index: usize::MAX,
        };
        for (i, p) in self.words.chunks_exact(self.stride).enumerate() {
            if Some(i) == skip {
                continue;
            }
            let d = hamming_words(query, p);
            if d < best.distance {
                best = Nearest { distance: d, index: i };
                if d == 0 {
                    break;
                }
            }
        }
        (best.index != usize::MAX).then_some(best)
    }

    /// Leave-one-out nearest distance for a training sample whose pattern is
    /// stored at `index`: one copy of that pattern is removed before the
    /// search, so a duplicated pattern yields 0.
    pub fn loo_nearest(&self, index: usize) -> Result<u32> {
        if index >= self.len() {
            return Err(NapError::IndexOutOfRange { index, len: self.len() });
        }
        if self.total_count <= 1 {
            return Err(NapError::LeaveOneOutUndefined);
        }
        if self.multiplicities[index] > 1 {
            return Ok(0);
        }
        Ok(self
            .scan(self.pattern_words(index), Some(index))
            .expect("another pattern exists when total_count > 1")
            .distance)
    }

    /// Leave-one-out distance for every stored pattern, in store order.
    pub fn loo_all(&self) -> Result<Vec<u32>> {
        if self.total_count <= 1 {
            return Err(NapError::LeaveOneOutUndefined);
        }
        (0..self.len()).into_par_iter().map(|i| self.loo_nearest(i)).collect()
    }
}

impl NearestSearch for PatternStore {
    fn bit_len(&self) -> usize {
        self.bit_len
    }

    fn nearest(&self, query: &BinaryPattern) -> Result<Nearest> {
        self.check_len(query)?;
        Ok(self.scan(query.words(), None).expect("stores are never empty"))
    }
}
