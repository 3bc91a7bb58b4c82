// SPDX-License-Identifier: Apache-2.0

//! Bit-packed binary activation patterns and exact Hamming distance.
//!
//! Bit `j` of a pattern lives in word `j / 64` at position `j % 64`. Bits past
//! `bit_len` are always zero, so distances can XOR whole words without masking
//! the tail.

use std::fmt;

use crate::error::{NapError, Result};

pub const WORD_BITS: usize = 64;

/// Number of 64-bit words needed to hold `bit_len` bits.
#[inline]
pub const fn words_for(bit_len: usize) -> usize {
    bit_len.div_ceil(WORD_BITS)
}

/// An immutable, canonically padded binary pattern.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryPattern {
    words: Vec<u64>,
    bit_len: usize,
}

impl BinaryPattern {
    /// Packs a bit sequence; element `j` becomes bit `j`.
    pub fn pack<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut words = Vec::new();
        let mut bit_len = 0;
        for bit in bits {
            if bit_len % WORD_BITS == 0 {
                words.push(0);
            }
            if bit {
                *words.last_mut().unwrap() |= 1 << (bit_len % WORD_BITS);
            }
            bit_len += 1;
        }
        Self { words, bit_len }
    }

    /// Builds a pattern of `bit_len` bits where bit `j` is `f(j)`.
    pub fn from_fn(bit_len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut words = vec![0u64; words_for(bit_len)];
        for j in 0..bit_len {
            if f(j) {
                words[j / WORD_BITS] |= 1 << (j % WORD_BITS);
            }
        }
        Self { words, bit_len }
    }

    /// Wraps raw words, rejecting a wrong word count or set padding bits.
    pub fn from_words(words: Vec<u64>, bit_len: usize) -> Result<Self> {
        if words.len() != words_for(bit_len) {
            return Err(NapError::Corrupt(format!(
                "{} words cannot hold a {bit_len}-bit pattern",
                words.len()
            )));
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(bit_len) != 0 {
                return Err(NapError::Corrupt("padding bits set".into()));
            }
        }
        Ok(Self { words, bit_len })
    }

    pub fn zeros(bit_len: usize) -> Self {
        Self {
            words: vec![0; words_for(bit_len)],
            bit_len,
        }
    }

    #[inline]
    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }

    /// Value of bit `j`. Panics if `j >= bit_len`.
    #[inline]
    pub fn bit(&self, j: usize) -> bool {
        assert!(
            j < self.bit_len,
            "bit {j} out of range for {}-bit pattern",
            self.bit_len
        );
        (self.words[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1
    }

    pub fn unpack(&self) -> Vec<bool> {
        (0..self.bit_len).map(|j| self.bit(j)).collect()
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Bitwise complement within `bit_len`; padding stays zero.
    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.bit_len);
        }
        Self {
            words,
            bit_len: self.bit_len,
        }
    }

    /// Number of differing bits. Fails if the lengths differ.
    pub fn hamming(&self, other: &Self) -> Result<u32> {
        if self.bit_len != other.bit_len {
            return Err(NapError::LengthMismatch {
                expected: self.bit_len,
                found: other.bit_len,
            });
        }
        Ok(hamming_words(&self.words, &other.words))
    }
}

impl fmt::Debug for BinaryPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryPattern({}b ", self.bit_len)?;
        for j in 0..self.bit_len.min(128) {
            f.write_str(if self.bit(j) { "1" } else { "0" })?;
        }
        if self.bit_len > 128 {
            f.write_str("…")?;
        }
        f.write_str(")")
    }
}

impl FromIterator<bool> for BinaryPattern {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self::pack(iter)
    }
}

/// Mask of the valid bits in the last word of a `bit_len`-bit pattern.
#[inline]
fn tail_mask(bit_len: usize) -> u64 {
    match bit_len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// XOR-popcount over two equal-length word slices.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler keep several popcounts
    // in flight.
    let mut acc = [0u32; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += (x[0] ^ y[0]).count_ones();
        acc[1] += (x[1] ^ y[1]).count_ones();
        acc[2] += (x[2] ^ y[2]).count_ones();
        acc[3] += (x[3] ^ y[3]).count_ones();
    }
    let tail: u32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum();
    acc.iter().sum::<u32>() + tail
}
