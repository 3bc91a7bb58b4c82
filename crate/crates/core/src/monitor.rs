// SPDX-License-Identifier: Apache-2.0

//! Runtime OOD decisions from per-layer nearest distances.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::calibration::{MonitorConfig, VoteScheme};
use crate::error::{NapError, Result};
use crate::extraction::extract_pattern;
use crate::store::{NearestSearch, PatternStore};

/// Source of one sample's raw activations, looked up by layer name.
pub trait LayerActivations {
    fn layer(&self, name: &str) -> Option<&[f32]>;
}

impl LayerActivations for HashMap<String, Vec<f32>> {
    fn layer(&self, name: &str) -> Option<&[f32]> {
        self.get(name).map(Vec::as_slice)
    }
}

impl LayerActivations for BTreeMap<String, Vec<f32>> {
    fn layer(&self, name: &str) -> Option<&[f32]> {
        self.get(name).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVerdict {
    pub layer_name: String,
    pub distance: u32,
    pub scaled: f64,
    pub vote_ood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub per_layer: Vec<LayerVerdict>,
    /// Summed scaled margin; only produced under scheme 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub is_ood: bool,
}

fn check_count(distances: &[u32], config: &MonitorConfig) -> Result<()> {
    if distances.len() != config.k() {
        return Err(NapError::InvalidConfig(format!(
            "{} distances for a {}-layer monitor",
            distances.len(),
            config.k()
        )));
    }
    Ok(())
}

/// `sum_l (d_l / L_l - tau_l / L_l)`; positive means OOD.
pub fn score_scheme1(distances: &[u32], config: &MonitorConfig) -> Result<f64> {
    check_count(distances, config)?;
    Ok(distances
        .iter()
        .zip(config.layers())
        .map(|(&d, l)| f64::from(d) / l.bit_len as f64 - l.tau_scaled)
        .sum())
}

/// Majority of an odd number of OOD votes.
pub fn vote_scheme2(votes: &[bool]) -> Result<bool> {
    if votes.len() % 2 == 0 {
        return Err(NapError::EvenMajority(votes.len()));
    }
    Ok(votes.iter().filter(|&&v| v).count() > votes.len() / 2)
}

/// A judge-ready monitor: configuration plus one pattern store per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Monitor {
    config: MonitorConfig,
    stores: Vec<PatternStore>,
}

impl Monitor {
    pub fn new(config: MonitorConfig, stores: Vec<PatternStore>) -> Result<Self> {
        if stores.len() != config.k() {
            return Err(NapError::InvalidConfig(format!(
                "{} stores for a {}-layer monitor",
                stores.len(),
                config.k()
            )));
        }
        for (l, s) in config.layers().iter().zip(&stores) {
            if s.layer_name() != l.layer_name() {
                return Err(NapError::InvalidConfig(format!(
                    "store for `{}` supplied where `{}` was expected",
                    s.layer_name(),
                    l.layer_name()
                )));
            }
            if s.bit_len() != l.bit_len {
                return Err(NapError::InvalidConfig(format!(
                    "layer `{}`: store holds {}-bit patterns, calibration expects {}",
                    l.layer_name(),
                    s.bit_len(),
                    l.bit_len
                )));
            }
        }
        Ok(Self { config, stores })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn stores(&self) -> &[PatternStore] {
        &self.stores
    }

    /// Nearest training distance for each configured layer.
    pub fn distances<A: LayerActivations + ?Sized>(&self, sample: &A) -> Result<Vec<u32>> {
        self.config
            .layers()
            .iter()
            .zip(&self.stores)
            .map(|(cal, store)| {
                let values = sample
                    .layer(cal.layer_name())
                    .ok_or_else(|| NapError::LayerMissing(cal.layer_name().to_owned()))?;
                let pattern = extract_pattern(values, &cal.spec, &cal.cfg)?;
                Ok(store.nearest(&pattern)?.distance)
            })
            .collect()
    }

    /// Combines per-layer distances into a verdict.
    pub fn decide(&self, distances: &[u32]) -> Result<Verdict> {
        check_count(distances, &self.config)?;
        let per_layer: Vec<LayerVerdict> = distances
            .iter()
            .zip(self.config.layers())
            .map(|(&d, l)| LayerVerdict {
                layer_name: l.layer_name().to_owned(),
                distance: d,
                scaled: f64::from(d) / l.bit_len as f64,
                vote_ood: d > l.tau,
            })
            .collect();
        let (score, is_ood) = match self.config.vote_scheme() {
            VoteScheme::Scheme1 => {
                let s = score_scheme1(distances, &self.config)?;
                (Some(s), s > 0.0)
            }
            VoteScheme::Scheme2 => {
                let votes: Vec<bool> = per_layer.iter().map(|v| v.vote_ood).collect();
                (None, vote_scheme2(&votes)?)
            }
        };
        Ok(Verdict {
            per_layer,
            score,
            is_ood,
        })
    }

    pub fn judge<A: LayerActivations + ?Sized>(&self, sample: &A) -> Result<Verdict> {
        self.decide(&self.distances(sample)?)
    }
}
