// SPDX-License-Identifier: Apache-2.0

//! Deployable monitor bundles: a directory with `monitor.json` and one NAPS
//! store per monitored layer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{LayerCalibration, MonitorConfig, VoteScheme};
use crate::error::{NapError, Result};
use crate::monitor::Monitor;
use crate::naps::{load_store_as, save_store};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const BUNDLE_FILE: &str = "monitor.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleLayer {
    calibration: LayerCalibration,
    store: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleDoc {
    format_version: u32,
    vote_scheme: VoteScheme,
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    validation_accuracy: Option<f64>,
    layers: Vec<BundleLayer>,
}

/// A monitor together with the validation accuracy measured when it was
/// calibrated, if known.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorBundle {
    pub monitor: Monitor,
    pub validation_accuracy: Option<f64>,
}

fn store_file(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:03}_{clean}.naps")
}

pub fn save_monitor(dir: impl AsRef<Path>, bundle: &MonitorBundle) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let monitor = &bundle.monitor;
    let mut layers = Vec::with_capacity(monitor.config().k());
    for (i, (cal, store)) in monitor.config().layers().iter().zip(monitor.stores()).enumerate() {
        let file = store_file(i, cal.layer_name());
        save_store(dir.join(&file), store)?;
        layers.push(BundleLayer {
            calibration: cal.clone(),
            store: file,
        });
    }
    let doc = BundleDoc {
        format_version: BUNDLE_FORMAT_VERSION,
        vote_scheme: monitor.config().vote_scheme(),
        k: monitor.config().k(),
        validation_accuracy: bundle.validation_accuracy,
        layers,
    };
    fs::write(dir.join(BUNDLE_FILE), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

pub fn load_monitor(dir: impl AsRef<Path>) -> Result<MonitorBundle> {
    let dir = dir.as_ref();
    let doc: BundleDoc = serde_json::from_slice(&fs::read(dir.join(BUNDLE_FILE))?)?;
    if doc.format_version != BUNDLE_FORMAT_VERSION {
        return Err(NapError::UnsupportedVersion {
            found: doc.format_version,
            supported: BUNDLE_FORMAT_VERSION,
        });
    }
    if doc.k != doc.layers.len() {
        return Err(NapError::Corrupt(format!(
            "k = {} but {} layers listed",
            doc.k,
            doc.layers.len()
        )));
    }
    let mut calibrations = Vec::with_capacity(doc.k);
    let mut stores = Vec::with_capacity(doc.k);
    for layer in doc.layers {
        let path: PathBuf = dir.join(&layer.store);
        if !path.is_file() {
            return Err(NapError::DanglingStore(path));
        }
        let c = layer.calibration;
        // Re-derive tau_scaled and re-check invariants instead of trusting
        // the document.
        let cal = LayerCalibration::new(c.spec, c.cfg, c.tau, c.val_accuracy)?;
        if cal.bit_len != c.bit_len {
            return Err(NapError::Corrupt(format!(
                "layer `{}`: bit_len {} does not match shape",
                cal.layer_name(),
                c.bit_len
            )));
        }
        stores.push(load_store_as(&path, cal.layer_name())?);
        calibrations.push(cal);
    }
    let config = MonitorConfig::new(calibrations, doc.vote_scheme)?;
    Ok(MonitorBundle {
        monitor: Monitor::new(config, stores)?,
        validation_accuracy: doc.validation_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{BinarizationConfig, LayerSpec, PoolType, ThresholdMode};
    use crate::pattern::BinaryPattern;
    use crate::store::PatternStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn bundle(scheme: VoteScheme) -> MonitorBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cals = Vec::new();
        let mut stores = Vec::new();
        for (i, name) in ["conv/1", "fc.2", "fc 3"].iter().enumerate() {
            let bits = 20 + i * 30;
            let cfg = BinarizationConfig {
                p: 37.5,
                pool: PoolType::Avg,
                mode: ThresholdMode::PerPosition,
                thresholds: Some((0..bits).map(|_| rng.random::<f32>() * 0.1 + 0.3).collect()),
            };
            cals.push(LayerCalibration::new(LayerSpec::dense(*name, bits), cfg, 3 + i as u32, 0.875).unwrap());
            let pats: Vec<_> = (0..200)
                .map(|_| BinaryPattern::from_fn(bits, |_| rng.random()))
                .collect();
            stores.push(PatternStore::build(&pats, *name).unwrap());
        }
        MonitorBundle {
            monitor: Monitor::new(MonitorConfig::new(cals, scheme).unwrap(), stores).unwrap(),
            validation_accuracy: Some(0.9123456789),
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        for scheme in [VoteScheme::Scheme1, VoteScheme::Scheme2] {
            let dir = tempfile::tempdir().unwrap();
            let b = bundle(scheme);
            save_monitor(dir.path(), &b).unwrap();
            let back = load_monitor(dir.path()).unwrap();
            assert_eq!(back, b);
            assert_eq!(back.monitor.config().k(), 3);
            assert_eq!(back.monitor.config().vote_scheme(), scheme);

            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..50 {
                let s: HashMap<String, Vec<f32>> = b
                    .monitor
                    .config()
                    .layers()
                    .iter()
                    .map(|l| {
                        (
                            l.layer_name().to_owned(),
                            (0..l.bit_len).map(|_| rng.random::<f32>()).collect(),
                        )
                    })
                    .collect();
                assert_eq!(back.monitor.judge(&s).unwrap(), b.monitor.judge(&s).unwrap());
            }
        }
    }

    #[test]
    fn dangling_store_reference() {
        let dir = tempfile::tempdir().unwrap();
        save_monitor(dir.path(), &bundle(VoteScheme::Scheme1)).unwrap();
        fs::remove_file(dir.path().join("001_fc_2.naps")).unwrap();
        assert!(matches!(load_monitor(dir.path()), Err(NapError::DanglingStore(_))));
    }

    #[test]
    fn tampered_document_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_monitor(dir.path(), &bundle(VoteScheme::Scheme1)).unwrap();
        let path = dir.path().join(BUNDLE_FILE);
        let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        doc["k"] = 2.into();
        fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        assert!(matches!(load_monitor(dir.path()), Err(NapError::Corrupt(_))));

        doc["k"] = 3.into();
        doc["vote_scheme"] = "scheme2".into();
        doc["layers"].as_array_mut().unwrap().pop();
        doc["k"] = 2.into();
        fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        assert!(matches!(load_monitor(dir.path()), Err(NapError::EvenMajority(2))));
    }
}
