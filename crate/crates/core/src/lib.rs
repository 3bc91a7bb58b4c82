// SPDX-License-Identifier: Apache-2.0

//! Out-of-distribution detection from binary neuron activation patterns.
//!
//! A layer's activations for one input are reduced to a binary pattern
//! (channel pooling for convolutional layers, then percentile binarization).
//! Patterns of the training set are kept in a [`PatternStore`]; at runtime
//! the minimum Hamming distance from a new input's pattern to the store
//! measures how unfamiliar the input is. Per-layer thresholds are fitted
//! against a validation OOD set and several layers are combined into one
//! verdict by a [`Monitor`].
//!
//! ```
//! use napmon::{BinaryPattern, NearestSearch, PatternStore};
//!
//! let train = [
//!     BinaryPattern::pack([true, true, false, false]),
//!     BinaryPattern::pack([false, true, true, false]),
//! ];
//! let store = PatternStore::build(&train, "fc1").unwrap();
//! let hit = store.nearest(&BinaryPattern::pack([true, true, true, false])).unwrap();
//! assert_eq!(hit.distance, 1);
//! assert_eq!(hit.index, 0);
//! ```

pub mod bench;
pub mod bundle;
pub mod calibration;
pub mod dump;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod index;
pub mod monitor;
pub mod naps;
pub mod pattern;
pub mod store;
pub mod synth;

pub use bundle::{load_monitor, save_monitor, MonitorBundle};
pub use calibration::{
    grid_search_layer, layer_accuracy, otsu_tau, select_layers, Criterion, LayerCalibration, MonitorConfig,
    SearchSpace, VoteScheme,
};
pub use dump::{read_dump, write_dump, ActivationDump, LayerData};
pub use error::{NapError, Result};
pub use eval::{accuracy, auroc, calibrate, evaluate, run_odtest, OdTestConfig, OdTestReport};
pub use extraction::{
    binarize, extract_pattern, fit_thresholds, percentile_threshold, pool_channels, BinarizationConfig, LayerKind,
    LayerSpec, PoolType, ThresholdMode,
};
pub use index::MultiIndex;
pub use monitor::{score_scheme1, vote_scheme2, LayerActivations, Monitor, Verdict};
pub use naps::{load_store, save_store};
pub use pattern::BinaryPattern;
pub use store::{Nearest, NearestSearch, PatternStore};
pub use synth::{synth_generate, SyntheticSpec};
