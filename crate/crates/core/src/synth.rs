// SPDX-License-Identifier: Apache-2.0

//! Synthetic activation dumps with controllable ID/OOD separability.
//!
//! Every class owns a Gaussian prototype per layer. ID samples are a class
//! prototype plus isotropic noise, rectified at zero. OOD datasets use their
//! own prototypes, derived from random ID prototypes by a large Gaussian
//! shift; the validation and test OOD sets use disjoint prototype draws so
//! the test distribution is never seen during calibration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dump::{write_dump, ActivationDump, CapturePoint, DumpInfo, LayerData};
use crate::error::{NapError, Result};
use crate::extraction::LayerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Prototypes per OOD dataset.
    pub ood_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub id_noise_scale: f64,
    pub ood_shift_scale: f64,
    pub samples: SplitCounts,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The configuration the end-to-end acceptance run is pinned to.
    pub fn reference() -> Self {
        Self {
            classes: 8,
            ood_classes: 8,
            layers: vec![
                LayerSpec::conv("block1", 32, 8, 8),
                LayerSpec::conv("block2", 64, 4, 4),
                LayerSpec::dense("fc1", 128),
            ],
            id_noise_scale: 0.5,
            ood_shift_scale: 1.5,
            samples: SplitCounts {
                train: 2000,
                validation: 500,
                test: 500,
            },
            seed: 20_230_601,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let SplitCounts {
            train,
            validation,
            test,
        } = self.samples;
        if train == 0 || validation == 0 || test == 0 {
            return Err(NapError::InvalidConfig("every split needs at least one sample".into()));
        }
        if self.classes == 0 || self.ood_classes == 0 || self.layers.is_empty() {
            return Err(NapError::InvalidConfig(
                "classes, OOD classes and layers must be non-empty".into(),
            ));
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.id_noise_scale) || !finite_nonneg(self.ood_shift_scale) {
            return Err(NapError::InvalidConfig(
                "noise and shift scales must be finite and non-negative".into(),
            ));
        }
        self.layers.iter().try_for_each(LayerSpec::validate)
    }
}

/// Training ID, validation OOD and test OOD dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTriplet {
    pub train: ActivationDump,
    pub validation: ActivationDump,
    pub test: ActivationDump,
}

impl SyntheticTriplet {
    /// Writes `train/`, `validation/` and `test/` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_dump(dir.join("train"), &self.train)?;
        write_dump(dir.join("validation"), &self.validation)?;
        write_dump(dir.join("test"), &self.test)
    }
}

type Prototypes = Vec<Vec<Vec<f32>>>; // [class][layer][element]

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

fn shifted(rng: &mut ChaCha8Rng, base: &Prototypes, count: usize, scale: f64) -> Prototypes {
    (0..count)
        .map(|_| {
            let src = &base[rng.random_range(0..base.len())];
            src.iter()
                .map(|layer| {
                    let shift = gaussian(rng, layer.len(), scale);
                    layer.iter().zip(shift).map(|(a, b)| a + b).collect()
                })
                .collect()
        })
        .collect()
}

fn draw(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    protos: &Prototypes,
    n: usize,
    dataset: &str,
    split: &str,
) -> Result<ActivationDump> {
    let mut values: Vec<Vec<f32>> = spec
        .layers
        .iter()
        .map(|l| Vec::with_capacity(n * l.element_count()))
        .collect();
    for i in 0..n {
        let class = &protos[i % protos.len()];
        for (l, out) in values.iter_mut().enumerate() {
            for &center in &class[l] {
                let noise = spec.id_noise_scale * rng.sample::<f64, _>(StandardNormal);
                out.push((f64::from(center) + noise).max(0.0) as f32);
            }
        }
    }
    let layers = spec
        .layers
        .iter()
        .zip(values)
        .map(|(l, v)| LayerData::new(l.clone(), n, v))
        .collect::<Result<_>>()?;
    ActivationDump::new(
        DumpInfo {
            model_id: "synthetic".into(),
            dataset_id: dataset.into(),
            split: split.into(),
            capture: Some(CapturePoint::PostRelu),
        },
        layers,
    )
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticTriplet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let id: Prototypes = (0..spec.classes)
        .map(|_| {
            spec.layers
                .iter()
                .map(|l| gaussian(&mut rng, l.element_count(), 1.0))
                .collect()
        })
        .collect();
    let ood_v = shifted(&mut rng, &id, spec.ood_classes, spec.ood_shift_scale);
    let ood_t = shifted(&mut rng, &id, spec.ood_classes, spec.ood_shift_scale);
    Ok(SyntheticTriplet {
        train: draw(&mut rng, spec, &id, spec.samples.train, "synthetic-id", "train")?,
        validation: draw(
            &mut rng,
            spec,
            &ood_v,
            spec.samples.validation,
            "synthetic-ood-a",
            "validation",
        )?,
        test: draw(&mut rng, spec, &ood_t, spec.samples.test, "synthetic-ood-b", "test")?,
    })
}
