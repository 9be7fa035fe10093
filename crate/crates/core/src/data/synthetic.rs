use std::f64::consts::TAU;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, WindowedDataset};
use crate::error::{Error, Result};

/// Desk-scale labeled dataset: one sinusoidal template per class, plus
/// Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub windows_per_class: usize,
    pub window_size: usize,
    pub num_channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        if self.windows_per_class == 0 || self.window_size < 2 || self.num_channels == 0 {
            return Err(Error::invalid(
                "windows_per_class, num_channels must be positive and window_size >= 2",
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Per (class, channel): cycles per window, amplitude and phase.
fn class_templates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<(f64, f64, f64)>> {
    (0..spec.num_classes)
        .map(|_| {
            (0..spec.num_channels)
                .map(|_| {
                    (
                        rng.random_range(1.0..8.0),
                        rng.random_range(0.5..1.5),
                        rng.random_range(0.0..TAU),
                    )
                })
                .collect()
        })
        .collect()
}

/// Generates `num_classes * windows_per_class` windows, class-major order.
/// Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<WindowedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = class_templates(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");

    let n = spec.num_classes * spec.windows_per_class;
    let (w, c) = (spec.window_size, spec.num_channels);
    let mut samples = Array3::<f32>::zeros((n, w, c));
    let mut labels = Vec::with_capacity(n);
    for (k, template) in templates.iter().enumerate() {
        for j in 0..spec.windows_per_class {
            let i = k * spec.windows_per_class + j;
            labels.push(k);
            for t in 0..w {
                let phase_t = TAU * t as f64 / w as f64;
                for (ch, &(freq, amp, phase)) in template.iter().enumerate() {
                    let clean = amp * (freq * phase_t + phase).sin();
                    let eps = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    samples[[i, t, ch]] = (clean + eps) as f32;
                }
            }
        }
    }

    let manifest = DatasetManifest {
        name: "synthetic".into(),
        sample_rate_hz: 50.0,
        num_classes: spec.num_classes,
        num_subjects: 0,
        window_size: w,
        overlap_fraction: 0.0,
        class_names: (0..spec.num_classes).map(|k| format!("class_{k}")).collect(),
        seed: Some(spec.seed),
        num_windows: n,
        num_channels: c,
        partitions: Vec::new(),
    };
    WindowedDataset::new(samples, Some(labels), manifest)
}
