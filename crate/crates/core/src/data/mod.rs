//! Windowed sensor datasets.
//!
//! Every source (the UCI HAR archive, a raw stream, the synthetic generator)
//! is turned into a [`WindowedDataset`]: a `[num_windows, W, C]` block of
//! `f32` sensor readings, optional integer labels and a [`DatasetManifest`]
//! describing where the data came from. The on-disk form is the container
//! written by [`save_container`].

mod container;
mod split;
mod synthetic;
mod ucihar;
mod window;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{load_container, save_container, LABELS_FILE, MANIFEST_FILE, SAMPLES_FILE};
pub use split::{few_shot_indices, split_few_shot};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use ucihar::{import_ucihar, UCIHAR_ACTIVITIES, UCIHAR_SIGNALS};
pub use window::{window_series, window_starts};

/// Contiguous run of windows that came from one source partition
/// (e.g. the published `train` or `test` half of UCI HAR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub sample_rate_hz: f64,
    pub num_classes: usize,
    pub num_subjects: usize,
    pub window_size: usize,
    pub overlap_fraction: f64,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Shape bookkeeping used to check container integrity.
    pub num_windows: usize,
    pub num_channels: usize,
    #[serde(default)]
    pub partitions: Vec<Partition>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::invalid("sample_rate_hz must be positive"));
        }
        if self.window_size < 2 {
            return Err(Error::invalid("window_size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::invalid("overlap_fraction must lie in [0, 1)"));
        }
        if self.num_channels == 0 {
            return Err(Error::invalid("num_channels must be positive"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `[num_windows, W, C]`, row-major.
    pub samples: Array3<f32>,
    pub labels: Option<Vec<usize>>,
    pub manifest: DatasetManifest,
}

impl WindowedDataset {
    /// Builds a dataset and checks every invariant (shape agreement with the
    /// manifest, label range, finiteness).
    pub fn new(
        samples: Array3<f32>,
        labels: Option<Vec<usize>>,
        mut manifest: DatasetManifest,
    ) -> Result<Self> {
        let (n, w, c) = samples.dim();
        manifest.num_windows = n;
        manifest.num_channels = c;
        manifest.window_size = w;
        let ds = Self {
            samples: samples.as_standard_layout().into_owned(),
            labels,
            manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let (n, w, c) = self.samples.dim();
        if n != self.manifest.num_windows
            || w != self.manifest.window_size
            || c != self.manifest.num_channels
        {
            return Err(Error::Integrity(format!(
                "samples shape [{n}, {w}, {c}] disagrees with manifest [{}, {}, {}]",
                self.manifest.num_windows, self.manifest.window_size, self.manifest.num_channels
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Integrity(format!(
                    "{} labels for {n} windows",
                    labels.len()
                )));
            }
            if let Some((i, &y)) = labels
                .iter()
                .enumerate()
                .find(|(_, &y)| y >= self.manifest.num_classes)
            {
                return Err(Error::Integrity(format!(
                    "label {y} at window {i} is outside [0, {})",
                    self.manifest.num_classes
                )));
            }
        }
        if let Some(pos) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sample value at flat index {pos}"
            )));
        }
        Ok(())
    }

    pub fn num_windows(&self) -> usize {
        self.samples.dim().0
    }

    pub fn window_size(&self) -> usize {
        self.samples.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.samples.dim().2
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// The windows at `indices`, in that order, widened to `f64`.
    pub fn batch(&self, indices: &[usize]) -> Array3<f64> {
        let (_, w, c) = self.samples.dim();
        let mut out = Array3::<f64>::zeros((indices.len(), w, c));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.samples.index_axis(Axis(0), i).mapv(f64::from));
        }
        out
    }

    /// New dataset holding the windows at `indices` (order preserved).
    /// Partition markers do not survive subsetting.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_windows()) {
            return Err(Error::invalid(format!(
                "window index {bad} out of range for {} windows",
                self.num_windows()
            )));
        }
        let samples = self.samples.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let mut manifest = self.manifest.clone();
        manifest.partitions.clear();
        Self::new(samples, labels, manifest)
    }
}
