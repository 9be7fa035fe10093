use ndarray::{s, Array2, Array3};

use super::{DatasetManifest, WindowedDataset};
use crate::error::{Error, Result};

/// Start indices of every full window over a stream of `len` steps.
pub fn window_starts(len: usize, window_size: usize, overlap_fraction: f64) -> Result<Vec<usize>> {
    if window_size == 0 {
        return Err(Error::invalid("window_size must be positive"));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::invalid("overlap_fraction must lie in [0, 1)"));
    }
    if len < window_size {
        return Err(Error::invalid(format!(
            "stream shorter than window ({len} < {window_size})"
        )));
    }
    let stride = ((window_size as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    let count = (len - window_size) / stride + 1;
    Ok((0..count).map(|i| i * stride).collect())
}

/// Cuts a `[T, C]` stream into overlapping `[W, C]` windows. The trailing
/// partial window is dropped. The returned dataset is unlabeled.
pub fn window_series(
    stream: &Array2<f32>,
    window_size: usize,
    overlap_fraction: f64,
) -> Result<WindowedDataset> {
    let (len, channels) = stream.dim();
    let starts = window_starts(len, window_size, overlap_fraction)?;
    let mut samples = Array3::<f32>::zeros((starts.len(), window_size, channels));
    for (i, &start) in starts.iter().enumerate() {
        samples
            .slice_mut(s![i, .., ..])
            .assign(&stream.slice(s![start..start + window_size, ..]));
    }
    let manifest = DatasetManifest {
        name: "stream".into(),
        sample_rate_hz: 1.0,
        num_classes: 0,
        num_subjects: 0,
        window_size,
        overlap_fraction,
        class_names: Vec::new(),
        seed: None,
        num_windows: starts.len(),
        num_channels: channels,
        partitions: Vec::new(),
    };
    WindowedDataset::new(samples, None, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_fit_is_one_window() {
        assert_eq!(window_starts(128, 128, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn half_overlap_on_two_windows_of_data() {
        assert_eq!(window_starts(256, 128, 0.5).unwrap(), vec![0, 64, 128]);
    }

    #[test]
    fn short_stream_is_an_error() {
        let err = window_starts(127, 128, 0.5).unwrap_err();
        assert!(err.to_string().contains("stream shorter than window"));
    }

    #[test]
    fn windows_copy_the_right_slices() {
        let stream = Array2::from_shape_fn((10, 2), |(t, c)| (t * 2 + c) as f32);
        let ds = window_series(&stream, 4, 0.5).unwrap();
        assert_eq!(ds.samples.dim(), (4, 4, 2));
        assert_eq!(ds.samples[[1, 0, 0]], stream[[2, 0]]);
        assert_eq!(ds.samples[[3, 3, 1]], stream[[9, 1]]);
        assert!(ds.labels.is_none());
    }

    proptest! {
        #[test]
        fn half_overlap_stride_is_64(len in 128usize..5000) {
            let starts = window_starts(len, 128, 0.5).unwrap();
            prop_assert_eq!(starts.len(), (len - 128) / 64 + 1);
            prop_assert!(starts.windows(2).all(|w| w[1] - w[0] == 64));
            prop_assert!(starts.last().unwrap() + 128 <= len);
        }
    }
}
