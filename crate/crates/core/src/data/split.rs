use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::WindowedDataset;
use crate::error::{Error, Result};

/// Stratified index split: within every class, `round(fraction * count)`
/// windows go to the tuning side. Both index lists are sorted.
pub fn few_shot_indices(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "few-shot fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label {y} >= {num_classes}")))?
            .push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tune = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in per_class.into_iter().enumerate() {
        if members.is_empty() {
            // Classes absent from the data cannot starve.
            continue;
        }
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::ClassStarvation { class });
        }
        tune.extend_from_slice(&members[..take]);
        test.extend_from_slice(&members[take..]);
    }
    tune.sort_unstable();
    test.sort_unstable();
    Ok((tune, test))
}

/// Splits a labeled dataset into a few-shot tuning set and a test set.
pub fn split_few_shot(
    dataset: &WindowedDataset,
    fraction: f64,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("few-shot split needs a labeled dataset"))?;
    let (tune, test) = few_shot_indices(labels, dataset.num_classes(), fraction, seed)?;
    Ok((dataset.subset(&tune)?, dataset.subset(&test)?))
}
