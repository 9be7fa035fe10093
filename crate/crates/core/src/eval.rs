//! Few-shot evaluation on a frozen encoder, metrics, and CSV exports.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::models::{head_logits, init_head, AutoClModel, Group, Session};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;
use crate::training::Method;

/// Windows pushed through the frozen encoder at once.
const ENCODE_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_accuracy_history: Vec<f64>,
    pub top10_mean_accuracy: f64,
    pub final_accuracy: f64,
    /// `confusion[i][j]`: windows of true class `i` predicted as `j`, using
    /// the head after the last epoch.
    pub confusion: Vec<Vec<usize>>,
    /// `None` for classes without test windows.
    pub per_class_recall: Vec<Option<f64>>,
    pub num_tune: usize,
    pub num_test: usize,
}

/// Mean of the ten largest entries.
pub fn top10_average(history: &[f64]) -> Result<f64> {
    if history.len() < 10 {
        return Err(Error::invalid(format!(
            "top-10 average needs at least 10 entries, got {}",
            history.len()
        )));
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..10].iter().sum::<f64>() / 10.0)
}

pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes || p >= num_classes {
            return Err(Error::invalid(format!(
                "class index {} out of range for {num_classes} classes",
                y.max(p)
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Encoder features `z` (or projections `y`) for every window, eval mode.
pub fn encode_dataset(
    model: &mut AutoClModel,
    dataset: &WindowedDataset,
    projection: bool,
) -> Result<Array2<f64>> {
    // Eval mode draws no randomness; the generator only satisfies the API.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = dataset.num_windows();
    let mut parts = Vec::new();
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(n)).collect();
        let x = dataset.batch(&idx);
        let z = model.encode(&x, false, &mut rng)?;
        parts.push(if projection {
            model.project(&z, false, &mut rng)?
        } else {
            z
        });
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

fn labels_of(dataset: &WindowedDataset) -> Result<&[usize]> {
    dataset
        .labels
        .as_deref()
        .ok_or_else(|| Error::invalid("evaluation needs a labeled dataset"))
}

fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn predict(model: &mut AutoClModel, features: &Array2<f64>) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(argmax_rows(&model.classify(features, &mut rng)?))
}

fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Trains a fresh prediction head on frozen encoder features of `tune` and
/// tracks test accuracy after every epoch. The returned model is the
/// checkpoint's encoder and generator, untouched, plus the trained head.
pub fn finetune(
    checkpoint: &Checkpoint,
    tune: &WindowedDataset,
    test: &WindowedDataset,
    cfg: &FinetuneConfig,
) -> Result<(AutoClModel, EvalReport)> {
    if cfg.epochs < 10 || cfg.batch_size < 2 {
        return Err(Error::invalid(
            "fine-tuning needs at least 10 epochs (top-10 metric) and batch_size >= 2",
        ));
    }
    let tune_labels = labels_of(tune)?;
    let test_labels = labels_of(test)?;
    let num_classes = tune.num_classes();
    let tune_set: BTreeSet<_> = tune_labels.iter().copied().collect();
    let test_set: BTreeSet<_> = test_labels.iter().copied().collect();
    if num_classes != test.num_classes() || tune_set != test_set {
        return Err(Error::invalid(format!(
            "label sets differ: tune {tune_set:?} of {num_classes}, test {test_set:?} of {}",
            test.num_classes()
        )));
    }
    if test_labels.is_empty() || tune_labels.len() < 2 {
        return Err(Error::invalid("tune split needs two windows and test split one"));
    }

    let mut model = AutoClModel {
        spec: checkpoint.spec.clone(),
        params: checkpoint.params.clone(),
    };
    let tune_z = encode_dataset(&mut model, tune, false)?;
    let test_z = encode_dataset(&mut model, test, false)?;

    init_head(&mut model.params, model.spec.embedding_dim(), num_classes, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.weight_decay));
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..tune_labels.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            // Batch norm cannot normalize a single window.
            if chunk.len() < 2 {
                continue;
            }
            let z = tune_z.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| tune_labels[i]).collect();
            let tape = Tape::new();
            let (loss, vars) = {
                let mut sess =
                    Session::new(&tape, &mut model.params, &[Group::Head], true, &mut shuffle)
                    .with_batch_norm(model.spec.bn_eps, model.spec.bn_momentum);
                let zv = tape.constant(z.into_dyn());
                let logits = head_logits(&mut sess, zv)?;
                (tape.cross_entropy_logits(logits, &y)?, sess.param_vars().clone())
            };
            let value = tape.value(loss)[[]];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}")));
            }
            let mut grads = tape.backward(loss);
            let named = vars
                .iter()
                .filter(|(k, _)| k.starts_with("head."))
                .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
                .collect();
            adam.step(&mut model.params, &[Group::Head], &named)?;
        }
        let acc = accuracy(&predict(&mut model, &test_z)?, test_labels);
        tracing::debug!(epoch, accuracy = acc, "fine-tuning epoch");
        history.push(acc);
    }

    let predictions = predict(&mut model, &test_z)?;
    let confusion = confusion_matrix(&predictions, test_labels, num_classes)?;
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    let top10 = top10_average(&history)?;
    let report = EvalReport {
        final_accuracy: accuracy(&predictions, test_labels),
        top10_mean_accuracy: top10,
        test_accuracy_history: history,
        confusion,
        per_class_recall,
        num_tune: tune_labels.len(),
        num_test: test_labels.len(),
    };
    Ok((model, report))
}

pub fn write_confusion_csv(confusion: &[Vec<usize>], class_names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (name, row) in class_names.iter().zip(confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let kind = std::io::ErrorKind::Other;
    Error::io(path, std::io::Error::new(kind, e.to_string()))
}

/// One row per window: label (`-1` when unlabeled) followed by the features.
pub fn export_embeddings(
    checkpoint: &Checkpoint,
    dataset: &WindowedDataset,
    path: &Path,
    projection: bool,
) -> Result<()> {
    let mut model = AutoClModel {
        spec: checkpoint.spec.clone(),
        params: checkpoint.params.clone(),
    };
    let feats = encode_dataset(&mut model, dataset, projection)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..feats.ncols()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, row) in feats.rows().into_iter().enumerate() {
        let label = dataset
            .labels
            .as_ref()
            .map_or(-1, |l| l[i] as i64);
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Paired original / generated series for `k` windows drawn with `seed`.
pub fn export_augmentation_views(
    checkpoint: &Checkpoint,
    dataset: &WindowedDataset,
    k: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    if checkpoint.method != Method::Autocl {
        return Err(Error::invalid("augmentation views need an AutoCL checkpoint"));
    }
    let n = dataset.num_windows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot sample {k} of {n} windows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let x = dataset.batch(&picked);
    let mut model = AutoClModel {
        spec: checkpoint.spec.clone(),
        params: checkpoint.params.clone(),
    };
    let generated = model.augment(&x, false, &mut rng)?;
    if generated.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generated window".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["window", "channel", "t", "original", "generated"])
        .map_err(|e| csv_error(path, e))?;
    for (slot, &window) in picked.iter().enumerate() {
        let orig = x.slice(s![slot, .., ..]);
        let gen = generated.slice(s![slot, .., ..]);
        for c in 0..x.dim().2 {
            for t in 0..x.dim().1 {
                w.write_record([
                    window.to_string(),
                    c.to_string(),
                    t.to_string(),
                    orig[[t, c]].to_string(),
                    gen[[t, c]].to_string(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
