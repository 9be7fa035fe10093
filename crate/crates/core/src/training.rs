//! Pretraining loops (AutoCL and the SimCLR baseline) with Adam, early
//! stopping on the mean epoch loss, and best-epoch selection.
//!
//! Randomness comes from one seed split into independent ChaCha streams
//! (initialization, shuffling, dropout, augmentation), so a single-threaded
//! run is bit-reproducible.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentationPair};
use crate::checkpoint::Checkpoint;
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::losses::{autocl_loss, nt_xent_op, LossConfig};
use crate::models::{
    autocl_forward, encoder_forward, init_model, projector_forward, Group, ModelSpec, Parameters,
    Session,
};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, WeightDecayMode};
use crate::tape::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Autocl,
    Simclr,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autocl" => Ok(Method::Autocl),
            "simclr" => Ok(Method::Simclr),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Joint L2 cap on the generator gradients; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    /// SimCLR views; ignored by AutoCL.
    pub aug_pair: Option<AugmentationPair>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Autocl,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-3,
            weight_decay_mode: WeightDecayMode::Decoupled,
            patience: 5,
            max_epochs: 200,
            seed: 0,
            grad_clip: Some(5.0),
            loss: LossConfig::default(),
            aug_pair: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr must be positive and weight_decay non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be positive"));
            }
        }
        if self.method == Method::Simclr && self.aug_pair.is_none() {
            return Err(Error::invalid("simclr needs an augmentation pair"));
        }
        self.loss.validate()
    }

    fn adam(&self) -> AdamConfig {
        let mut cfg = AdamConfig::new(self.lr, self.weight_decay);
        cfg.decay_mode = self.weight_decay_mode;
        cfg
    }
}

/// Independent random streams derived from the run seed. Stream 0 (the
/// plain seed) initializes the parameters.
pub(crate) enum Stream {
    Shuffle = 1,
    Dropout = 2,
    Augment = 3,
}

pub(crate) fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub nt_xent: f64,
    /// Mean correlation term entering the loss; absent when CR is off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cr: Option<f64>,
    /// Mean over batches of |pearson(x, x_gen)|, logged whether or not CR is
    /// optimized; absent for SimCLR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_correlation: Option<f64>,
    pub best_loss: f64,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Early-stopping bookkeeping and best-parameter snapshot.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    pub epoch: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub history: Vec<f64>,
    pub best_params: Parameters,
    pub patience: usize,
}

impl TrainState {
    pub fn new(params: Parameters, patience: usize) -> Self {
        Self {
            best_params: params.clone(),
            params,
            epoch: 0,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            history: Vec::new(),
            patience,
        }
    }

    /// Records the mean loss of the epoch just finished.
    pub fn early_stop_update(&mut self, epoch_loss: f64) -> StopDecision {
        self.epoch += 1;
        self.history.push(epoch_loss);
        if epoch_loss < self.best_loss {
            self.best_loss = epoch_loss;
            self.best_epoch = self.epoch;
            self.epochs_since_best = 0;
            self.best_params = self.params.clone();
        } else {
            self.epochs_since_best += 1;
        }
        if self.epochs_since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

fn collect_grads(
    grads: &mut crate::tape::Gradients,
    vars: &BTreeMap<String, crate::tape::Var>,
) -> BTreeMap<String, Tensor> {
    vars.iter()
        .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
        .collect()
}

struct BatchLoss {
    total: f64,
    nt_xent: f64,
    cr: Option<f64>,
    correlation: Option<f64>,
}

/// One AutoCL step on a batch: both streams, loss, backward, Adam.
fn autocl_step(
    spec: &ModelSpec,
    params: &mut Parameters,
    adam: &mut Adam,
    cfg: &TrainConfig,
    x: Array3<f64>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let tape = Tape::new();
    let (out, vars) = {
        let mut sess = Session::new(&tape, params, &[Group::Theta, Group::Xi], true, dropout_rng)
            .with_batch_norm(spec.bn_eps, spec.bn_momentum);
        let xv = tape.constant(x.into_dyn());
        let trace = autocl_forward(&mut sess, spec, xv)?;
        let out = autocl_loss(&tape, xv, trace.y, trace.x_gen, trace.y_gen, &cfg.loss)?;
        (out, sess.param_vars().clone())
    };
    let total = tape.value(out.total)[[]];
    let loss = BatchLoss {
        total,
        nt_xent: out.nt_xent,
        cr: out.cr,
        correlation: out.correlation,
    };
    if !total.is_finite() {
        return Ok(loss);
    }
    let mut grads = tape.backward(out.total);
    let mut named = collect_grads(&mut grads, &vars);
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(&mut named, "generator.", max);
    }
    adam.step(params, &[Group::Theta, Group::Xi], &named)?;
    Ok(loss)
}

fn simclr_step(
    spec: &ModelSpec,
    params: &mut Parameters,
    adam: &mut Adam,
    cfg: &TrainConfig,
    views: (Array3<f64>, Array3<f64>),
    dropout_rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let tape = Tape::new();
    let (loss, vars) = {
        let mut sess = Session::new(&tape, params, &[Group::Theta], true, dropout_rng)
            .with_batch_norm(spec.bn_eps, spec.bn_momentum);
        let a = tape.constant(views.0.into_dyn());
        let b = tape.constant(views.1.into_dyn());
        let za = encoder_forward(&mut sess, spec, a)?;
        let ya = projector_forward(&mut sess, spec, za)?;
        let zb = encoder_forward(&mut sess, spec, b)?;
        let yb = projector_forward(&mut sess, spec, zb)?;
        let loss = nt_xent_op(&tape, ya, yb, cfg.loss.tau, cfg.loss.denominator_mode)?;
        (loss, sess.param_vars().clone())
    };
    let total = tape.value(loss)[[]];
    let out = BatchLoss {
        total,
        nt_xent: total,
        cr: None,
        correlation: None,
    };
    if total.is_finite() {
        let mut grads = tape.backward(loss);
        let named = collect_grads(&mut grads, &vars);
        adam.step(params, &[Group::Theta], &named)?;
    }
    Ok(out)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Shared epoch loop; `step` trains on one batch of indices.
fn run_epochs(
    dataset: &WindowedDataset,
    spec: ModelSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
    mut step: impl FnMut(&mut Parameters, &[usize]) -> Result<BatchLoss>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.window_size() != spec.window_size || dataset.num_channels() != spec.num_channels {
        return Err(Error::shape(format!(
            "dataset windows are [{}, {}], model expects [{}, {}]",
            dataset.window_size(),
            dataset.num_channels(),
            spec.window_size,
            spec.num_channels
        )));
    }
    if dataset.num_windows() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "{} windows cannot fill one batch of {}",
            dataset.num_windows(),
            cfg.batch_size
        )));
    }
    let params = init_model(&spec, cfg.seed)?;
    let mut state = TrainState::new(params, cfg.patience);
    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut totals = Vec::new();
        let mut nts = Vec::new();
        let mut crs = Vec::new();
        let mut abs_corr = Vec::new();
        for (b, indices) in epoch_batches(dataset.num_windows(), cfg.batch_size, &mut shuffle_rng)
            .iter()
            .enumerate()
        {
            let loss = step(&mut state.params, indices)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    nt_xent: loss.nt_xent,
                    correlation: loss.correlation.unwrap_or(f64::NAN),
                });
            }
            totals.push(loss.total);
            nts.push(loss.nt_xent);
            crs.extend(loss.cr);
            abs_corr.extend(loss.correlation.map(f64::abs));
        }
        let epoch_loss = mean(&totals);
        let decision = state.early_stop_update(epoch_loss);
        let record = EpochRecord {
            epoch,
            loss: epoch_loss,
            nt_xent: mean(&nts),
            cr: (!crs.is_empty()).then(|| mean(&crs)),
            abs_correlation: (abs_corr.len() == totals.len()).then(|| mean(&abs_corr)),
            best_loss: state.best_loss,
            epochs_since_best: state.epochs_since_best,
        };
        tracing::info!(
            epoch,
            loss = epoch_loss,
            nt_xent = record.nt_xent,
            epochs_since_best = state.epochs_since_best,
            "pretraining epoch"
        );
        on_epoch(&record);
        log.push(record);
        if decision == StopDecision::Stop {
            break;
        }
    }

    Ok(Checkpoint {
        spec,
        params: state.best_params,
        method: cfg.method,
        config: serde_json::to_value(cfg)?,
        history: log,
        best_epoch: state.best_epoch,
    })
}

/// AutoCL pretraining; returns the parameters of the lowest-loss epoch.
pub fn pretrain_autocl(
    dataset: &WindowedDataset,
    spec: ModelSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let mut adam = Adam::new(cfg.adam());
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let step_spec = spec.clone();
    run_epochs(dataset, spec, cfg, on_epoch, |params, indices| {
        let x = dataset.batch(indices);
        autocl_step(&step_spec, params, &mut adam, cfg, x, &mut dropout_rng)
    })
}

/// SimCLR baseline: two hand-crafted views through the shared encoder and
/// projector, NT-Xent only.
pub fn pretrain_simclr(
    dataset: &WindowedDataset,
    spec: ModelSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let pair = cfg
        .aug_pair
        .ok_or_else(|| Error::invalid("simclr needs an augmentation pair"))?;
    let mut adam = Adam::new(cfg.adam());
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut aug_rng = stream(cfg.seed, Stream::Augment);
    let step_spec = spec.clone();
    run_epochs(dataset, spec, cfg, on_epoch, |params, indices| {
        let x = dataset.batch(indices);
        let views = make_views(&x, &pair.first, &pair.second, &mut aug_rng)?;
        simclr_step(&step_spec, params, &mut adam, cfg, views, &mut dropout_rng)
    })
}

/// Dispatches on `cfg.method`.
pub fn pretrain(
    dataset: &WindowedDataset,
    spec: ModelSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    match cfg.method {
        Method::Autocl => pretrain_autocl(dataset, spec, cfg, on_epoch),
        Method::Simclr => pretrain_simclr(dataset, spec, cfg, on_epoch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_data() -> WindowedDataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: 3,
            windows_per_class: 8,
            window_size: 16,
            num_channels: 2,
            noise_sigma: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(16, 2);
        spec.conv_channels = [4, 4, 8];
        spec.proj_hidden = 8;
        spec.proj_out = 8;
        spec
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: 4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn early_stopping_counts() {
        let mut s = TrainState::new(Parameters::default(), 5);
        let trace = [5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0];
        let decisions: Vec<_> = trace.iter().map(|&l| s.early_stop_update(l)).collect();
        assert_eq!(decisions[..6], [StopDecision::Continue; 6]);
        assert_eq!(decisions[6], StopDecision::Stop);
        assert_eq!(s.best_epoch, 2);

        let mut s = TrainState::new(Parameters::default(), 5);
        for l in [3.0, 2.0, 2.5] {
            s.early_stop_update(l);
        }
        assert_eq!(s.epochs_since_best, 1);
        s.early_stop_update(1.9);
        assert_eq!(s.epochs_since_best, 0);
        assert_eq!(s.best_epoch, 4);

        let mut s = TrainState::new(Parameters::default(), 1);
        for i in 0..50 {
            assert_eq!(s.early_stop_update(100.0 - i as f64), StopDecision::Continue);
        }
    }

    #[test]
    fn batches_drop_the_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 100,
            ..tiny_cfg()
        };
        assert!(pretrain_autocl(&tiny_data(), tiny_spec(), &cfg, &mut |_| {}).is_err());
    }

    #[test]
    fn autocl_runs_and_is_deterministic() {
        let data = tiny_data();
        let a = pretrain_autocl(&data, tiny_spec(), &tiny_cfg(), &mut |_| {}).unwrap();
        let b = pretrain_autocl(&data, tiny_spec(), &tiny_cfg(), &mut |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert!(a.history.iter().all(|r| r.cr.is_some() && r.abs_correlation.is_some()));
        let best = a
            .history
            .iter()
            .min_by(|x, y| x.loss.total_cmp(&y.loss))
            .unwrap();
        assert_eq!(best.epoch, a.best_epoch);
    }

    #[test]
    fn generator_and_encoder_both_move() {
        let data = tiny_data();
        let spec = tiny_spec();
        let init = init_model(&spec, 11).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..tiny_cfg()
        };
        let ck = pretrain_autocl(&data, spec, &cfg, &mut |_| {}).unwrap();
        assert_ne!(ck.params.theta, init.theta);
        assert_ne!(ck.params.xi, init.xi);
    }

    #[test]
    fn simclr_moves_only_the_encoder() {
        let data = tiny_data();
        let spec = tiny_spec();
        let cfg = TrainConfig {
            method: Method::Simclr,
            aug_pair: Some("SP".parse().unwrap()),
            max_epochs: 2,
            ..tiny_cfg()
        };
        let init = init_model(&spec, 11).unwrap();
        let ck = pretrain_simclr(&data, spec, &cfg, &mut |_| {}).unwrap();
        assert_eq!(ck.params.xi, init.xi);
        assert_ne!(ck.params.theta, init.theta);
        assert!(ck.history.iter().all(|r| r.cr.is_none()));
    }

    #[test]
    fn simclr_requires_a_pair() {
        let cfg = TrainConfig {
            method: Method::Simclr,
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }
}
