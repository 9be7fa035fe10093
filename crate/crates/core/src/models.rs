//! The four networks of the system and their shape contracts.
//!
//! - encoder `f`: three blocks of conv(k=8, same) -> batch norm -> ReLU ->
//!   max-pool(2) -> dropout, then a global max over time;
//! - projector `p`: FC -> batch norm -> ReLU -> FC -> optional softmax;
//! - generator `g`: a stacked bidirectional GRU whose merged output is mapped
//!   back to `C` channels by a grouped pointwise layer. Variant E conditions
//!   on the projection (after batch norm + ReLU, tiled over time), variant D
//!   on the batch-normalized raw window;
//! - prediction head: FC -> batch norm -> ReLU -> FC -> softmax.
//!
//! Networks run on a [`Session`], which binds the parameters onto a
//! [`Tape`]. Each parameter is bound once per session, so the two Siamese
//! streams read (and accumulate gradients into) the very same leaf.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorVariant {
    /// Conditioned on the projected embedding.
    E,
    /// Conditioned on the raw (batch-normalized) window.
    D,
}

impl std::str::FromStr for GeneratorVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "E" | "e" => Ok(GeneratorVariant::E),
            "D" | "d" => Ok(GeneratorVariant::D),
            other => Err(Error::invalid(format!("unknown generator variant {other:?}"))),
        }
    }
}

/// How the two GRU directions of the last layer are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BidirMerge {
    Sum,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub window_size: usize,
    pub num_channels: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernel: usize,
    pub pool: usize,
    pub dropout: f64,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub projector_softmax: bool,
    pub variant: GeneratorVariant,
    pub bidir_merge: BidirMerge,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelSpec {
    pub fn new(window_size: usize, num_channels: usize) -> Self {
        Self {
            window_size,
            num_channels,
            conv_channels: [32, 64, 128],
            conv_kernel: 8,
            pool: 2,
            dropout: 0.1,
            proj_hidden: 256,
            proj_out: 128,
            gru_layers: 3,
            gru_hidden: 4 * num_channels,
            projector_softmax: true,
            variant: GeneratorVariant::E,
            bidir_merge: BidirMerge::Sum,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.window_size,
            self.num_channels,
            self.conv_kernel,
            self.pool,
            self.proj_hidden,
            self.proj_out,
            self.gru_layers,
            self.gru_hidden,
        ];
        if positive.contains(&0) || self.conv_channels.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.window_size < self.conv_kernel {
            return Err(Error::invalid(format!(
                "window {} shorter than conv kernel {}",
                self.window_size, self.conv_kernel
            )));
        }
        if self.window_size / self.pool.pow(3) == 0 {
            return Err(Error::invalid(format!(
                "window {} too short for three pooling stages of {}",
                self.window_size, self.pool
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.generator_features() % self.num_channels != 0 {
            return Err(Error::invalid(
                "merged GRU width must be divisible by the channel count",
            ));
        }
        Ok(())
    }

    /// Width of the encoder output `z`.
    pub fn embedding_dim(&self) -> usize {
        self.conv_channels[2]
    }

    /// Channels entering the grouped output layer of the generator.
    pub fn generator_features(&self) -> usize {
        match self.bidir_merge {
            BidirMerge::Sum => self.gru_hidden,
            BidirMerge::Concat => 2 * self.gru_hidden,
        }
    }

    fn generator_input_dim(&self) -> usize {
        match self.variant {
            GeneratorVariant::E => self.proj_out,
            GeneratorVariant::D => self.num_channels,
        }
    }
}

/// Named parameter arrays, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// Parameter groups, named after the roles they play in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Encoder and projector.
    Theta,
    /// Generator.
    Xi,
    /// Prediction head.
    Head,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    pub theta: ParamSet,
    pub xi: ParamSet,
    pub head: ParamSet,
    /// Batch-norm running statistics; not trained.
    pub state: ParamSet,
}

impl Parameters {
    pub fn group(&self, group: Group) -> &ParamSet {
        match group {
            Group::Theta => &self.theta,
            Group::Xi => &self.xi,
            Group::Head => &self.head,
        }
    }

    pub fn group_mut(&mut self, group: Group) -> &mut ParamSet {
        match group {
            Group::Theta => &mut self.theta,
            Group::Xi => &mut self.xi,
            Group::Head => &mut self.head,
        }
    }
}

enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

struct Decl {
    group: Group,
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn decl(group: Group, name: impl Into<String>, shape: &[usize], init: Init) -> Decl {
    Decl {
        group,
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn push_bn(out: &mut Vec<Decl>, state: &mut Vec<(String, usize)>, group: Group, prefix: &str, dim: usize) {
    out.push(decl(group, format!("{prefix}.gamma"), &[dim], Init::Ones));
    out.push(decl(group, format!("{prefix}.beta"), &[dim], Init::Zeros));
    state.push((prefix.to_string(), dim));
}

fn push_linear(out: &mut Vec<Decl>, group: Group, prefix: &str, input: usize, output: usize) {
    out.push(decl(group, format!("{prefix}.weight"), &[input, output], Init::FanIn(input)));
    out.push(decl(group, format!("{prefix}.bias"), &[output], Init::Zeros));
}

/// Declarations for encoder, projector and generator, in initialization
/// order, plus the batch-norm layers that carry running statistics.
fn model_layout(spec: &ModelSpec) -> (Vec<Decl>, Vec<(String, usize)>) {
    let mut out = Vec::new();
    let mut bn = Vec::new();
    let mut cin = spec.num_channels;
    for (i, &cout) in spec.conv_channels.iter().enumerate() {
        let k = spec.conv_kernel;
        out.push(decl(
            Group::Theta,
            format!("encoder.conv{i}.weight"),
            &[k, cin, cout],
            Init::FanIn(k * cin),
        ));
        out.push(decl(Group::Theta, format!("encoder.conv{i}.bias"), &[cout], Init::Zeros));
        push_bn(&mut out, &mut bn, Group::Theta, &format!("encoder.bn{i}"), cout);
        cin = cout;
    }
    push_linear(&mut out, Group::Theta, "projector.fc1", spec.embedding_dim(), spec.proj_hidden);
    push_bn(&mut out, &mut bn, Group::Theta, "projector.bn", spec.proj_hidden);
    push_linear(&mut out, Group::Theta, "projector.fc2", spec.proj_hidden, spec.proj_out);

    push_bn(&mut out, &mut bn, Group::Xi, "generator.input_bn", spec.generator_input_dim());
    let h = spec.gru_hidden;
    let mut input = spec.generator_input_dim();
    for layer in 0..spec.gru_layers {
        for dir in ["fwd", "bwd"] {
            let p = format!("generator.gru{layer}.{dir}");
            out.push(decl(Group::Xi, format!("{p}.w_ih"), &[input, 3 * h], Init::FanIn(h)));
            out.push(decl(Group::Xi, format!("{p}.w_hh"), &[h, 3 * h], Init::FanIn(h)));
            out.push(decl(Group::Xi, format!("{p}.b_ih"), &[3 * h], Init::Zeros));
            out.push(decl(Group::Xi, format!("{p}.b_hh"), &[3 * h], Init::Zeros));
        }
        input = 2 * h;
    }
    let per_group = spec.generator_features() / spec.num_channels;
    out.push(decl(
        Group::Xi,
        "generator.head.weight",
        &[spec.num_channels, per_group],
        Init::FanIn(per_group),
    ));
    out.push(decl(Group::Xi, "generator.head.bias", &[spec.num_channels], Init::Zeros));
    (out, bn)
}

fn materialize(decls: &[Decl], bn: &[(String, usize)], rng: &mut ChaCha8Rng, params: &mut Parameters) {
    for d in decls {
        let value = match d.init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(&d.shape), |_| rng.random_range(-bound..bound))
            }
            Init::Zeros => ArrayD::zeros(IxDyn(&d.shape)),
            Init::Ones => ArrayD::ones(IxDyn(&d.shape)),
        };
        params.group_mut(d.group).insert(d.name.clone(), value);
    }
    for (prefix, dim) in bn {
        params
            .state
            .insert(format!("{prefix}.running_mean"), ArrayD::zeros(IxDyn(&[*dim])));
        params
            .state
            .insert(format!("{prefix}.running_var"), ArrayD::ones(IxDyn(&[*dim])));
    }
}

/// Fresh encoder, projector and generator parameters; a pure function of
/// `(spec, seed)`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Parameters> {
    spec.validate()?;
    let (decls, bn) = model_layout(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::default();
    materialize(&decls, &bn, &mut rng, &mut params);
    Ok(params)
}

pub const HEAD_HIDDEN: usize = 128;

/// Adds (or replaces) a prediction head for `num_classes` outputs.
pub fn init_head(params: &mut Parameters, embedding_dim: usize, num_classes: usize, seed: u64) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::invalid("prediction head needs at least one class"));
    }
    let mut decls = Vec::new();
    let mut bn = Vec::new();
    push_linear(&mut decls, Group::Head, "head.fc1", embedding_dim, HEAD_HIDDEN);
    push_bn(&mut decls, &mut bn, Group::Head, "head.bn", HEAD_HIDDEN);
    push_linear(&mut decls, Group::Head, "head.fc2", HEAD_HIDDEN, num_classes);
    params.head = ParamSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    materialize(&decls, &bn, &mut rng, params);
    Ok(())
}

/// Binds parameters onto a tape for one forward/backward pass.
///
/// Groups listed in `trainable` become gradient-carrying leaves; the others
/// are constants. Batch-norm layers in training mode update the running
/// statistics in `params.state`.
pub struct Session<'a> {
    tape: &'a Tape,
    vars: BTreeMap<String, Var>,
    state: &'a mut ParamSet,
    train: bool,
    rng: &'a mut ChaCha8Rng,
    bn_eps: f64,
    bn_momentum: f64,
}

impl<'a> Session<'a> {
    pub fn new(
        tape: &'a Tape,
        params: &'a mut Parameters,
        trainable: &[Group],
        train: bool,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for group in [Group::Theta, Group::Xi, Group::Head] {
            let grad = trainable.contains(&group);
            for (name, value) in params.group(group).iter() {
                let v = if grad {
                    tape.leaf(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                vars.insert(name.clone(), v);
            }
        }
        Self {
            tape,
            vars,
            state: &mut params.state,
            train,
            rng,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_batch_norm(mut self, eps: f64, momentum: f64) -> Self {
        self.bn_eps = eps;
        self.bn_momentum = momentum;
        self
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    /// Parameter name to tape leaf, for reading gradients after backward.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn linear(&self, x: Var, prefix: &str) -> Result<Var> {
        self.tape.linear(
            x,
            self.param(&format!("{prefix}.weight"))?,
            self.param(&format!("{prefix}.bias"))?,
        )
    }

    /// Batch norm over every axis but the last.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let shape = self.tape.shape(x);
        let c = *shape.last().ok_or_else(|| Error::shape("batch_norm on a scalar"))?;
        let rows = shape.iter().product::<usize>() / c;
        let flat = if shape.len() == 2 {
            x
        } else {
            self.tape.reshape(x, &[rows, c])?
        };
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let out = if self.train {
            let (y, mean, var) = self.tape.batch_norm_train(flat, gamma, beta, self.bn_eps)?;
            let m = self.bn_momentum;
            for (key, batch) in [(&mean_key, mean), (&var_key, var)] {
                let running = self
                    .state
                    .get_mut(key)
                    .ok_or_else(|| Error::invalid(format!("missing state {key}")))?;
                running.zip_mut_with(&batch.into_dyn(), |r, &b| *r = (1.0 - m) * *r + m * b);
            }
            y
        } else {
            let fetch = |key: &str| -> Result<Array1<f64>> {
                self.state
                    .get(key)
                    .ok_or_else(|| Error::invalid(format!("missing state {key}")))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::shape(e.to_string()))
            };
            let (rm, rv) = (fetch(&mean_key)?, fetch(&var_key)?);
            self.tape.batch_norm_eval(flat, gamma, beta, &rm, &rv, self.bn_eps)?
        };
        if shape.len() == 2 {
            Ok(out)
        } else {
            self.tape.reshape(out, &shape)
        }
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x);
        let keep = 1.0 - p;
        let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.tape.mul_mask(x, mask)
    }
}

fn check_finite(tape: &Tape, x: Var, what: &str) -> Result<()> {
    if tape.value(x).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or infinity")))
    }
}

fn expect_shape(tape: &Tape, x: Var, rank: usize, tail: &[usize], what: &str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != rank || shape[rank - tail.len()..] != *tail {
        return Err(Error::shape(format!(
            "{what}: got {shape:?}, expected rank {rank} ending in {tail:?}"
        )));
    }
    Ok(())
}

/// `x: [N, W, C] -> z: [N, D_z]`.
pub fn encoder_forward(sess: &mut Session<'_>, spec: &ModelSpec, x: Var) -> Result<Var> {
    let tape = sess.tape();
    expect_shape(tape, x, 3, &[spec.num_channels], "encoder input")?;
    check_finite(tape, x, "encoder input")?;
    let mut h = x;
    for i in 0..spec.conv_channels.len() {
        h = tape.conv1d_same(
            h,
            sess.param(&format!("encoder.conv{i}.weight"))?,
            sess.param(&format!("encoder.conv{i}.bias"))?,
        )?;
        h = sess.batch_norm(h, &format!("encoder.bn{i}"))?;
        h = tape.relu(h);
        h = tape.max_pool_time(h, spec.pool)?;
        h = sess.dropout(h, spec.dropout)?;
    }
    tape.global_max_time(h)
}

/// `z: [N, D_z] -> y: [N, proj_out]`.
pub fn projector_forward(sess: &mut Session<'_>, spec: &ModelSpec, z: Var) -> Result<Var> {
    let tape = sess.tape();
    expect_shape(tape, z, 2, &[spec.embedding_dim()], "projector input")?;
    check_finite(tape, z, "projector input")?;
    let h = sess.linear(z, "projector.fc1")?;
    let h = sess.batch_norm(h, "projector.bn")?;
    let h = tape.relu(h);
    let y = sess.linear(h, "projector.fc2")?;
    if spec.projector_softmax {
        tape.softmax_rows(y)
    } else {
        Ok(y)
    }
}

/// What the generator is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum GeneratorInput {
    /// Projection `y: [N, proj_out]` (variant E).
    Embedding(Var),
    /// Raw window `x: [N, W, C]` (variant D).
    Raw(Var),
}

fn gru_direction(sess: &Session<'_>, input: Var, prefix: &str, reverse: bool) -> Result<Var> {
    let tape = sess.tape();
    let gates = tape.linear(
        input,
        sess.param(&format!("{prefix}.w_ih"))?,
        sess.param(&format!("{prefix}.b_ih"))?,
    )?;
    tape.gru_recurrence(
        gates,
        sess.param(&format!("{prefix}.w_hh"))?,
        sess.param(&format!("{prefix}.b_hh"))?,
        reverse,
    )
}

/// Produces `x_gen: [N, W, C]`.
pub fn generator_forward(sess: &mut Session<'_>, spec: &ModelSpec, input: GeneratorInput) -> Result<Var> {
    let tape = sess.tape();
    let mut h = match (spec.variant, input) {
        (GeneratorVariant::E, GeneratorInput::Embedding(y)) => {
            expect_shape(tape, y, 2, &[spec.proj_out], "generator (E) input")?;
            let h = sess.batch_norm(y, "generator.input_bn")?;
            let h = tape.relu(h);
            tape.tile_time(h, spec.window_size)?
        }
        (GeneratorVariant::D, GeneratorInput::Raw(x)) => {
            expect_shape(
                tape,
                x,
                3,
                &[spec.window_size, spec.num_channels],
                "generator (D) input",
            )?;
            sess.batch_norm(x, "generator.input_bn")?
        }
        (variant, _) => {
            return Err(Error::shape(format!(
                "generator variant {variant:?} got the other variant's input"
            )))
        }
    };
    for layer in 0..spec.gru_layers {
        let prefix = format!("generator.gru{layer}");
        let fwd = gru_direction(sess, h, &format!("{prefix}.fwd"), false)?;
        let bwd = gru_direction(sess, h, &format!("{prefix}.bwd"), true)?;
        let last = layer + 1 == spec.gru_layers;
        h = if last && spec.bidir_merge == BidirMerge::Sum {
            tape.add(fwd, bwd)?
        } else {
            tape.concat_last(fwd, bwd)?
        };
    }
    tape.grouped_pointwise(
        h,
        sess.param("generator.head.weight")?,
        sess.param("generator.head.bias")?,
    )
}

/// `z: [N, D_z] -> logits: [N, num_classes]`; apply softmax for probabilities.
pub fn head_logits(sess: &mut Session<'_>, z: Var) -> Result<Var> {
    let tape = sess.tape();
    let h = sess.linear(z, "head.fc1")?;
    let h = sess.batch_norm(h, "head.bn")?;
    let h = tape.relu(h);
    sess.linear(h, "head.fc2")
}

/// `z: [N, D_z] -> probs: [N, num_classes]`.
pub fn head_forward(sess: &mut Session<'_>, z: Var) -> Result<Var> {
    let logits = head_logits(sess, z)?;
    sess.tape().softmax_rows(logits)
}

/// Every intermediate of one pass through both Siamese streams.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub z: Var,
    pub y: Var,
    pub x_gen: Var,
    pub z_gen: Var,
    pub y_gen: Var,
}

/// First stream on `x`, generation, second stream on the generated batch.
pub fn autocl_forward(sess: &mut Session<'_>, spec: &ModelSpec, x: Var) -> Result<ForwardTrace> {
    let z = encoder_forward(sess, spec, x)?;
    let y = projector_forward(sess, spec, z)?;
    let input = match spec.variant {
        GeneratorVariant::E => GeneratorInput::Embedding(y),
        GeneratorVariant::D => GeneratorInput::Raw(x),
    };
    let x_gen = generator_forward(sess, spec, input)?;
    let z_gen = encoder_forward(sess, spec, x_gen)?;
    let y_gen = projector_forward(sess, spec, z_gen)?;
    Ok(ForwardTrace {
        z,
        y,
        x_gen,
        z_gen,
        y_gen,
    })
}

/// Model spec and parameters with array-level entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoClModel {
    pub spec: ModelSpec,
    pub params: Parameters,
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.clone().into_dimensionality().expect("rank-2 output")
}

fn to3(t: &Tensor) -> Array3<f64> {
    t.clone().into_dimensionality().expect("rank-3 output")
}

impl AutoClModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_model(&spec, seed)?;
        Ok(Self { spec, params })
    }

    fn session_run<T>(
        &mut self,
        train: bool,
        rng: &mut ChaCha8Rng,
        f: impl FnOnce(&mut Session<'_>, &ModelSpec) -> Result<T>,
    ) -> Result<T> {
        let tape = Tape::new();
        let spec = self.spec.clone();
        let mut sess = Session::new(&tape, &mut self.params, &[], train, rng)
            .with_batch_norm(spec.bn_eps, spec.bn_momentum);
        f(&mut sess, &spec)
    }

    /// Encoder features without gradient bookkeeping.
    pub fn encode(&mut self, x: &Array3<f64>, train: bool, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        self.session_run(train, rng, |sess, spec| {
            let xv = sess.tape().constant(x.clone().into_dyn());
            let z = encoder_forward(sess, spec, xv)?;
            Ok(to2(&sess.tape().value(z)))
        })
    }

    pub fn project(&mut self, z: &Array2<f64>, train: bool, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        self.session_run(train, rng, |sess, spec| {
            let zv = sess.tape().constant(z.clone().into_dyn());
            let y = projector_forward(sess, spec, zv)?;
            Ok(to2(&sess.tape().value(y)))
        })
    }

    /// Generated windows for a batch of raw windows (runs the first stream
    /// for variant E).
    pub fn augment(&mut self, x: &Array3<f64>, train: bool, rng: &mut ChaCha8Rng) -> Result<Array3<f64>> {
        self.session_run(train, rng, |sess, spec| {
            let xv = sess.tape().constant(x.clone().into_dyn());
            let input = match spec.variant {
                GeneratorVariant::E => {
                    let z = encoder_forward(sess, spec, xv)?;
                    GeneratorInput::Embedding(projector_forward(sess, spec, z)?)
                }
                GeneratorVariant::D => GeneratorInput::Raw(xv),
            };
            let g = generator_forward(sess, spec, input)?;
            Ok(to3(&sess.tape().value(g)))
        })
    }

    /// Class probabilities from the prediction head for encoder features.
    pub fn classify(&mut self, z: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        if self.params.head.is_empty() {
            return Err(Error::invalid("model has no prediction head"));
        }
        self.session_run(false, rng, |sess, _| {
            let zv = sess.tape().constant(z.clone().into_dyn());
            let p = head_forward(sess, zv)?;
            Ok(to2(&sess.tape().value(p)))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Axis};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn random_batch(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn encoder_shapes_and_internal_lengths() {
        let spec = ModelSpec::new(128, 9);
        let mut model = AutoClModel::new(spec.clone(), 1).unwrap();
        let x = random_batch((4, 128, 9), 2);
        let tape = Tape::new();
        let mut r = rng();
        let mut sess = Session::new(&tape, &mut model.params, &[], true, &mut r);
        let xv = tape.constant(x.into_dyn());
        let z = encoder_forward(&mut sess, &spec, xv).unwrap();
        assert_eq!(tape.shape(z), vec![4, 128]);
        // 128 -> 64 -> 32 -> 16 after the three pooling stages.
        let pooled: Vec<usize> = (0..3)
            .map(|i| spec.window_size / spec.pool.pow(i + 1))
            .collect();
        assert_eq!(pooled, vec![64, 32, 16]);
    }

    #[test]
    fn eval_mode_is_deterministic_and_finite_on_zero_input() {
        let mut model = AutoClModel::new(ModelSpec::new(32, 3), 4).unwrap();
        let x = random_batch((5, 32, 3), 9);
        let a = model.encode(&x, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.encode(&x, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let zero = Array3::zeros((2, 32, 3));
        let z = model.encode(&zero, false, &mut rng()).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut model = AutoClModel::new(ModelSpec::new(16, 2), 0).unwrap();
        let mut x = Array3::zeros((2, 16, 2));
        x[[1, 3, 0]] = f64::INFINITY;
        assert!(matches!(
            model.encode(&x, false, &mut rng()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn projector_rows_are_probability_vectors() {
        let mut model = AutoClModel::new(ModelSpec::new(16, 2), 0).unwrap();
        let z = random_batch((4, 128, 1), 3).index_axis_move(Axis(2), 0);
        let y = model.project(&z, true, &mut rng()).unwrap();
        assert_eq!(y.dim(), (4, 128));
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let mut spec = ModelSpec::new(16, 2);
        spec.projector_softmax = false;
        let mut raw = AutoClModel::new(spec, 0).unwrap();
        let y = raw.project(&z, true, &mut rng()).unwrap();
        assert!(y.rows().into_iter().any(|r| (r.sum() - 1.0).abs() > 1e-3));
    }

    #[test]
    fn generator_shapes_for_both_variants() {
        let mut spec = ModelSpec::new(128, 6);
        let mut model = AutoClModel::new(spec.clone(), 0).unwrap();
        let x = random_batch((3, 128, 6), 1);
        assert_eq!(model.augment(&x, true, &mut rng()).unwrap().dim(), (3, 128, 6));

        spec.variant = GeneratorVariant::D;
        let mut model = AutoClModel::new(spec, 0).unwrap();
        assert_eq!(model.augment(&x, true, &mut rng()).unwrap().dim(), (3, 128, 6));
    }

    #[test]
    fn generator_rejects_mismatched_input() {
        let spec = ModelSpec::new(16, 2);
        let mut params = init_model(&spec, 0).unwrap();
        let tape = Tape::new();
        let mut r = rng();
        let mut sess = Session::new(&tape, &mut params, &[], true, &mut r);
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 16, 2])));
        assert!(generator_forward(&mut sess, &spec, GeneratorInput::Raw(x)).is_err());
    }

    #[test]
    fn grouped_head_keeps_groups_independent() {
        let spec = ModelSpec::new(8, 3);
        let params = init_model(&spec, 0).unwrap();
        let k = spec.generator_features() / spec.num_channels;
        let run = |input: &Array3<f64>| {
            let tape = Tape::new();
            let xv = tape.constant(input.clone().into_dyn());
            let w = tape.constant(params.xi.get("generator.head.weight").unwrap().clone());
            let b = tape.constant(params.xi.get("generator.head.bias").unwrap().clone());
            to3(&tape.value(tape.grouped_pointwise(xv, w, b).unwrap()))
        };
        let base = random_batch((2, 8, 3 * k), 5);
        let y0 = run(&base);
        for group in 0..3 {
            let mut perturbed = base.clone();
            perturbed
                .slice_mut(s![.., .., group * k..(group + 1) * k])
                .mapv_inplace(|v| v + 0.5);
            let y1 = run(&perturbed);
            for c in 0..3 {
                let changed = (&y1.slice(s![.., .., c]) - &y0.slice(s![.., .., c]))
                    .iter()
                    .any(|d| d.abs() > 1e-12);
                assert_eq!(changed, c == group, "group {group}, channel {c}");
            }
        }
    }

    #[test]
    fn head_outputs() {
        let spec = ModelSpec::new(16, 2);
        let mut model = AutoClModel::new(spec, 0).unwrap();
        init_head(&mut model.params, 128, 6, 1).unwrap();
        let z = random_batch((10, 128, 1), 2).index_axis_move(Axis(2), 0);
        let p = model.classify(&z, &mut rng()).unwrap();
        assert_eq!(p.dim(), (10, 6));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        init_head(&mut model.params, 128, 1, 1).unwrap();
        let p = model.classify(&z, &mut rng()).unwrap();
        assert!(p.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::new(32, 6);
        assert_eq!(init_model(&spec, 3).unwrap(), init_model(&spec, 3).unwrap());
        assert_ne!(
            init_model(&spec, 3).unwrap().theta,
            init_model(&spec, 4).unwrap().theta
        );
        let p = init_model(&spec, 3).unwrap();
        assert_eq!(p.xi.count_prefix("generator.head."), 30);
        assert!(p.theta.get("encoder.conv0.bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(p.theta.get("encoder.bn0.gamma").unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn streams_share_one_leaf_per_parameter() {
        let spec = ModelSpec::new(16, 2);
        let mut params = init_model(&spec, 0).unwrap();
        let tape = Tape::new();
        let mut r = rng();
        let mut sess = Session::new(&tape, &mut params, &[Group::Theta, Group::Xi], true, &mut r);
        let x = tape.constant(random_batch((3, 16, 2), 0).into_dyn());
        let before = tape.len();
        let trace = autocl_forward(&mut sess, &spec, x).unwrap();
        // No parameter leaves are created by the forward pass itself.
        assert!(tape.len() > before);
        let w = sess.param("encoder.conv0.weight").unwrap();
        assert!(w.index() < before);
        let y = tape.mean_all(trace.y_gen);
        let y0 = tape.mean_all(trace.y);
        let total = tape.add(y, y0).unwrap();
        let grads = tape.backward(total);
        assert!(grads.get(w).is_some());
    }
}
