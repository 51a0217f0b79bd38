//! Toy models assembled from adapter layers, random-subnet supernet training,
//! and split evaluation.
//!
//! Two model shapes exist: a GELU MLP, and a single-head mini attention block
//! (qkv, softmax attention, projection, a two-layer MLP) followed by a plain
//! classifier head. Every linear layer is a [`GloraLinear`]. Supernet training
//! samples one random subnet per iteration and updates only the support
//! factors that subnet touches; the frozen base never changes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glora::{
    FactorSlot, GloraLinear, LayerBinding, LayerConfig, LayerSearchSpace, MergedLinear,
    ModelConfig, FACTOR_SLOTS, SUPPORT_ROLES,
};
use crate::optim::{cosine_lr, AdamParams, AdamW};
use crate::synth::{BatchTargets, Dataset, Split};
use crate::tensor::{DenseMatrix, Scalar, Tape, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    MiniAttention,
}

/// Reporting label of a linear layer inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Qkv,
    Projection,
    Fc1,
    Fc2,
    Plain,
}

pub const LAYER_ROLES: [LayerRole; 5] = [
    LayerRole::Qkv,
    LayerRole::Projection,
    LayerRole::Fc1,
    LayerRole::Fc2,
    LayerRole::Plain,
];

impl LayerRole {
    pub fn name(self) -> &'static str {
        match self {
            LayerRole::Qkv => "qkv",
            LayerRole::Projection => "projection",
            LayerRole::Fc1 => "fc1",
            LayerRole::Fc2 => "fc2",
            LayerRole::Plain => "plain",
        }
    }
}

/// Layer shapes and labels implied by a model kind and its dimension list.
///
/// MLP dims are `[d_in, hidden.., d_out]`. Mini-attention dims are
/// `[embed, tokens, outputs]` (single head: the embed dim is trivially
/// divisible by the head count); its sample vectors hold `tokens` stacked
/// embeddings and the classifier reads the re-flattened tokens.
pub fn layer_shapes(kind: ModelKind, dims: &[usize]) -> Result<Vec<(usize, usize, LayerRole)>> {
    if dims.contains(&0) {
        return Err(Error::Config("model dims must be positive".into()));
    }
    match kind {
        ModelKind::Mlp => {
            if dims.len() < 2 {
                return Err(Error::Config(format!(
                    "mlp needs at least [d_in, d_out], got {dims:?}"
                )));
            }
            Ok(dims
                .windows(2)
                .map(|w| (w[1], w[0], LayerRole::Plain))
                .collect())
        }
        ModelKind::MiniAttention => {
            if dims.len() != 3 {
                return Err(Error::Config(format!(
                    "mini-attention needs [embed, tokens, outputs], got {dims:?}"
                )));
            }
            let (d, t, out) = (dims[0], dims[1], dims[2]);
            Ok(vec![
                (3 * d, d, LayerRole::Qkv),
                (d, d, LayerRole::Projection),
                (4 * d, d, LayerRole::Fc1),
                (d, 4 * d, LayerRole::Fc2),
                (out, t * d, LayerRole::Plain),
            ])
        }
    }
}

pub fn model_input_dim(kind: ModelKind, dims: &[usize]) -> usize {
    match kind {
        ModelKind::Mlp => dims[0],
        ModelKind::MiniAttention => dims[0] * dims[1],
    }
}

pub fn model_output_dim(kind: ModelKind, dims: &[usize]) -> usize {
    match kind {
        ModelKind::Mlp => *dims.last().unwrap(),
        ModelKind::MiniAttention => dims[2],
    }
}

/// Ordered adapter layers with the fixed non-linearities between them.
#[derive(Clone, Debug)]
pub struct ToyModel<T> {
    kind: ModelKind,
    dims: Vec<usize>,
    layers: Vec<GloraLinear<T>>,
    labels: Vec<LayerRole>,
}

/// Weight initialization for base weights: centered Gaussian with standard
/// deviation `1/sqrt(d_in)`, zero biases.
pub fn build_model<T: Scalar>(
    kind: ModelKind,
    dims: &[usize],
    r_max: usize,
    seed: u64,
) -> Result<ToyModel<T>> {
    let shapes = layer_shapes(kind, dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(shapes.len());
    let mut labels = Vec::with_capacity(shapes.len());
    for (d_out, d_in, label) in shapes {
        let w0 = DenseMatrix::gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
        let b0 = DenseMatrix::zeros(d_out, 1);
        layers.push(GloraLinear::new(w0, Some(b0), r_max, &mut rng)?);
        labels.push(label);
    }
    Ok(ToyModel {
        kind,
        dims: dims.to_vec(),
        layers,
        labels,
    })
}

impl<T: Scalar> ToyModel<T> {
    /// Reassemble from persisted layers, checking the structure.
    pub fn from_parts(
        kind: ModelKind,
        dims: Vec<usize>,
        layers: Vec<GloraLinear<T>>,
        labels: Vec<LayerRole>,
    ) -> Result<Self> {
        let shapes = layer_shapes(kind, &dims)?;
        if layers.len() != shapes.len() || labels.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} layers for {kind:?} {dims:?}, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((d_out, d_in, label), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.d_out() != *d_out || layer.d_in() != *d_in {
                return Err(Error::Config(format!(
                    "layer {i} is {}x{}, expected {d_out}x{d_in}",
                    layer.d_out(),
                    layer.d_in()
                )));
            }
            if labels[i] != *label {
                return Err(Error::Config(format!("layer {i} label mismatch")));
            }
        }
        Ok(ToyModel {
            kind,
            dims,
            layers,
            labels,
        })
    }

    /// Adapter layers over the plain affine stack of `merged`, with fresh
    /// factor initialization. Used to wrap frozen teachers.
    pub fn from_merged(merged: &MergedModel<T>, r_max: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(merged.layers.len());
        for l in &merged.layers {
            layers.push(GloraLinear::new(
                l.w_uni.clone(),
                l.b_uni.clone(),
                r_max,
                &mut rng,
            )?);
        }
        ToyModel::from_parts(
            merged.kind,
            merged.dims.clone(),
            layers,
            merged.labels.clone(),
        )
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &GloraLinear<T> {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut GloraLinear<T> {
        &mut self.layers[i]
    }

    pub fn layers(&self) -> &[GloraLinear<T>] {
        &self.layers
    }

    pub fn labels(&self) -> &[LayerRole] {
        &self.labels
    }

    pub fn input_dim(&self) -> usize {
        model_input_dim(self.kind, &self.dims)
    }

    pub fn output_dim(&self) -> usize {
        model_output_dim(self.kind, &self.dims)
    }

    fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if config.layers.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "config covers {} layers, model has {}",
                config.layers.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Forward pass without gradient recording.
    pub fn forward_eval(
        &self,
        config: Option<&ModelConfig>,
        x: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>> {
        let mut tape = Tape::new();
        let binding = bind_model(self, &mut tape, config, TrainTarget::Frozen)?;
        let x_id = tape.constant(x.clone());
        let out = forward_model(self, &mut tape, &binding, config, x_id)?;
        Ok(tape.value(out).clone())
    }

    /// Fold a config into plain affine layers; the result has exactly the base
    /// model's shapes.
    pub fn merge(&self, config: &ModelConfig) -> Result<MergedModel<T>> {
        self.check_config(config)?;
        let layers = self
            .layers
            .iter()
            .zip(&config.layers)
            .map(|(layer, cfg)| layer.reparameterize(cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(MergedModel {
            kind: self.kind,
            dims: self.dims.clone(),
            layers,
            labels: self.labels.clone(),
        })
    }

    /// Trainable parameters the config activates, over all layers.
    pub fn trainable_param_count(&self, config: &ModelConfig) -> usize {
        self.layers
            .iter()
            .zip(&config.layers)
            .map(|(layer, cfg)| layer.trainable_param_count(cfg))
            .sum()
    }

    /// Parameters of the frozen base model.
    pub fn base_param_count(&self) -> usize {
        self.layers.iter().map(GloraLinear::base_param_count).sum()
    }

    /// Analytic multiply-add count of the affine maps for a `batch`-sample
    /// input, on the unadapted base path.
    pub fn affine_flops(&self, batch: u64) -> u64 {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.base_affine_flops(self.layer_batch_cols(i, batch)))
            .sum()
    }

    /// Columns layer `i` processes when the model input holds `batch` samples:
    /// inside the attention block every token is a column.
    fn layer_batch_cols(&self, i: usize, batch: u64) -> u64 {
        match self.kind {
            ModelKind::Mlp => batch,
            ModelKind::MiniAttention => {
                if i < 4 {
                    batch * self.dims[1] as u64
                } else {
                    batch
                }
            }
        }
    }
}

/// The re-parameterized model: plain affine layers in the same structure.
#[derive(Clone, Debug)]
pub struct MergedModel<T> {
    pub(crate) kind: ModelKind,
    pub(crate) dims: Vec<usize>,
    pub(crate) layers: Vec<MergedLinear<T>>,
    pub(crate) labels: Vec<LayerRole>,
}

impl<T: Scalar> MergedModel<T> {
    pub fn from_parts(
        kind: ModelKind,
        dims: Vec<usize>,
        layers: Vec<MergedLinear<T>>,
        labels: Vec<LayerRole>,
    ) -> Result<Self> {
        let shapes = layer_shapes(kind, &dims)?;
        if layers.len() != shapes.len() || labels.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} layers for {kind:?} {dims:?}, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((d_out, d_in, _), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.d_out() != *d_out || layer.d_in() != *d_in {
                return Err(Error::Config(format!(
                    "merged layer {i} is {}x{}, expected {d_out}x{d_in}",
                    layer.d_out(),
                    layer.d_in()
                )));
            }
        }
        Ok(MergedModel {
            kind,
            dims,
            layers,
            labels,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[MergedLinear<T>] {
        &self.layers
    }

    pub fn labels(&self) -> &[LayerRole] {
        &self.labels
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        model_input_dim(self.kind, &self.dims)
    }

    pub fn output_dim(&self) -> usize {
        model_output_dim(self.kind, &self.dims)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(MergedLinear::param_count).sum()
    }

    pub fn affine_flops(&self, batch: u64) -> u64 {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let cols = match self.kind {
                    ModelKind::Mlp => batch,
                    ModelKind::MiniAttention if i < 4 => batch * self.dims[1] as u64,
                    ModelKind::MiniAttention => batch,
                };
                l.affine_flops(cols)
            })
            .sum()
    }

    pub fn forward_eval(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut tape = Tape::new();
        let ids: Vec<(ValueId, Option<ValueId>)> = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.constant(l.w_uni.clone()),
                    l.b_uni.as_ref().map(|b| tape.constant(b.clone())),
                )
            })
            .collect();
        let x_id = tape.constant(x.clone());
        let out = forward_structure(
            self.kind,
            &self.dims,
            &mut tape,
            x_id,
            &mut |tape, i, input| {
                let (w, b) = ids[i];
                let y = tape.matmul(w, input)?;
                match b {
                    Some(b) => tape.add_broadcast(y, b),
                    None => Ok(y),
                }
            },
        )?;
        Ok(tape.value(out).clone())
    }
}

/// Per-layer forward callback used by the structure walker.
type LayerForward<'a, T> = dyn FnMut(&mut Tape<T>, usize, ValueId) -> Result<ValueId> + 'a;

/// Walks the fixed structure of a model kind, delegating each linear layer to
/// `layer_fwd`. Shared by the adapter, base, and merged paths.
fn forward_structure<T: Scalar>(
    kind: ModelKind,
    dims: &[usize],
    tape: &mut Tape<T>,
    x: ValueId,
    layer_fwd: &mut LayerForward<'_, T>,
) -> Result<ValueId> {
    match kind {
        ModelKind::Mlp => {
            let n_layers = dims.len() - 1;
            let mut h = x;
            for i in 0..n_layers {
                h = layer_fwd(tape, i, h)?;
                if i + 1 < n_layers {
                    h = tape.gelu(h);
                }
            }
            Ok(h)
        }
        ModelKind::MiniAttention => {
            let (d, t) = (dims[0], dims[1]);
            let tokens = tape.split_tokens(x, t, d)?;
            let qkv = layer_fwd(tape, 0, tokens)?;
            let total_cols = tape.value(qkv).cols();
            let n = total_cols / t;
            let q = tape.slice(qkv, 0, d, 0, total_cols)?;
            let k = tape.slice(qkv, d, d, 0, total_cols)?;
            let v = tape.slice(qkv, 2 * d, d, 0, total_cols)?;

            let inv_sqrt_d = T::of_f64(1.0 / (d as f64).sqrt());
            let mut outputs = Vec::with_capacity(n);
            for sample in 0..n {
                let qs = tape.slice(q, 0, d, sample * t, t)?;
                let ks = tape.slice(k, 0, d, sample * t, t)?;
                let vs = tape.slice(v, 0, d, sample * t, t)?;
                let qs_t = tape.transpose(qs);
                let scores = tape.matmul(qs_t, ks)?;
                let scores = tape.scale(scores, inv_sqrt_d);
                let weights = tape.row_softmax(scores);
                let weights_t = tape.transpose(weights);
                outputs.push(tape.matmul(vs, weights_t)?);
            }
            let attended = tape.concat_cols(&outputs)?;

            let projected = layer_fwd(tape, 1, attended)?;
            let h = layer_fwd(tape, 2, projected)?;
            let h = tape.gelu(h);
            let h = layer_fwd(tape, 3, h)?;
            let flat = tape.merge_tokens(h, t, d)?;
            layer_fwd(tape, 4, flat)
        }
    }
}

/// What a training pass optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TrainTarget {
    /// Nothing: evaluation only.
    Frozen,
    /// The support factors the sampled config activates. The base is frozen.
    SupportFactors,
    /// The base weights and biases themselves (plain pretraining).
    BaseWeights,
}

#[derive(Clone, Copy, Debug)]
enum ParamLoc {
    Factor { layer: usize, slot: FactorSlot },
    BaseWeight { layer: usize },
    BaseBias { layer: usize },
}

impl ParamLoc {
    /// Stable optimizer-state key: ten slots per layer (eight factors, then
    /// the base weight and bias).
    fn key(self) -> usize {
        match self {
            ParamLoc::Factor { layer, slot } => layer * 10 + slot.index(),
            ParamLoc::BaseWeight { layer } => layer * 10 + 8,
            ParamLoc::BaseBias { layer } => layer * 10 + 9,
        }
    }
}

struct ModelBinding {
    layers: Vec<LayerBinding>,
    trainables: Vec<(ParamLoc, ValueId)>,
}

fn bind_model<T: Scalar>(
    model: &ToyModel<T>,
    tape: &mut Tape<T>,
    config: Option<&ModelConfig>,
    target: TrainTarget,
) -> Result<ModelBinding> {
    if let Some(cfg) = config {
        model.check_config(cfg)?;
    }
    let mut layers = Vec::with_capacity(model.n_layers());
    let mut trainables = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let binding = match (target, config) {
            (TrainTarget::BaseWeights, None) => {
                let b = layer.bind_base_trainable(tape);
                trainables.push((ParamLoc::BaseWeight { layer: i }, b.w0));
                if let Some(b0) = b.b0 {
                    trainables.push((ParamLoc::BaseBias { layer: i }, b0));
                }
                b
            }
            (TrainTarget::BaseWeights, Some(_)) => {
                return Err(Error::Contract(
                    "base-weight training runs on the plain path, not an adapter config".into(),
                ))
            }
            (_, None) => layer.bind_base(tape),
            (target, Some(cfg)) => {
                let trainable = target == TrainTarget::SupportFactors;
                let b = layer.bind_on_tape(tape, &cfg.layers[i], trainable)?;
                if trainable {
                    for slot in FACTOR_SLOTS {
                        if let Some(id) = b.factor_id(slot) {
                            trainables.push((ParamLoc::Factor { layer: i, slot }, id));
                        }
                    }
                }
                b
            }
        };
        layers.push(binding);
    }
    Ok(ModelBinding { layers, trainables })
}

fn forward_model<T: Scalar>(
    model: &ToyModel<T>,
    tape: &mut Tape<T>,
    binding: &ModelBinding,
    config: Option<&ModelConfig>,
    x: ValueId,
) -> Result<ValueId> {
    forward_structure(model.kind, &model.dims, tape, x, &mut |tape, i, input| {
        model.layers[i].forward_bound(
            tape,
            &binding.layers[i],
            config.map(|c| &c.layers[i]),
            input,
        )
    })
}

/// Fresh support factors at a new rank cap over an existing frozen base; the
/// base weights and biases carry over bitwise.
pub fn reinit_supernet_factors<T: Scalar>(
    base: &ToyModel<T>,
    r_max: usize,
    seed: u64,
) -> Result<ToyModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = base
        .layers()
        .iter()
        .map(|l| GloraLinear::new(l.w0().clone(), l.b0().cloned(), r_max, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    ToyModel::from_parts(
        base.kind(),
        base.dims().to_vec(),
        layers,
        base.labels().to_vec(),
    )
}

/// Draw one admissible kind per (layer, role), uniformly over each option
/// list. Low-rank options appear once per rank, so ranks are drawn with the
/// same weight as the other kinds. The result always validates.
pub fn sample_subnet(spaces: &[LayerSearchSpace], rng: &mut impl Rng) -> ModelConfig {
    let layers = spaces
        .iter()
        .map(|space| {
            let mut cfg = LayerConfig::all_none();
            for &role in &SUPPORT_ROLES {
                let options = space.options(role);
                cfg.set(role, options[rng.random_range(0..options.len())]);
            }
            cfg
        })
        .collect();
    ModelConfig { layers }
}

/// Epochs, batch size, peak learning rate, weight decay, seed. The cosine
/// schedule reaches zero exactly at the final step, with no warmup.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 500,
            batch_size: 64,
            peak_lr: 5e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Per-epoch mean training loss, sample-weighted.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub iterations: usize,
}

/// Train the multi-path supernet: per iteration, sample a random subnet and
/// take one optimizer step on exactly the factors it activates. `W0`/`b0`
/// stay bitwise untouched.
pub fn train_supernet<T: Scalar>(
    model: &mut ToyModel<T>,
    spaces: &[LayerSearchSpace],
    data: &Dataset<T>,
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    if spaces.len() != model.n_layers() {
        return Err(Error::Config(format!(
            "{} search spaces for {} layers",
            spaces.len(),
            model.n_layers()
        )));
    }
    for (i, (space, layer)) in spaces.iter().zip(model.layers()).enumerate() {
        let max_rank = space.max_rank();
        if max_rank > 0 && max_rank != layer.r_max() {
            return Err(Error::Config(format!(
                "layer {i}: search space max rank {max_rank} != layer r_max {}",
                layer.r_max()
            )));
        }
    }
    train_impl(
        model,
        Some(spaces),
        data,
        schedule,
        TrainTarget::SupportFactors,
    )
}

/// Train the plain model itself (weights and biases, no adapters); this is
/// what produces the frozen base the fine-tuning stage adapts.
pub fn train_base<T: Scalar>(
    model: &mut ToyModel<T>,
    data: &Dataset<T>,
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    train_impl(model, None, data, schedule, TrainTarget::BaseWeights)
}

fn train_impl<T: Scalar>(
    model: &mut ToyModel<T>,
    spaces: Option<&[LayerSearchSpace]>,
    data: &Dataset<T>,
    schedule: &TrainSchedule,
    target: TrainTarget,
) -> Result<TrainLog> {
    if data.feature_dim() != model.input_dim() {
        return Err(Error::Config(format!(
            "dataset features have dim {}, model expects {}",
            data.feature_dim(),
            model.input_dim()
        )));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let train_idx = data.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Contract("dataset has no training split".into()));
    }
    let mut log = TrainLog::default();
    if schedule.epochs == 0 {
        return Ok(log);
    }

    let iters_per_epoch = train_idx.len().div_ceil(schedule.batch_size);
    let total_steps = schedule.epochs * iters_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut opt = AdamW::<T>::new(
        model.n_layers() * 10,
        AdamParams::with_weight_decay(schedule.weight_decay),
    );
    let mut step = 0usize;

    for _epoch in 0..schedule.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;

        for chunk in order.chunks(schedule.batch_size) {
            let (x, targets) = data.batch(chunk)?;
            let config = spaces.map(|s| sample_subnet(s, &mut rng));

            let mut tape = Tape::new();
            let binding = bind_model(model, &mut tape, config.as_ref(), target)?;
            let x_id = tape.constant(x);
            let out = forward_model(model, &mut tape, &binding, config.as_ref(), x_id)?;
            let loss_id = match &targets {
                BatchTargets::Regression(t) => {
                    let t_id = tape.constant(t.clone());
                    tape.mse(out, t_id)?
                }
                BatchTargets::Classification(labels) => tape.softmax_cross_entropy(out, labels)?,
            };
            let loss = tape.value(loss_id).get(0, 0).as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: step });
            }
            let grads = tape.backward(loss_id)?;
            let lr = cosine_lr(step, total_steps, schedule.peak_lr)?;

            for &(loc, id) in &binding.trainables {
                let Some(grad) = grads.get(id) else { continue };
                match loc {
                    ParamLoc::Factor { layer, slot } => {
                        opt.update(loc.key(), model.layers[layer].factor_mut(slot), grad, lr)?;
                    }
                    ParamLoc::BaseWeight { layer } => {
                        opt.update(loc.key(), model.layers[layer].w0_mut(), grad, lr)?;
                    }
                    ParamLoc::BaseBias { layer } => {
                        let b0 = model.layers[layer]
                            .b0_mut()
                            .expect("bound bias exists on the layer");
                        opt.update(loc.key(), b0, grad, lr)?;
                    }
                }
            }
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / train_idx.len() as f64);
    }
    log.iterations = step;
    Ok(log)
}

/// Loss (and accuracy, for classification) over one split, evaluated as a
/// single deterministic batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub count: usize,
}

fn metrics_of_output<T: Scalar>(
    out: &DenseMatrix<T>,
    targets: &BatchTargets<T>,
) -> Result<SplitMetrics> {
    match targets {
        BatchTargets::Regression(t) => Ok(SplitMetrics {
            loss: crate::tensor::mse(out, t)?.as_f64(),
            accuracy: None,
            count: t.cols(),
        }),
        BatchTargets::Classification(labels) => {
            let loss = crate::tensor::softmax_cross_entropy(out, labels)?.as_f64();
            let mut correct = 0usize;
            for (j, &label) in labels.iter().enumerate() {
                let mut best = 0usize;
                for i in 1..out.rows() {
                    if out.get(i, j) > out.get(best, j) {
                        best = i;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
            Ok(SplitMetrics {
                loss,
                accuracy: Some(correct as f64 / labels.len() as f64),
                count: labels.len(),
            })
        }
    }
}

/// Evaluate a model (base path, or adapter path under `config`) on a split.
pub fn evaluate_model<T: Scalar>(
    model: &ToyModel<T>,
    config: Option<&ModelConfig>,
    data: &Dataset<T>,
    split: Split,
) -> Result<SplitMetrics> {
    let idx = data.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!("dataset has no {split:?} split")));
    }
    let (x, targets) = data.batch(&idx)?;
    let out = model.forward_eval(config, &x)?;
    metrics_of_output(&out, &targets)
}

/// Evaluate a merged model on a split.
pub fn evaluate_merged<T: Scalar>(
    model: &MergedModel<T>,
    data: &Dataset<T>,
    split: Split,
) -> Result<SplitMetrics> {
    let idx = data.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!("dataset has no {split:?} split")));
    }
    let (x, targets) = data.batch(&idx)?;
    let out = model.forward_eval(&x)?;
    metrics_of_output(&out, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glora::SupportKind;
    use crate::synth::{gen_pretrain_task, TaskKind, TaskSpec, TeacherKind};

    fn snapshot_base<T: Scalar>(model: &ToyModel<T>) -> Vec<DenseMatrix<T>> {
        let mut out = Vec::new();
        for l in model.layers() {
            out.push(l.w0().clone());
            if let Some(b) = l.b0() {
                out.push(b.clone());
            }
        }
        out
    }

    #[test]
    fn mlp_build_matches_dims() {
        let model = build_model::<f64>(ModelKind::Mlp, &[4, 8, 3], 2, 7).unwrap();
        assert_eq!(model.n_layers(), 2);
        assert_eq!(model.layer(0).d_out(), 8);
        assert_eq!(model.layer(0).d_in(), 4);
        assert_eq!(model.layer(1).d_out(), 3);
        assert_eq!(model.layer(1).d_in(), 8);
        assert_eq!(model.labels(), &[LayerRole::Plain, LayerRole::Plain]);
    }

    #[test]
    fn mini_attention_build_matches_spec_shapes() {
        let model = build_model::<f64>(ModelKind::MiniAttention, &[8, 2, 3], 2, 7).unwrap();
        let shapes: Vec<(usize, usize)> = model
            .layers()
            .iter()
            .map(|l| (l.d_out(), l.d_in()))
            .collect();
        assert_eq!(shapes, vec![(24, 8), (8, 8), (32, 8), (8, 32), (3, 16)]);
        assert_eq!(
            model.labels(),
            &[
                LayerRole::Qkv,
                LayerRole::Projection,
                LayerRole::Fc1,
                LayerRole::Fc2,
                LayerRole::Plain
            ]
        );
        assert_eq!(model.input_dim(), 16);
        assert_eq!(model.output_dim(), 3);
    }

    #[test]
    fn same_seed_builds_identical_tensors() {
        let a = build_model::<f64>(ModelKind::Mlp, &[4, 8, 3], 2, 42).unwrap();
        let b = build_model::<f64>(ModelKind::Mlp, &[4, 8, 3], 2, 42).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert!(la.w0().bits_eq(lb.w0()));
            for slot in FACTOR_SLOTS {
                assert!(la.factor(slot).bits_eq(lb.factor(slot)));
            }
        }
    }

    #[test]
    fn sample_subnet_singleton_space_is_all_none() {
        let space = LayerSearchSpace::new(
            vec![SupportKind::None],
            vec![SupportKind::None],
            vec![SupportKind::None],
            vec![SupportKind::None],
            vec![SupportKind::None],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = sample_subnet(&[space.clone(), space], &mut rng);
        assert!(cfg.layers.iter().all(LayerConfig::is_identity));
    }

    #[test]
    fn sample_subnet_frequencies_are_uniform() {
        let space = LayerSearchSpace::full(&[2]).unwrap();
        let spaces = [space.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000usize;
        let mut counts: std::collections::HashMap<(usize, String), usize> =
            std::collections::HashMap::new();
        for _ in 0..draws {
            let cfg = sample_subnet(&spaces, &mut rng);
            for (ri, &role) in SUPPORT_ROLES.iter().enumerate() {
                *counts
                    .entry((ri, cfg.layers[0].get(role).to_string()))
                    .or_default() += 1;
            }
        }
        for (ri, &role) in SUPPORT_ROLES.iter().enumerate() {
            let m = space.option_count(role) as f64;
            let p = 1.0 / m;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            for kind in space.options(role) {
                let got = counts.get(&(ri, kind.to_string())).copied().unwrap_or(0) as f64;
                let expect = draws as f64 * p;
                assert!(
                    (got - expect).abs() <= 5.0 * sd,
                    "role {role} kind {kind}: {got} vs {expect} (sd {sd})"
                );
            }
        }
    }

    #[test]
    fn sample_subnet_two_option_rate() {
        let space = LayerSearchSpace::new(
            vec![SupportKind::Lora { rank: 2 }, SupportKind::None],
            vec![SupportKind::None],
            vec![SupportKind::None],
            vec![SupportKind::None],
            vec![SupportKind::None],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut hits = 0usize;
        let draws = 10_000usize;
        for _ in 0..draws {
            let cfg = sample_subnet(std::slice::from_ref(&space), &mut rng);
            if cfg.layers[0].weight_scale == (SupportKind::Lora { rank: 2 }) {
                hits += 1;
            }
        }
        let rate = hits as f64 / draws as f64;
        assert!((rate - 0.5).abs() <= 0.05, "rate {rate}");
    }

    #[test]
    fn full_space_coverage_over_training_scale_sampling() {
        // A 432-option layer sampled as often as a short training run: every
        // option combination appears.
        let space = LayerSearchSpace::full(&[8]).unwrap();
        let spaces = [space.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..25_000 {
            let cfg = sample_subnet(&spaces, &mut rng);
            seen.insert(cfg.layers[0]);
        }
        assert_eq!(seen.len(), 432);
    }

    fn tiny_task(seed: u64) -> Dataset<f64> {
        let spec = TaskSpec {
            d_in: 4,
            d_out: 2,
            n: 120,
            teacher: TeacherKind::Linear,
            task: TaskKind::Regression,
            n_classes: 0,
            hidden: 8,
            noise_std: 0.01,
        };
        gen_pretrain_task::<f64>(&spec, seed).unwrap().0
    }

    #[test]
    fn zero_epochs_leaves_model_bitwise_unchanged() {
        let data = tiny_task(1);
        let mut model = build_model::<f64>(ModelKind::Mlp, &[4, 2], 2, 3).unwrap();
        let spaces = vec![LayerSearchSpace::full(&[2]).unwrap()];
        let before = snapshot_base(&model);
        let factors_before: Vec<_> = FACTOR_SLOTS
            .iter()
            .map(|&s| model.layer(0).factor(s).clone())
            .collect();
        let schedule = TrainSchedule {
            epochs: 0,
            ..TrainSchedule::default()
        };
        let log = train_supernet(&mut model, &spaces, &data, &schedule).unwrap();
        assert!(log.epoch_losses.is_empty());
        for (a, b) in snapshot_base(&model).iter().zip(&before) {
            assert!(a.bits_eq(b));
        }
        for (slot, before) in FACTOR_SLOTS.iter().zip(&factors_before) {
            assert!(
                model.layer(0).factor(*slot).bits_eq(before),
                "{}",
                slot.name()
            );
        }
    }

    #[test]
    fn supernet_training_freezes_base_and_decreases_loss() {
        // Training-progress oracle on a linearly solvable task: the mean
        // epoch loss at epoch 100 beats epoch 1 for a majority of 5 seeds,
        // and the base never moves under any of them.
        let mut wins = 0;
        for seed in 0..5u64 {
            let data = tiny_task(2 + seed);
            let mut model = build_model::<f64>(ModelKind::Mlp, &[4, 2], 2, 3 + seed).unwrap();
            let spaces = vec![LayerSearchSpace::full(&[2]).unwrap()];
            let before = snapshot_base(&model);
            let schedule = TrainSchedule {
                epochs: 100,
                batch_size: 16,
                peak_lr: 1e-2,
                weight_decay: 0.01,
                seed: 5 + seed,
            };
            let log = train_supernet(&mut model, &spaces, &data, &schedule).unwrap();
            for (a, b) in snapshot_base(&model).iter().zip(&before) {
                assert!(a.bits_eq(b), "frozen base changed during supernet training");
            }
            if log.epoch_losses[99] < log.epoch_losses[0] {
                wins += 1;
            }
        }
        assert!(wins >= 3, "loss improved for only {wins}/5 seeds");
    }

    #[test]
    fn supernet_training_is_deterministic() {
        let data = tiny_task(3);
        let spaces = vec![LayerSearchSpace::full(&[2]).unwrap()];
        let schedule = TrainSchedule {
            epochs: 5,
            batch_size: 16,
            peak_lr: 1e-2,
            weight_decay: 0.01,
            seed: 7,
        };
        let run = || {
            let mut model = build_model::<f64>(ModelKind::Mlp, &[4, 2], 2, 3).unwrap();
            train_supernet(&mut model, &spaces, &data, &schedule).unwrap();
            model
        };
        let a = run();
        let b = run();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            for slot in FACTOR_SLOTS {
                assert!(la.factor(slot).bits_eq(lb.factor(slot)));
            }
        }
    }

    #[test]
    fn base_training_fits_linear_task() {
        // Mean epoch loss must drop by a wide margin on a linearly solvable
        // task, across seeds.
        let mut wins = 0;
        for seed in 0..5u64 {
            let data = tiny_task(100 + seed);
            let mut model = build_model::<f64>(ModelKind::Mlp, &[4, 2], 2, seed).unwrap();
            let schedule = TrainSchedule {
                epochs: 100,
                batch_size: 32,
                peak_lr: 2e-2,
                weight_decay: 0.0,
                seed,
            };
            let log = train_base(&mut model, &data, &schedule).unwrap();
            if log.epoch_losses[99] < log.epoch_losses[0] {
                wins += 1;
            }
        }
        assert!(wins >= 3, "only {wins}/5 seeds improved");
    }

    #[test]
    fn attention_model_trains_and_merges() {
        let spec = TaskSpec {
            d_in: 8, // 4 embed dims * 2 tokens
            d_out: 2,
            n: 100,
            teacher: TeacherKind::Linear,
            task: TaskKind::Regression,
            n_classes: 0,
            hidden: 8,
            noise_std: 0.01,
        };
        let data = gen_pretrain_task::<f64>(&spec, 4).unwrap().0;
        let mut model = build_model::<f64>(ModelKind::MiniAttention, &[4, 2, 2], 2, 9).unwrap();
        let spaces: Vec<_> = (0..model.n_layers())
            .map(|_| LayerSearchSpace::full(&[2]).unwrap())
            .collect();
        let schedule = TrainSchedule {
            epochs: 3,
            batch_size: 25,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            seed: 1,
        };
        train_supernet(&mut model, &spaces, &data, &schedule).unwrap();

        // Merge equivalence at model level, on a sampled config.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = sample_subnet(&spaces, &mut rng);
        let x = DenseMatrix::gaussian(8, 10, 1.0, &mut rng);
        let adapter = model.forward_eval(Some(&cfg), &x).unwrap();
        let merged = model.merge(&cfg).unwrap().forward_eval(&x).unwrap();
        assert!(adapter.max_abs_diff(&merged) <= 1e-10);

        // Zero structural overhead.
        let merged_model = model.merge(&cfg).unwrap();
        assert_eq!(merged_model.param_count(), model.base_param_count());
        assert_eq!(merged_model.affine_flops(16), model.affine_flops(16));
    }

    #[test]
    fn subnets_at_init_match_base_when_only_lora_active() {
        let model = build_model::<f64>(ModelKind::Mlp, &[4, 6, 2], 3, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = DenseMatrix::gaussian(4, 9, 1.0, &mut rng);
        let base = model.forward_eval(None, &x).unwrap();

        // Low-rank deltas start at zero, so lora-only subnets compute the base
        // function exactly.
        let mut cfg = ModelConfig::all_none(2);
        cfg.layers[0].weight_scale = SupportKind::Lora { rank: 2 };
        cfg.layers[1].weight_shift = SupportKind::Lora { rank: 3 };
        cfg.layers[1].prompt = SupportKind::Lora { rank: 1 };
        let adapted = model.forward_eval(Some(&cfg), &x).unwrap();
        assert!(adapted.bits_eq(&base));

        // Vector/scalar kinds perturb by the O(0.02) down-factor init.
        let mut cfg = ModelConfig::all_none(2);
        cfg.layers[0].weight_scale = SupportKind::Vector;
        let adapted = model.forward_eval(Some(&cfg), &x).unwrap();
        let diff = adapted.max_abs_diff(&base);
        assert!(diff > 0.0 && diff < 0.5, "init perturbation {diff}");
    }
}
