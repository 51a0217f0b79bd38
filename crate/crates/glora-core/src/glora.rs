//! The generalized-adapter linear layer: a frozen affine base plus five
//! trainable support tensors (weight scale, weight shift, input prompt, bias
//! scale, bias shift), each taking low-rank, vector, scalar, or none form.
//!
//! Lower-rank, vector, and scalar forms are indexed as leading slices of one
//! stored factor pair per role, so every sampled configuration shares weights.
//! After training, [`GloraLinear::reparameterize`] folds the active supports
//! into a plain affine layer with the exact shape and cost of the base layer.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Scalar, Tape, ValueId};

/// Structural form a support tensor takes in a subnet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SupportKind {
    None,
    Scalar,
    Vector,
    Lora { rank: usize },
}

impl fmt::Display for SupportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SupportKind::None => write!(f, "none"),
            SupportKind::Scalar => write!(f, "scalar"),
            SupportKind::Vector => write!(f, "vector"),
            SupportKind::Lora { rank } => write!(f, "lora({rank})"),
        }
    }
}

/// The five per-layer support-tensor roles and what each one modulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportRole {
    /// Multiplies the frozen weight elementwise.
    WeightScale,
    /// Adds to the frozen weight.
    WeightShift,
    /// Input-space offset folded into the bias through the frozen weight.
    Prompt,
    /// Multiplies the frozen bias elementwise.
    BiasScale,
    /// Adds to the bias.
    BiasShift,
}

pub const SUPPORT_ROLES: [SupportRole; 5] = [
    SupportRole::WeightScale,
    SupportRole::WeightShift,
    SupportRole::Prompt,
    SupportRole::BiasScale,
    SupportRole::BiasShift,
];

impl SupportRole {
    pub fn name(self) -> &'static str {
        match self {
            SupportRole::WeightScale => "weight_scale",
            SupportRole::WeightShift => "weight_shift",
            SupportRole::Prompt => "prompt",
            SupportRole::BiasScale => "bias_scale",
            SupportRole::BiasShift => "bias_shift",
        }
    }

    /// Which kinds a role admits: weight roles take any form, the prompt has
    /// no scalar form, and the bias roles have no low-rank form.
    pub fn admits(self, kind: SupportKind) -> bool {
        match self {
            SupportRole::WeightScale | SupportRole::WeightShift => true,
            SupportRole::Prompt => !matches!(kind, SupportKind::Scalar),
            SupportRole::BiasScale | SupportRole::BiasShift => {
                !matches!(kind, SupportKind::Lora { .. })
            }
        }
    }
}

impl fmt::Display for SupportRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Per-layer choice of support-tensor kinds: the genome of the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub weight_scale: SupportKind,
    pub weight_shift: SupportKind,
    pub prompt: SupportKind,
    pub bias_scale: SupportKind,
    pub bias_shift: SupportKind,
}

impl LayerConfig {
    pub fn all_none() -> Self {
        LayerConfig {
            weight_scale: SupportKind::None,
            weight_shift: SupportKind::None,
            prompt: SupportKind::None,
            bias_scale: SupportKind::None,
            bias_shift: SupportKind::None,
        }
    }

    pub fn get(&self, role: SupportRole) -> SupportKind {
        match role {
            SupportRole::WeightScale => self.weight_scale,
            SupportRole::WeightShift => self.weight_shift,
            SupportRole::Prompt => self.prompt,
            SupportRole::BiasScale => self.bias_scale,
            SupportRole::BiasShift => self.bias_shift,
        }
    }

    pub fn set(&mut self, role: SupportRole, kind: SupportKind) {
        match role {
            SupportRole::WeightScale => self.weight_scale = kind,
            SupportRole::WeightShift => self.weight_shift = kind,
            SupportRole::Prompt => self.prompt = kind,
            SupportRole::BiasScale => self.bias_scale = kind,
            SupportRole::BiasShift => self.bias_shift = kind,
        }
    }

    pub fn is_identity(&self) -> bool {
        SUPPORT_ROLES
            .iter()
            .all(|&r| self.get(r) == SupportKind::None)
    }
}

/// One [`LayerConfig`] per adapted layer, in model layer order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    pub fn all_none(n_layers: usize) -> Self {
        ModelConfig {
            layers: vec![LayerConfig::all_none(); n_layers],
        }
    }
}

/// A single admissibility failure found while validating a config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigViolation {
    pub role: SupportRole,
    pub kind: SupportKind,
    pub reason: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}: {}", self.role, self.kind, self.reason)
    }
}

/// Allowed kinds per role, with low-rank options listed once per admissible
/// rank. Option order is fixed; genomes index into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSearchSpace {
    weight_scale: Vec<SupportKind>,
    weight_shift: Vec<SupportKind>,
    prompt: Vec<SupportKind>,
    bias_scale: Vec<SupportKind>,
    bias_shift: Vec<SupportKind>,
}

impl LayerSearchSpace {
    /// The complete space: weight roles over every kind, the prompt without
    /// scalar, the bias roles without low-rank. One low-rank option per rank
    /// in `ranks`.
    pub fn full(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Config(
                "full search space needs at least one rank".into(),
            ));
        }
        let loras: Vec<SupportKind> = ranks
            .iter()
            .map(|&r| SupportKind::Lora { rank: r })
            .collect();
        let with = |tail: &[SupportKind]| {
            let mut v = loras.clone();
            v.extend_from_slice(tail);
            v
        };
        Self::new(
            with(&[SupportKind::Vector, SupportKind::Scalar, SupportKind::None]),
            with(&[SupportKind::Vector, SupportKind::Scalar, SupportKind::None]),
            with(&[SupportKind::Vector, SupportKind::None]),
            vec![SupportKind::Vector, SupportKind::Scalar, SupportKind::None],
            vec![SupportKind::Vector, SupportKind::Scalar, SupportKind::None],
        )
    }

    pub fn new(
        weight_scale: Vec<SupportKind>,
        weight_shift: Vec<SupportKind>,
        prompt: Vec<SupportKind>,
        bias_scale: Vec<SupportKind>,
        bias_shift: Vec<SupportKind>,
    ) -> Result<Self> {
        let space = LayerSearchSpace {
            weight_scale,
            weight_shift,
            prompt,
            bias_scale,
            bias_shift,
        };
        for &role in &SUPPORT_ROLES {
            let options = space.options(role);
            if options.is_empty() {
                return Err(Error::Config(format!("role {role} has no options")));
            }
            for (i, &kind) in options.iter().enumerate() {
                if !role.admits(kind) {
                    return Err(Error::Config(format!("role {role} does not admit {kind}")));
                }
                if let SupportKind::Lora { rank } = kind {
                    if rank == 0 {
                        return Err(Error::Config(format!("role {role}: rank must be positive")));
                    }
                }
                if options[..i].contains(&kind) {
                    return Err(Error::Config(format!(
                        "role {role}: duplicate option {kind}"
                    )));
                }
            }
        }
        Ok(space)
    }

    pub fn options(&self, role: SupportRole) -> &[SupportKind] {
        match role {
            SupportRole::WeightScale => &self.weight_scale,
            SupportRole::WeightShift => &self.weight_shift,
            SupportRole::Prompt => &self.prompt,
            SupportRole::BiasScale => &self.bias_scale,
            SupportRole::BiasShift => &self.bias_shift,
        }
    }

    pub fn option_count(&self, role: SupportRole) -> usize {
        self.options(role).len()
    }

    /// Number of distinct configs this layer admits.
    pub fn total_options(&self) -> u64 {
        SUPPORT_ROLES
            .iter()
            .map(|&r| self.option_count(r) as u64)
            .product()
    }

    /// Largest low-rank rank anywhere in the space; zero if none is allowed.
    pub fn max_rank(&self) -> usize {
        SUPPORT_ROLES
            .iter()
            .flat_map(|&r| self.options(r))
            .filter_map(|k| match k {
                SupportKind::Lora { rank } => Some(*rank),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Role-tag admissibility plus membership of each kind (and rank) in this
    /// space. Returns the violations; an empty list means the config is valid.
    pub fn validate(&self, config: &LayerConfig) -> Vec<ConfigViolation> {
        let mut violations = Vec::new();
        for &role in &SUPPORT_ROLES {
            let kind = config.get(role);
            if !role.admits(kind) {
                violations.push(ConfigViolation {
                    role,
                    kind,
                    reason: format!("role {role} does not admit this kind"),
                });
            } else if !self.options(role).contains(&kind) {
                violations.push(ConfigViolation {
                    role,
                    kind,
                    reason: "kind (or rank) is outside this layer's search space".into(),
                });
            }
        }
        violations
    }

    /// Every admissible config, in option order (last role varies fastest).
    pub fn enumerate_configs(&self) -> Vec<LayerConfig> {
        let mut out = vec![LayerConfig::all_none()];
        for &role in &SUPPORT_ROLES {
            let mut next = Vec::with_capacity(out.len() * self.option_count(role));
            for cfg in &out {
                for &kind in self.options(role) {
                    let mut c = *cfg;
                    c.set(role, kind);
                    next.push(c);
                }
            }
            out = next;
        }
        out
    }
}

/// Checks a model-wide config against per-layer spaces; returns human-readable
/// problems, empty when valid.
pub fn validate_model_config(spaces: &[LayerSearchSpace], config: &ModelConfig) -> Vec<String> {
    let mut problems = Vec::new();
    if config.layers.len() != spaces.len() {
        problems.push(format!(
            "config has {} layers, model has {}",
            config.layers.len(),
            spaces.len()
        ));
        return problems;
    }
    for (i, (space, layer_cfg)) in spaces.iter().zip(config.layers.iter()).enumerate() {
        for v in space.validate(layer_cfg) {
            problems.push(format!("layer {i}: {v}"));
        }
    }
    problems
}

/// Storage slot of one trainable factor inside a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorSlot {
    ScaleDown,
    ScaleUp,
    ShiftDown,
    ShiftUp,
    PromptDown,
    PromptUp,
    BiasScale,
    BiasShift,
}

pub const FACTOR_SLOTS: [FactorSlot; 8] = [
    FactorSlot::ScaleDown,
    FactorSlot::ScaleUp,
    FactorSlot::ShiftDown,
    FactorSlot::ShiftUp,
    FactorSlot::PromptDown,
    FactorSlot::PromptUp,
    FactorSlot::BiasScale,
    FactorSlot::BiasShift,
];

impl FactorSlot {
    pub fn index(self) -> usize {
        FACTOR_SLOTS.iter().position(|&s| s == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            FactorSlot::ScaleDown => "scale_down",
            FactorSlot::ScaleUp => "scale_up",
            FactorSlot::ShiftDown => "shift_down",
            FactorSlot::ShiftUp => "shift_up",
            FactorSlot::PromptDown => "prompt_down",
            FactorSlot::PromptUp => "prompt_up",
            FactorSlot::BiasScale => "bias_scale",
            FactorSlot::BiasShift => "bias_shift",
        }
    }
}

/// Tape handles for one layer's leaves: the frozen base plus whichever factors
/// the active config touches.
#[derive(Clone, Debug)]
pub struct LayerBinding {
    pub w0: ValueId,
    pub b0: Option<ValueId>,
    factors: [Option<ValueId>; 8],
}

impl LayerBinding {
    pub fn factor_id(&self, slot: FactorSlot) -> Option<ValueId> {
        self.factors[slot.index()]
    }
}

/// A frozen affine layer with rank-capped trainable support factors.
///
/// The base weight and bias never change after construction; training touches
/// only the eight factor tensors.
#[derive(Clone, Debug)]
pub struct GloraLinear<T> {
    w0: DenseMatrix<T>,
    b0: Option<DenseMatrix<T>>,
    r_max: usize,
    factors: [DenseMatrix<T>; 8],
}

impl<T: Scalar> GloraLinear<T> {
    /// Factor initialization: down factors are Gaussian with standard
    /// deviation 0.02, up factors and bias vectors start at zero, so low-rank
    /// and none kinds start as exact zero deltas.
    pub fn new(
        w0: DenseMatrix<T>,
        b0: Option<DenseMatrix<T>>,
        r_max: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        if r_max == 0 {
            return Err(Error::Config("r_max must be positive".into()));
        }
        let scale_down = DenseMatrix::gaussian(d_out, r_max, 0.02, rng);
        let shift_down = DenseMatrix::gaussian(d_out, r_max, 0.02, rng);
        let prompt_down = DenseMatrix::gaussian(d_in, r_max, 0.02, rng);
        let factors = [
            scale_down,
            DenseMatrix::zeros(r_max, d_in),
            shift_down,
            DenseMatrix::zeros(r_max, d_in),
            prompt_down,
            DenseMatrix::zeros(r_max, 1),
            DenseMatrix::zeros(d_out, 1),
            DenseMatrix::zeros(d_out, 1),
        ];
        Self::from_parts(w0, b0, r_max, factors)
    }

    /// Reassemble a layer from persisted tensors, checking every shape.
    pub fn from_parts(
        w0: DenseMatrix<T>,
        b0: Option<DenseMatrix<T>>,
        r_max: usize,
        factors: [DenseMatrix<T>; 8],
    ) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        if let Some(b) = &b0 {
            if b.shape() != (d_out, 1) {
                return Err(Error::shape("layer bias", (d_out, 1), b.shape()));
            }
        }
        let expected = [
            (d_out, r_max),
            (r_max, d_in),
            (d_out, r_max),
            (r_max, d_in),
            (d_in, r_max),
            (r_max, 1),
            (d_out, 1),
            (d_out, 1),
        ];
        for (slot, want) in FACTOR_SLOTS.iter().zip(expected) {
            let got = factors[slot.index()].shape();
            if got != want {
                return Err(Error::Config(format!(
                    "factor {} has shape {}x{}, expected {}x{}",
                    slot.name(),
                    got.0,
                    got.1,
                    want.0,
                    want.1
                )));
            }
        }
        Ok(GloraLinear {
            w0,
            b0,
            r_max,
            factors,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn w0(&self) -> &DenseMatrix<T> {
        &self.w0
    }

    pub fn b0(&self) -> Option<&DenseMatrix<T>> {
        self.b0.as_ref()
    }

    pub fn factor(&self, slot: FactorSlot) -> &DenseMatrix<T> {
        &self.factors[slot.index()]
    }

    /// Mutable factor access for optimizers and degradation constructors. The
    /// frozen base has no public mutable accessor.
    pub fn factor_mut(&mut self, slot: FactorSlot) -> &mut DenseMatrix<T> {
        &mut self.factors[slot.index()]
    }

    /// Base-weight mutation is reserved for plain pretraining, where the base
    /// itself is the trainable model.
    pub(crate) fn w0_mut(&mut self) -> &mut DenseMatrix<T> {
        &mut self.w0
    }

    pub(crate) fn b0_mut(&mut self) -> Option<&mut DenseMatrix<T>> {
        self.b0.as_mut()
    }

    fn check_kind(&self, role: SupportRole, kind: SupportKind) -> Result<()> {
        if !role.admits(kind) {
            return Err(Error::Config(format!("role {role} does not admit {kind}")));
        }
        if let SupportKind::Lora { rank } = kind {
            if rank == 0 || rank > self.r_max {
                return Err(Error::Config(format!(
                    "rank {rank} outside 1..={} for role {role}",
                    self.r_max
                )));
            }
        }
        Ok(())
    }

    fn role_slots(role: SupportRole) -> (FactorSlot, Option<FactorSlot>) {
        match role {
            SupportRole::WeightScale => (FactorSlot::ScaleDown, Some(FactorSlot::ScaleUp)),
            SupportRole::WeightShift => (FactorSlot::ShiftDown, Some(FactorSlot::ShiftUp)),
            SupportRole::Prompt => (FactorSlot::PromptDown, Some(FactorSlot::PromptUp)),
            SupportRole::BiasScale => (FactorSlot::BiasScale, None),
            SupportRole::BiasShift => (FactorSlot::BiasShift, None),
        }
    }

    /// The effective support tensor for a role under the given kind, indexed
    /// from the stored rank-capped factors: low-rank takes the leading-slice
    /// product, vector takes the first column, scalar takes element (0,0), and
    /// none is a 1x1 zero.
    pub fn materialize_support(
        &self,
        role: SupportRole,
        kind: SupportKind,
    ) -> Result<DenseMatrix<T>> {
        self.check_kind(role, kind)?;
        let (down_slot, up_slot) = Self::role_slots(role);
        let down = self.factor(down_slot);
        match kind {
            SupportKind::None => Ok(DenseMatrix::zeros(1, 1)),
            SupportKind::Scalar => down.slice(0, 1, 0, 1),
            SupportKind::Vector => down.slice(0, down.rows(), 0, 1),
            SupportKind::Lora { rank } => {
                let up = self.factor(up_slot.expect("checked: lora roles have an up factor"));
                let d = down.slice(0, down.rows(), 0, rank)?;
                let u = up.slice(0, rank, 0, up.cols())?;
                d.matmul(&u)
            }
        }
    }

    /// Register this layer's leaves on a tape. Factors touched by the config
    /// become parameters when `trainable`, constants otherwise; the base is
    /// always a constant.
    pub fn bind_on_tape(
        &self,
        tape: &mut Tape<T>,
        config: &LayerConfig,
        trainable: bool,
    ) -> Result<LayerBinding> {
        let mut binding = self.bind_base(tape);
        for &role in &SUPPORT_ROLES {
            let kind = config.get(role);
            self.check_kind(role, kind)?;
            if kind == SupportKind::None {
                continue;
            }
            let (down_slot, up_slot) = Self::role_slots(role);
            let mut needed = vec![down_slot];
            if matches!(kind, SupportKind::Lora { .. }) {
                needed.push(up_slot.expect("lora roles have an up factor"));
            }
            for slot in needed {
                if binding.factors[slot.index()].is_none() {
                    let value = self.factor(slot).clone();
                    let id = if trainable {
                        tape.param(value)
                    } else {
                        tape.constant(value)
                    };
                    binding.factors[slot.index()] = Some(id);
                }
            }
        }
        Ok(binding)
    }

    /// Base-only binding (no support factors on the tape).
    pub fn bind_base(&self, tape: &mut Tape<T>) -> LayerBinding {
        LayerBinding {
            w0: tape.constant(self.w0.clone()),
            b0: self.b0.as_ref().map(|b| tape.constant(b.clone())),
            factors: [None; 8],
        }
    }

    /// Base binding whose weight and bias are trainable parameters; used when
    /// training the plain model itself rather than adapters.
    pub fn bind_base_trainable(&self, tape: &mut Tape<T>) -> LayerBinding {
        LayerBinding {
            w0: tape.param(self.w0.clone()),
            b0: self.b0.as_ref().map(|b| tape.param(b.clone())),
            factors: [None; 8],
        }
    }

    fn materialize_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &LayerBinding,
        role: SupportRole,
        kind: SupportKind,
    ) -> Result<Option<ValueId>> {
        if kind == SupportKind::None {
            return Ok(None);
        }
        let (down_slot, up_slot) = Self::role_slots(role);
        let down = binding.factor_id(down_slot).ok_or_else(|| {
            Error::Contract(format!(
                "factor {} not bound for role {role}",
                down_slot.name()
            ))
        })?;
        let down_rows = tape.value(down).rows();
        let value = match kind {
            SupportKind::None => unreachable!(),
            SupportKind::Scalar => tape.slice(down, 0, 1, 0, 1)?,
            SupportKind::Vector => tape.slice(down, 0, down_rows, 0, 1)?,
            SupportKind::Lora { rank } => {
                let up_slot = up_slot.expect("lora roles have an up factor");
                let up = binding.factor_id(up_slot).ok_or_else(|| {
                    Error::Contract(format!(
                        "factor {} not bound for role {role}",
                        up_slot.name()
                    ))
                })?;
                let up_cols = tape.value(up).cols();
                let d = tape.slice(down, 0, down_rows, 0, rank)?;
                let u = tape.slice(up, 0, rank, 0, up_cols)?;
                tape.matmul(d, u)?
            }
        };
        Ok(Some(value))
    }

    /// Adapted forward pass on a tape:
    /// `(W0 + W0*A + B) x + W0 c + D*b0 + E + b0`, where `A`/`B`/`D`/`E`
    /// broadcast elementwise, `c` is the input-space prompt, and inactive
    /// terms are omitted (they are exactly zero). Differentiable with respect
    /// to every bound factor.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        binding: &LayerBinding,
        config: Option<&LayerConfig>,
        x: ValueId,
    ) -> Result<ValueId> {
        let Some(config) = config else {
            // Plain base path.
            let mut y = tape.matmul(binding.w0, x)?;
            if let Some(b0) = binding.b0 {
                y = tape.add_broadcast(y, b0)?;
            }
            return Ok(y);
        };

        for &role in &SUPPORT_ROLES {
            self.check_kind(role, config.get(role))?;
        }

        let mut w_eff = binding.w0;
        if let Some(scale) =
            self.materialize_on_tape(tape, binding, SupportRole::WeightScale, config.weight_scale)?
        {
            let scaled = tape.broadcast_mul(binding.w0, scale)?;
            w_eff = tape.add_broadcast(w_eff, scaled)?;
        }
        if let Some(shift) =
            self.materialize_on_tape(tape, binding, SupportRole::WeightShift, config.weight_shift)?
        {
            w_eff = tape.add_broadcast(w_eff, shift)?;
        }

        let mut y = tape.matmul(w_eff, x)?;

        if let Some(prompt) =
            self.materialize_on_tape(tape, binding, SupportRole::Prompt, config.prompt)?
        {
            let folded = tape.matmul(binding.w0, prompt)?;
            y = tape.add_broadcast(y, folded)?;
        }
        if let Some(b0) = binding.b0 {
            if let Some(bias_scale) =
                self.materialize_on_tape(tape, binding, SupportRole::BiasScale, config.bias_scale)?
            {
                let scaled_bias = tape.broadcast_mul(b0, bias_scale)?;
                y = tape.add_broadcast(y, scaled_bias)?;
            }
        }
        if let Some(bias_shift) =
            self.materialize_on_tape(tape, binding, SupportRole::BiasShift, config.bias_shift)?
        {
            y = tape.add_broadcast(y, bias_shift)?;
        }
        if let Some(b0) = binding.b0 {
            y = tape.add_broadcast(y, b0)?;
        }
        Ok(y)
    }

    /// Adapted forward pass without gradient recording.
    pub fn forward_adapter(
        &self,
        config: &LayerConfig,
        x: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>> {
        let mut tape = Tape::new();
        let binding = self.bind_on_tape(&mut tape, config, false)?;
        let x_id = tape.constant(x.clone());
        let y = self.forward_bound(&mut tape, &binding, Some(config), x_id)?;
        Ok(tape.value(y).clone())
    }

    /// Plain `W0 x + b0`, computed directly.
    pub fn forward_base(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let y = self.w0.matmul(x)?;
        match &self.b0 {
            Some(b0) => y.add_broadcast(b0),
            None => Ok(y),
        }
    }

    /// Fold the active supports into a plain affine layer:
    /// `W_uni = W0 + W0*A + B`, `b_uni = W0 c + D*b0 + E + b0`. The result has
    /// the base layer's shapes; this path shares no code with the tape.
    pub fn reparameterize(&self, config: &LayerConfig) -> Result<MergedLinear<T>> {
        for &role in &SUPPORT_ROLES {
            self.check_kind(role, config.get(role))?;
        }
        let d_out = self.d_out();

        let mut w_uni = self.w0.clone();
        if config.weight_scale != SupportKind::None {
            let a = self.materialize_support(SupportRole::WeightScale, config.weight_scale)?;
            w_uni = w_uni.add(&self.w0.broadcast_mul(&a)?)?;
        }
        if config.weight_shift != SupportKind::None {
            let b = self.materialize_support(SupportRole::WeightShift, config.weight_shift)?;
            w_uni = w_uni.add(&b.tile_to(d_out, self.d_in())?)?;
        }

        let mut bias_terms: Vec<DenseMatrix<T>> = Vec::new();
        if config.prompt != SupportKind::None {
            let c = self.materialize_support(SupportRole::Prompt, config.prompt)?;
            bias_terms.push(self.w0.matmul(&c)?);
        }
        if let Some(b0) = &self.b0 {
            if config.bias_scale != SupportKind::None {
                let d = self.materialize_support(SupportRole::BiasScale, config.bias_scale)?;
                bias_terms.push(b0.broadcast_mul(&d)?);
            }
        }
        if config.bias_shift != SupportKind::None {
            let e = self.materialize_support(SupportRole::BiasShift, config.bias_shift)?;
            bias_terms.push(e.tile_to(d_out, 1)?);
        }
        if let Some(b0) = &self.b0 {
            bias_terms.push(b0.clone());
        }

        let mut terms = bias_terms.into_iter();
        let b_uni = match terms.next() {
            Some(first) => {
                let mut acc = first;
                for term in terms {
                    acc = acc.add(&term)?;
                }
                Some(acc)
            }
            None => None,
        };

        Ok(MergedLinear { w_uni, b_uni })
    }

    /// Trainable scalars the config activates in this layer: a rank-`r`
    /// low-rank pair counts its two leading slices, a vector counts its
    /// length, a scalar counts one.
    pub fn trainable_param_count(&self, config: &LayerConfig) -> usize {
        SUPPORT_ROLES
            .iter()
            .map(|&role| self.role_param_count(role, config.get(role)))
            .sum()
    }

    pub fn role_param_count(&self, role: SupportRole, kind: SupportKind) -> usize {
        assert!(role.admits(kind), "role {role} does not admit {kind}");
        let (d_in, d_out) = (self.d_in(), self.d_out());
        match kind {
            SupportKind::None => 0,
            SupportKind::Scalar => 1,
            SupportKind::Vector => match role {
                SupportRole::Prompt => d_in,
                _ => d_out,
            },
            SupportKind::Lora { rank } => match role {
                SupportRole::WeightScale | SupportRole::WeightShift => rank * (d_out + d_in),
                SupportRole::Prompt => rank * (d_in + 1),
                _ => unreachable!("bias roles admit no low-rank kind"),
            },
        }
    }

    /// Parameters of the frozen base itself.
    pub fn base_param_count(&self) -> usize {
        self.w0.len() + self.b0.as_ref().map_or(0, DenseMatrix::len)
    }

    /// Multiply-add FLOPs of the plain affine map on a `batch`-column input:
    /// `2*d_in*d_out*batch` for the product plus `d_out*batch` for the bias.
    pub fn base_affine_flops(&self, batch: u64) -> u64 {
        let (d_out, d_in) = (self.d_out() as u64, self.d_in() as u64);
        2 * d_in * d_out * batch + if self.b0.is_some() { d_out * batch } else { 0 }
    }
}

/// The re-parameterized layer: same shapes and cost as the unadapted base.
#[derive(Clone, Debug)]
pub struct MergedLinear<T> {
    pub w_uni: DenseMatrix<T>,
    pub b_uni: Option<DenseMatrix<T>>,
}

impl<T: Scalar> MergedLinear<T> {
    pub fn d_in(&self) -> usize {
        self.w_uni.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_uni.rows()
    }

    /// Plain affine map.
    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let y = self.w_uni.matmul(x)?;
        match &self.b_uni {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_uni.len() + self.b_uni.as_ref().map_or(0, DenseMatrix::len)
    }

    pub fn affine_flops(&self, batch: u64) -> u64 {
        let (d_out, d_in) = (self.d_out() as u64, self.d_in() as u64);
        2 * d_in * d_out * batch
            + if self.b_uni.is_some() {
                d_out * batch
            } else {
                0
            }
    }
}
