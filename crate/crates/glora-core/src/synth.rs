//! Deterministic teacher-student tasks. A pretrain task fixes a random
//! teacher; a shifted task transforms that teacher in a way the adapter layer
//! can express exactly (output scale/shift, a low-rank weight delta, an input
//! offset, or all three), so the returned oracle configuration pins the
//! achievable loss floor at the injected noise level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compat::{as_lora, as_prompt, as_ssf};
use crate::error::{Error, Result};
use crate::glora::{FactorSlot, ModelConfig, SupportKind};
use crate::supernet::{MergedModel, ModelKind, ToyModel};
use crate::tensor::{DenseMatrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Single affine map.
    Linear,
    /// Two affine maps with a GELU between.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    ScaleShift,
    LowRank,
    Prompt,
    Mixed,
}

/// Targets are a dense matrix for regression or integer labels for
/// classification; the two are persisted with distinct element types.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    /// `n x k`, one row per sample.
    Regression(DenseMatrix<T>),
    Classification {
        labels: Vec<u32>,
        n_classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: TaskKind,
    pub teacher: TeacherKind,
    pub seed: u64,
    pub shift: Option<ShiftKind>,
    pub noise_std: f64,
}

/// Features with split tags and task metadata. Feature rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub features: DenseMatrix<T>,
    pub targets: Targets<T>,
    pub split: Vec<Split>,
    pub meta: DatasetMeta,
}

/// A batch in model orientation: features as columns.
#[derive(Clone, Debug)]
pub enum BatchTargets<T> {
    /// `k x b`, one column per sample.
    Regression(DenseMatrix<T>),
    Classification(Vec<usize>),
}

impl<T: Scalar> Dataset<T> {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Output width a model must produce for this dataset.
    pub fn target_dim(&self) -> usize {
        match &self.targets {
            Targets::Regression(t) => t.cols(),
            Targets::Classification { n_classes, .. } => *n_classes,
        }
    }

    pub fn task(&self) -> TaskKind {
        self.meta.task
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Structural consistency of a freshly built or loaded dataset.
    pub fn validate(&self) -> Result<()> {
        if self.split.len() != self.n() {
            return Err(Error::Format(format!(
                "{} split tags for {} samples",
                self.split.len(),
                self.n()
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::Format(
                "dataset features contain non-finite values".into(),
            ));
        }
        match &self.targets {
            Targets::Regression(t) => {
                if t.rows() != self.n() {
                    return Err(Error::Format(format!(
                        "{} target rows for {} samples",
                        t.rows(),
                        self.n()
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::Format(
                        "dataset targets contain non-finite values".into(),
                    ));
                }
                match self.meta.task {
                    TaskKind::Regression => {}
                    TaskKind::Classification => {
                        return Err(Error::Format(
                            "classification dataset carries regression targets".into(),
                        ))
                    }
                }
            }
            Targets::Classification { labels, n_classes } => {
                if labels.len() != self.n() {
                    return Err(Error::Format(format!(
                        "{} labels for {} samples",
                        labels.len(),
                        self.n()
                    )));
                }
                if *n_classes == 0 || labels.iter().any(|&l| l as usize >= *n_classes) {
                    return Err(Error::Format("label outside class range".into()));
                }
                if self.meta.task != TaskKind::Classification {
                    return Err(Error::Format(
                        "regression dataset carries classification targets".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Extract rows `idx` in model orientation (features become columns).
    pub fn batch(&self, idx: &[usize]) -> Result<(DenseMatrix<T>, BatchTargets<T>)> {
        if idx.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Contract(format!("batch index {bad} out of range")));
        }
        let x = DenseMatrix::from_fn(self.feature_dim(), idx.len(), |d, j| {
            self.features.get(idx[j], d)
        });
        let targets = match &self.targets {
            Targets::Regression(t) => {
                BatchTargets::Regression(DenseMatrix::from_fn(t.cols(), idx.len(), |k, j| {
                    t.get(idx[j], k)
                }))
            }
            Targets::Classification { labels, .. } => {
                BatchTargets::Classification(idx.iter().map(|&i| labels[i] as usize).collect())
            }
        };
        Ok((x, targets))
    }
}

/// Contiguous 80/10/10 split tags (val and test each take `n/10`).
fn split_tags(n: usize) -> Vec<Split> {
    let val = n / 10;
    let test = n / 10;
    let train = n - val - test;
    let mut tags = Vec::with_capacity(n);
    tags.extend(std::iter::repeat_n(Split::Train, train));
    tags.extend(std::iter::repeat_n(Split::Val, val));
    tags.extend(std::iter::repeat_n(Split::Test, test));
    tags
}

/// Rank-based quantile binning of scores into `k` classes.
fn quantile_labels(scores: &[f64], k: usize) -> Vec<u32> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut labels = vec![0u32; n];
    for (pos, &idx) in order.iter().enumerate() {
        labels[idx] = ((pos * k) / n) as u32;
    }
    labels
}

/// Largest singular value by power iteration; deterministic start vector.
fn spectral_norm<T: Scalar>(m: &DenseMatrix<T>) -> f64 {
    let n = m.cols();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) / (n as f64)).collect();
    let mt = m.transpose();
    let mut sigma = 0.0;
    for _ in 0..50 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let vn = DenseMatrix::<T>::from_fn(n, 1, |i, _| T::of_f64(v[i] / norm));
        let mv = m.matmul(&vn).unwrap();
        sigma = mv
            .data()
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let back = mt.matmul(&mv).unwrap();
        v = back.data().iter().map(|x| x.as_f64()).collect();
    }
    sigma
}

/// Everything a pretrain task needs besides the seed.
#[derive(Clone, Copy, Debug)]
pub struct TaskSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub n: usize,
    pub teacher: TeacherKind,
    pub task: TaskKind,
    /// Classes for classification tasks; ignored for regression.
    pub n_classes: usize,
    /// Hidden width of the two-layer teacher; ignored for the linear teacher.
    pub hidden: usize,
    pub noise_std: f64,
}

impl TaskSpec {
    pub fn regression(d_in: usize, d_out: usize, n: usize) -> Self {
        TaskSpec {
            d_in,
            d_out,
            n,
            teacher: TeacherKind::Linear,
            task: TaskKind::Regression,
            n_classes: 0,
            hidden: 2 * d_in,
            noise_std: 0.01,
        }
    }
}

fn teacher_dims(spec: &TaskSpec) -> Vec<usize> {
    match spec.teacher {
        TeacherKind::Linear => vec![spec.d_in, spec.d_out],
        TeacherKind::Mlp => vec![spec.d_in, spec.hidden, spec.d_out],
    }
}

fn random_teacher<T: Scalar>(spec: &TaskSpec, rng: &mut impl Rng) -> Result<MergedModel<T>> {
    let dims = teacher_dims(spec);
    let shapes = crate::supernet::layer_shapes(ModelKind::Mlp, &dims)?;
    let layers = shapes
        .into_iter()
        .map(|(d_out, d_in, _)| crate::glora::MergedLinear {
            w_uni: DenseMatrix::gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng),
            b_uni: Some(DenseMatrix::gaussian(d_out, 1, 0.1, rng)),
        })
        .collect::<Vec<_>>();
    let labels = vec![crate::supernet::LayerRole::Plain; layers.len()];
    MergedModel::from_parts(ModelKind::Mlp, dims, layers, labels)
}

fn targets_from_scores<T: Scalar>(
    scores: &DenseMatrix<T>, // d_out x n
    task: TaskKind,
    n_classes: usize,
) -> Result<Targets<T>> {
    match task {
        TaskKind::Regression => Ok(Targets::Regression(scores.transpose())),
        TaskKind::Classification => {
            if n_classes < 2 {
                return Err(Error::Config(
                    "classification needs at least 2 classes".into(),
                ));
            }
            let first_row: Vec<f64> = (0..scores.cols())
                .map(|j| scores.get(0, j).as_f64())
                .collect();
            Ok(Targets::Classification {
                labels: quantile_labels(&first_row, n_classes),
                n_classes,
            })
        }
    }
}

/// Standard-normal features through a random teacher, plus Gaussian target
/// noise. Returns the dataset and the teacher for later shifting.
pub fn gen_pretrain_task<T: Scalar>(
    spec: &TaskSpec,
    seed: u64,
) -> Result<(Dataset<T>, MergedModel<T>)> {
    if spec.n < 10 * spec.d_in {
        return Err(Error::Contract(format!(
            "need n >= 10 * d_in, got n = {} for d_in = {}",
            spec.n, spec.d_in
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = random_teacher::<T>(spec, &mut rng)?;
    let features = DenseMatrix::<T>::gaussian(spec.n, spec.d_in, 1.0, &mut rng);
    let clean = teacher.forward_eval(&features.transpose())?;
    let noisy = add_noise(&clean, spec.noise_std, &mut rng);
    let targets = targets_from_scores(&noisy, spec.task, spec.n_classes)?;
    let dataset = Dataset {
        features,
        targets,
        split: split_tags(spec.n),
        meta: DatasetMeta {
            task: spec.task,
            teacher: spec.teacher,
            seed,
            shift: None,
            noise_std: spec.noise_std,
        },
    };
    dataset.validate()?;
    Ok((dataset, teacher))
}

fn add_noise<T: Scalar>(
    clean: &DenseMatrix<T>,
    noise_std: f64,
    rng: &mut impl Rng,
) -> DenseMatrix<T> {
    if noise_std == 0.0 {
        return clean.clone();
    }
    let noise = DenseMatrix::<T>::gaussian(clean.rows(), clean.cols(), noise_std, rng);
    clean.add(&noise).expect("same shape")
}

/// A teacher transformation that the adapter layer expresses exactly.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// Scales the default parameter ranges; zero means the identity shift.
    pub magnitude: f64,
    /// Rank of the weight delta (low-rank and mixed shifts).
    pub rank: usize,
    /// Seed for the shift parameters themselves.
    pub seed: u64,
}

/// The configuration and support values that reproduce a shifted teacher
/// exactly, applied to the frozen teacher itself.
#[derive(Clone, Debug)]
pub struct OracleAdaptation<T> {
    pub config: ModelConfig,
    pub model: ToyModel<T>,
}

struct ShiftParams<T> {
    gamma: Option<DenseMatrix<T>>,
    beta: Option<DenseMatrix<T>>,
    delta_down: Option<DenseMatrix<T>>,
    delta_up: Option<DenseMatrix<T>>,
    offset: Option<DenseMatrix<T>>,
}

fn draw_shift_params<T: Scalar>(
    teacher: &MergedModel<T>,
    shift: &ShiftSpec,
) -> Result<ShiftParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    let d_out = teacher.output_dim();
    let d_in = teacher.input_dim();
    let mag = shift.magnitude;

    let wants_scale = matches!(shift.kind, ShiftKind::ScaleShift | ShiftKind::Mixed);
    let wants_delta = matches!(shift.kind, ShiftKind::LowRank | ShiftKind::Mixed);
    let wants_offset = matches!(shift.kind, ShiftKind::Prompt | ShiftKind::Mixed);

    // Draw order is fixed so each parameter family is reproducible.
    let gamma = DenseMatrix::<T>::from_fn(d_out, 1, |_, _| {
        T::of_f64(1.0 + mag * (rng.random::<f64>() - 0.5))
    });
    let beta = DenseMatrix::<T>::from_fn(d_out, 1, |_, _| {
        T::of_f64(mag * (rng.random::<f64>() - 0.5))
    });

    let first = &teacher.layers()[0];
    let (h, _) = first.w_uni.shape();
    if wants_delta && (shift.rank == 0 || shift.rank > h.min(d_in)) {
        return Err(Error::Config(format!(
            "shift rank {} outside 1..={}",
            shift.rank,
            h.min(d_in)
        )));
    }
    let rank = shift.rank.max(1);
    let mut delta_down = DenseMatrix::<T>::gaussian(h, rank, 1.0, &mut rng);
    let delta_up = DenseMatrix::<T>::gaussian(rank, d_in, 1.0, &mut rng);
    // Rescale so the delta's spectral norm is 0.3 * mag of the base weight's.
    let sigma_w = spectral_norm(&first.w_uni);
    let delta = delta_down.matmul(&delta_up)?;
    let sigma_d = spectral_norm(&delta);
    let scale = if sigma_d > 0.0 {
        0.3 * mag * sigma_w / sigma_d
    } else {
        0.0
    };
    delta_down = delta_down.scale(T::of_f64(scale));

    let mut offset = DenseMatrix::<T>::gaussian(d_in, 1, 1.0, &mut rng);
    let norm = offset
        .data()
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    offset = offset.scale(T::of_f64(if norm > 0.0 { mag / norm } else { 0.0 }));

    Ok(ShiftParams {
        gamma: wants_scale.then_some(gamma),
        beta: wants_scale.then_some(beta),
        delta_down: wants_delta.then_some(delta_down),
        delta_up: wants_delta.then_some(delta_up),
        offset: wants_offset.then_some(offset),
    })
}

/// Evaluate the shifted teacher directly: offset the input, add the weight
/// delta, scale and shift the output. This is the generation route; the
/// oracle below reproduces it through the adapter formula instead.
fn shifted_scores<T: Scalar>(
    teacher: &MergedModel<T>,
    params: &ShiftParams<T>,
    features: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let mut x = features.transpose();
    if let Some(c) = &params.offset {
        x = x.add_broadcast(c)?;
    }
    let mut teacher = teacher.clone();
    if let (Some(down), Some(up)) = (&params.delta_down, &params.delta_up) {
        let delta = down.matmul(up)?;
        let first = &mut teacher.layers[0];
        first.w_uni = first.w_uni.add(&delta)?;
    }
    let mut scores = teacher.forward_eval(&x)?;
    if let (Some(gamma), Some(beta)) = (&params.gamma, &params.beta) {
        scores = scores.broadcast_mul(gamma)?.add_broadcast(beta)?;
    }
    Ok(scores)
}

fn build_oracle<T: Scalar>(
    teacher: &MergedModel<T>,
    shift: &ShiftSpec,
    params: &ShiftParams<T>,
) -> Result<OracleAdaptation<T>> {
    let r_max = shift.rank.max(1);
    let mut model = ToyModel::from_merged(teacher, r_max, shift.seed ^ 0x6f72_6163_6c65)?;
    let n_layers = model.n_layers();
    let mut config = ModelConfig::all_none(n_layers);
    if shift.magnitude == 0.0 {
        return Ok(OracleAdaptation { config, model });
    }

    match shift.kind {
        ShiftKind::ScaleShift => {
            let (gamma, beta) = (
                params.gamma.as_ref().unwrap(),
                params.beta.as_ref().unwrap(),
            );
            config.layers[n_layers - 1] = as_ssf(model.layer_mut(n_layers - 1), gamma, beta)?;
        }
        ShiftKind::LowRank => {
            let (down, up) = (
                params.delta_down.as_ref().unwrap(),
                params.delta_up.as_ref().unwrap(),
            );
            config.layers[0] = as_lora(model.layer_mut(0), shift.rank, down, up)?;
        }
        ShiftKind::Prompt => {
            config.layers[0] = as_prompt(model.layer_mut(0), params.offset.as_ref().unwrap())?;
        }
        ShiftKind::Mixed => {
            let gamma = params.gamma.as_ref().unwrap();
            let beta = params.beta.as_ref().unwrap();
            let down = params.delta_down.as_ref().unwrap();
            let up = params.delta_up.as_ref().unwrap();
            let offset = params.offset.as_ref().unwrap();
            let delta = down.matmul(up)?;

            if n_layers == 1 {
                // One layer carries everything:
                //   gamma*( (W+dW)(x+c) + b ) + beta
                // = diag(gamma)W x  (weight scale, vector gamma-1)
                // + diag(gamma)dW x (weight shift, rank-r: (gamma*down) up)
                // + diag(gamma)b    (bias scale, vector gamma-1)
                // + diag(gamma)(W+dW)c + beta  (bias shift, vector).
                let layer = model.layer_mut(0);
                let scaled_down = down.broadcast_mul(gamma)?;
                as_lora(layer, shift.rank, &scaled_down, up)?;
                let gamma_minus_one = gamma.map(|g| g - T::one());
                for i in 0..layer.d_out() {
                    layer
                        .factor_mut(FactorSlot::ScaleDown)
                        .set(i, 0, gamma_minus_one.get(i, 0));
                    layer
                        .factor_mut(FactorSlot::BiasScale)
                        .set(i, 0, gamma_minus_one.get(i, 0));
                }
                let w_plus = teacher.layers()[0].w_uni.add(&delta)?;
                let bias_shift = w_plus.matmul(offset)?.broadcast_mul(gamma)?.add(beta)?;
                for i in 0..layer.d_out() {
                    layer
                        .factor_mut(FactorSlot::BiasShift)
                        .set(i, 0, bias_shift.get(i, 0));
                }
                config.layers[0] = crate::glora::LayerConfig {
                    weight_scale: SupportKind::Vector,
                    weight_shift: SupportKind::Lora { rank: shift.rank },
                    prompt: SupportKind::None,
                    bias_scale: SupportKind::Vector,
                    bias_shift: SupportKind::Vector,
                };
            } else {
                // First layer: (W1+dW)(x+c)+b1 = (W1+dW)x + W1 c + dW c + b1,
                // via weight shift, prompt, and a bias shift of dW c.
                // Last layer: the output scale/shift.
                let first_cfg = {
                    let layer = model.layer_mut(0);
                    let mut cfg = as_lora(layer, shift.rank, down, up)?;
                    let prompt_cfg = as_prompt(layer, offset)?;
                    cfg.prompt = prompt_cfg.prompt;
                    let extra = delta.matmul(offset)?;
                    for i in 0..layer.d_out() {
                        layer
                            .factor_mut(FactorSlot::BiasShift)
                            .set(i, 0, extra.get(i, 0));
                    }
                    cfg.bias_shift = SupportKind::Vector;
                    cfg
                };
                config.layers[0] = first_cfg;
                config.layers[n_layers - 1] = as_ssf(model.layer_mut(n_layers - 1), gamma, beta)?;
            }
        }
    }
    Ok(OracleAdaptation { config, model })
}

/// Fresh features through the transformed teacher, plus the adapter
/// configuration and values that realize the transformation exactly.
pub fn gen_shifted_task<T: Scalar>(
    teacher: &MergedModel<T>,
    shift: &ShiftSpec,
    task: TaskKind,
    n_classes: usize,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset<T>, OracleAdaptation<T>)> {
    let params = draw_shift_params(teacher, shift)?;
    let oracle = build_oracle(teacher, shift, &params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = DenseMatrix::<T>::gaussian(n, teacher.input_dim(), 1.0, &mut rng);
    let clean = shifted_scores(teacher, &params, &features)?;
    let noisy = add_noise(&clean, noise_std, &mut rng);
    let targets = targets_from_scores(&noisy, task, n_classes)?;
    let dataset = Dataset {
        features,
        targets,
        split: split_tags(n),
        meta: DatasetMeta {
            task,
            teacher: match teacher.n_layers() {
                1 => TeacherKind::Linear,
                _ => TeacherKind::Mlp,
            },
            seed,
            shift: Some(shift.kind),
            noise_std,
        },
    };
    dataset.validate()?;
    Ok((dataset, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::evaluate_model;

    #[test]
    fn pretrain_task_is_reproducible_bitwise() {
        let spec = TaskSpec::regression(5, 2, 100);
        let (a, ta) = gen_pretrain_task::<f64>(&spec, 7).unwrap();
        let (b, tb) = gen_pretrain_task::<f64>(&spec, 7).unwrap();
        assert!(a.features.bits_eq(&b.features));
        match (&a.targets, &b.targets) {
            (Targets::Regression(x), Targets::Regression(y)) => assert!(x.bits_eq(y)),
            _ => panic!("expected regression targets"),
        }
        for (la, lb) in ta.layers().iter().zip(tb.layers()) {
            assert!(la.w_uni.bits_eq(&lb.w_uni));
        }
    }

    #[test]
    fn split_sizes_are_80_10_10() {
        let spec = TaskSpec::regression(4, 2, 200);
        let (ds, _) = gen_pretrain_task::<f64>(&spec, 1).unwrap();
        assert_eq!(ds.split_indices(Split::Train).len(), 160);
        assert_eq!(ds.split_indices(Split::Val).len(), 20);
        assert_eq!(ds.split_indices(Split::Test).len(), 20);
    }

    #[test]
    fn pretrain_rejects_undersized_n() {
        let spec = TaskSpec::regression(8, 2, 50);
        assert!(gen_pretrain_task::<f64>(&spec, 1).is_err());
    }

    /// Normal-equations solve of `X w = y`, the independent recovery oracle.
    #[allow(clippy::needless_range_loop)]
    fn ols(x: &DenseMatrix<f64>, y: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        let xt = x.transpose();
        let gram = xt.matmul(x).unwrap();
        let rhs = xt.matmul(y).unwrap();
        let n = gram.rows();
        let k = rhs.cols();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).map(|j| gram.get(i, j)).collect();
                row.extend((0..k).map(|j| rhs.get(i, j)));
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            let diag = a[col][col];
            for j in col..n + k {
                a[col][j] /= diag;
            }
            for row in 0..n {
                if row != col {
                    let f = a[row][col];
                    for j in col..n + k {
                        a[row][j] -= f * a[col][j];
                    }
                }
            }
        }
        DenseMatrix::from_fn(n, k, |i, j| a[i][n + j])
    }

    #[test]
    fn noiseless_linear_teacher_is_recovered_by_least_squares() {
        let mut spec = TaskSpec::regression(4, 2, 400);
        spec.noise_std = 0.0;
        let (ds, teacher) = gen_pretrain_task::<f64>(&spec, 3).unwrap();
        let Targets::Regression(y) = &ds.targets else {
            panic!()
        };

        // Augment features with a ones column to recover the bias too.
        let x_aug =
            DenseMatrix::from_fn(
                ds.n(),
                5,
                |i, j| {
                    if j < 4 {
                        ds.features.get(i, j)
                    } else {
                        1.0
                    }
                },
            );
        let w_hat = ols(&x_aug, y); // 5 x 2: rows 0..4 weightsT, row 4 bias
        let teacher_w = &teacher.layers()[0].w_uni;
        let teacher_b = teacher.layers()[0].b_uni.as_ref().unwrap();
        for out in 0..2 {
            for inp in 0..4 {
                assert!(
                    (w_hat.get(inp, out) - teacher_w.get(out, inp)).abs() < 1e-6,
                    "weight ({out},{inp})"
                );
            }
            assert!((w_hat.get(4, out) - teacher_b.get(out, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_magnitude_shift_gives_all_none_oracle() {
        let spec = TaskSpec::regression(4, 2, 100);
        let (_, teacher) = gen_pretrain_task::<f64>(&spec, 5).unwrap();
        let shift = ShiftSpec {
            kind: ShiftKind::ScaleShift,
            magnitude: 0.0,
            rank: 1,
            seed: 9,
        };
        let (_, oracle) =
            gen_shifted_task(&teacher, &shift, TaskKind::Regression, 0, 100, 0.01, 10).unwrap();
        assert!(oracle.config.layers.iter().all(|c| c.is_identity()));
    }

    fn oracle_val_mse(kind: ShiftKind, teacher_kind: TeacherKind) -> (f64, f64) {
        let mut spec = TaskSpec::regression(5, 3, 300);
        spec.teacher = teacher_kind;
        let (_, teacher) = gen_pretrain_task::<f64>(&spec, 21).unwrap();
        let shift = ShiftSpec {
            kind,
            magnitude: 1.0,
            rank: 2,
            seed: 22,
        };
        let (ds, oracle) =
            gen_shifted_task(&teacher, &shift, TaskKind::Regression, 0, 300, 0.01, 23).unwrap();
        let metrics = evaluate_model(&oracle.model, Some(&oracle.config), &ds, Split::Val).unwrap();
        (metrics.loss, ds.meta.noise_std * ds.meta.noise_std)
    }

    #[test]
    fn oracle_config_reaches_the_noise_floor_for_every_shift_kind() {
        for kind in [
            ShiftKind::ScaleShift,
            ShiftKind::LowRank,
            ShiftKind::Prompt,
            ShiftKind::Mixed,
        ] {
            for teacher in [TeacherKind::Linear, TeacherKind::Mlp] {
                let (mse, noise_var) = oracle_val_mse(kind, teacher);
                assert!(
                    mse <= 2.0 * noise_var,
                    "{kind:?}/{teacher:?}: val mse {mse} vs noise var {noise_var}"
                );
            }
        }
    }

    #[test]
    fn prompt_shift_targets_equal_teacher_on_offset_inputs() {
        let spec = TaskSpec::regression(4, 2, 120);
        let (_, teacher) = gen_pretrain_task::<f64>(&spec, 31).unwrap();
        let shift = ShiftSpec {
            kind: ShiftKind::Prompt,
            magnitude: 1.0,
            rank: 1,
            seed: 32,
        };
        let (ds, oracle) =
            gen_shifted_task(&teacher, &shift, TaskKind::Regression, 0, 120, 0.0, 33).unwrap();
        let Targets::Regression(y) = &ds.targets else {
            panic!()
        };

        // Rebuild the offset from the oracle's prompt factor and evaluate the
        // teacher on x + c directly.
        let c = oracle
            .model
            .layer(0)
            .factor(FactorSlot::PromptDown)
            .slice(0, 4, 0, 1)
            .unwrap();
        let shifted = ds.features.transpose().add_broadcast(&c).unwrap();
        let direct = teacher.forward_eval(&shifted).unwrap();
        assert!(direct.transpose().max_abs_diff(y) <= 1e-12);
    }

    #[test]
    fn low_rank_shift_oracle_reaches_generator_floor() {
        let spec = TaskSpec::regression(5, 3, 300);
        let (_, teacher) = gen_pretrain_task::<f64>(&spec, 41).unwrap();
        let shift = ShiftSpec {
            kind: ShiftKind::LowRank,
            magnitude: 1.0,
            rank: 2,
            seed: 42,
        };
        let (ds, oracle) =
            gen_shifted_task(&teacher, &shift, TaskKind::Regression, 0, 300, 0.01, 43).unwrap();
        let metrics = evaluate_model(&oracle.model, Some(&oracle.config), &ds, Split::Val).unwrap();
        let sigma_sq = 0.01f64 * 0.01;
        assert!(metrics.loss <= 1.5 * sigma_sq, "val loss {}", metrics.loss);
    }

    #[test]
    fn classification_variant_bins_by_quantile() {
        let mut spec = TaskSpec::regression(4, 2, 200);
        spec.task = TaskKind::Classification;
        spec.n_classes = 4;
        let (ds, _) = gen_pretrain_task::<f64>(&spec, 51).unwrap();
        let Targets::Classification { labels, n_classes } = &ds.targets else {
            panic!()
        };
        assert_eq!(*n_classes, 4);
        let mut counts = [0usize; 4];
        for &l in labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [50usize; 4]);
    }

    #[test]
    fn batch_extraction_transposes_rows() {
        let spec = TaskSpec::regression(3, 2, 50);
        let (ds, _) = gen_pretrain_task::<f64>(&spec, 61).unwrap();
        let (x, t) = ds.batch(&[4, 9]).unwrap();
        assert_eq!(x.shape(), (3, 2));
        assert_eq!(x.get(1, 0), ds.features.get(4, 1));
        let BatchTargets::Regression(t) = t else {
            panic!()
        };
        assert_eq!(t.shape(), (2, 2));
        let Targets::Regression(full) = &ds.targets else {
            panic!()
        };
        assert_eq!(t.get(0, 1), full.get(9, 0));
    }
}
