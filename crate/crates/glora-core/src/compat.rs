//! Exact degradations of the unified adapter layer to prior fine-tuning
//! methods: low-rank weight deltas, output scale-and-shift, a bias prompt,
//! and the frozen base itself.
//!
//! Each constructor writes the prior method's parameters into the layer's
//! support factors and returns the config that activates them, so the adapted
//! forward pass reproduces the prior method's published map exactly. Two
//! families are deliberately not constructible here: a non-linear parallel
//! branch cannot be expressed inside one affine formula, and cross-layer
//! factor sharing has no per-layer representation. Only their re-parameterized
//! end results (a dense weight delta at full rank) are representable.

use crate::error::{Error, Result};
use crate::glora::{FactorSlot, GloraLinear, LayerConfig, SupportKind};
use crate::tensor::{DenseMatrix, Scalar};

/// A prior method's parameters, dimensioned for the layer they will adapt.
#[derive(Clone, Debug)]
pub enum PriorMethod<T> {
    /// Additive low-rank weight delta `W0 x + (down up) x + b0`.
    Lora {
        rank: usize,
        down: DenseMatrix<T>,
        up: DenseMatrix<T>,
    },
    /// Output scale and shift `gamma * (W0 x + b0) + beta`.
    ScaleShift {
        gamma: DenseMatrix<T>,
        beta: DenseMatrix<T>,
    },
    /// Constant input offset folded into the bias: `W0 (x + c) + b0`.
    Prompt { offset: DenseMatrix<T> },
    /// The unadapted base layer.
    FrozenLinear,
}

impl<T: Scalar> PriorMethod<T> {
    /// Write this method into `layer` and return the activating config.
    pub fn apply(self, layer: &mut GloraLinear<T>) -> Result<LayerConfig> {
        match self {
            PriorMethod::Lora { rank, down, up } => as_lora(layer, rank, &down, &up),
            PriorMethod::ScaleShift { gamma, beta } => as_ssf(layer, &gamma, &beta),
            PriorMethod::Prompt { offset } => as_prompt(layer, &offset),
            PriorMethod::FrozenLinear => Ok(as_frozen_linear(layer)),
        }
    }
}

fn write_leading<T: Scalar>(dest: &mut DenseMatrix<T>, src: &DenseMatrix<T>) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dest.set(i, j, src.get(i, j));
        }
    }
}

fn write_column<T: Scalar>(dest: &mut DenseMatrix<T>, values: &DenseMatrix<T>) {
    for i in 0..values.rows() {
        dest.set(i, 0, values.get(i, 0));
    }
}

/// Install a rank-`rank` weight delta in the weight-shift factors' leading
/// slices. The adapted forward pass then computes `W0 x + (down up) x + b0`.
pub fn as_lora<T: Scalar>(
    layer: &mut GloraLinear<T>,
    rank: usize,
    down: &DenseMatrix<T>,
    up: &DenseMatrix<T>,
) -> Result<LayerConfig> {
    if rank == 0 || rank > layer.r_max() {
        return Err(Error::Config(format!(
            "rank {rank} outside 1..={} for this layer",
            layer.r_max()
        )));
    }
    if down.shape() != (layer.d_out(), rank) {
        return Err(Error::shape(
            "lora down factor",
            (layer.d_out(), rank),
            down.shape(),
        ));
    }
    if up.shape() != (rank, layer.d_in()) {
        return Err(Error::shape(
            "lora up factor",
            (rank, layer.d_in()),
            up.shape(),
        ));
    }
    write_leading(layer.factor_mut(FactorSlot::ShiftDown), down);
    write_leading(layer.factor_mut(FactorSlot::ShiftUp), up);
    let mut cfg = LayerConfig::all_none();
    cfg.weight_shift = SupportKind::Lora { rank };
    Ok(cfg)
}

/// Install output scale/shift. Because the unified formula always adds `W0`
/// once, the weight-scale and bias-scale vectors store `gamma - 1`; the bias
/// shift stores `beta`. The adapted forward pass then equals
/// `gamma * (W0 x + b0) + beta` (with `b0 = 0` when the layer has no bias).
pub fn as_ssf<T: Scalar>(
    layer: &mut GloraLinear<T>,
    gamma: &DenseMatrix<T>,
    beta: &DenseMatrix<T>,
) -> Result<LayerConfig> {
    let want = (layer.d_out(), 1);
    if gamma.shape() != want {
        return Err(Error::shape("scale vector", want, gamma.shape()));
    }
    if beta.shape() != want {
        return Err(Error::shape("shift vector", want, beta.shape()));
    }
    let gamma_minus_one = gamma.map(|g| g - T::one());
    write_column(layer.factor_mut(FactorSlot::ScaleDown), &gamma_minus_one);
    write_column(layer.factor_mut(FactorSlot::BiasScale), &gamma_minus_one);
    write_column(layer.factor_mut(FactorSlot::BiasShift), beta);
    let mut cfg = LayerConfig::all_none();
    cfg.weight_scale = SupportKind::Vector;
    cfg.bias_scale = SupportKind::Vector;
    cfg.bias_shift = SupportKind::Vector;
    Ok(cfg)
}

/// Install an input-space prompt. The adapted forward pass then equals
/// `W0 x + W0 c + b0`, an input offset folded into the bias.
pub fn as_prompt<T: Scalar>(
    layer: &mut GloraLinear<T>,
    offset: &DenseMatrix<T>,
) -> Result<LayerConfig> {
    let want = (layer.d_in(), 1);
    if offset.shape() != want {
        return Err(Error::shape("prompt offset", want, offset.shape()));
    }
    write_column(layer.factor_mut(FactorSlot::PromptDown), offset);
    let mut cfg = LayerConfig::all_none();
    cfg.prompt = SupportKind::Vector;
    Ok(cfg)
}

/// The all-none config: the layer degrades to the original frozen base.
pub fn as_frozen_linear<T: Scalar>(_layer: &GloraLinear<T>) -> LayerConfig {
    LayerConfig::all_none()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glora::SupportRole;
    use crate::tensor::mse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64, d_out: usize, d_in: usize, r_max: usize) -> GloraLinear<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = DenseMatrix::gaussian(d_out, d_in, 1.0, &mut rng);
        let b0 = DenseMatrix::gaussian(d_out, 1, 1.0, &mut rng);
        GloraLinear::new(w0, Some(b0), r_max, &mut rng).unwrap()
    }

    /// Independent route: the delta applied as two matvecs, never forming an
    /// effective weight.
    fn lora_oracle(
        w0: &DenseMatrix<f64>,
        b0: &DenseMatrix<f64>,
        down: &DenseMatrix<f64>,
        up: &DenseMatrix<f64>,
        x: &DenseMatrix<f64>,
    ) -> DenseMatrix<f64> {
        let base = w0.matmul(x).unwrap();
        let delta = down.matmul(&up.matmul(x).unwrap()).unwrap();
        base.add(&delta).unwrap().add_broadcast(b0).unwrap()
    }

    fn ssf_oracle(
        w0: &DenseMatrix<f64>,
        b0: Option<&DenseMatrix<f64>>,
        gamma: &DenseMatrix<f64>,
        beta: &DenseMatrix<f64>,
        x: &DenseMatrix<f64>,
    ) -> DenseMatrix<f64> {
        let mut y = w0.matmul(x).unwrap();
        if let Some(b0) = b0 {
            y = y.add_broadcast(b0).unwrap();
        }
        y.broadcast_mul(gamma).unwrap().add_broadcast(beta).unwrap()
    }

    fn prompt_oracle(
        w0: &DenseMatrix<f64>,
        b0: &DenseMatrix<f64>,
        c: &DenseMatrix<f64>,
        x: &DenseMatrix<f64>,
    ) -> DenseMatrix<f64> {
        // W0 (x + c) + b0, offsetting the input directly.
        let shifted = x.add_broadcast(c).unwrap();
        w0.matmul(&shifted).unwrap().add_broadcast(b0).unwrap()
    }

    #[test]
    fn lora_with_zero_factors_is_the_base_layer() {
        let mut l = layer(1, 3, 3, 2);
        let down = DenseMatrix::zeros(3, 1);
        let up = DenseMatrix::zeros(1, 3);
        let cfg = as_lora(&mut l, 1, &down, &up).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DenseMatrix::gaussian(3, 5, 1.0, &mut rng);
        assert!(l
            .forward_adapter(&cfg, &x)
            .unwrap()
            .bits_eq(&l.forward_base(&x).unwrap()));
    }

    #[test]
    fn lora_matches_rank_one_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = layer(2, 3, 3, 2);
        let down = DenseMatrix::gaussian(3, 1, 1.0, &mut rng);
        let up = DenseMatrix::gaussian(1, 3, 1.0, &mut rng);
        let cfg = as_lora(&mut l, 1, &down, &up).unwrap();
        let x = DenseMatrix::gaussian(3, 4, 1.0, &mut rng);
        let got = l.forward_adapter(&cfg, &x).unwrap();
        let want = lora_oracle(l.w0(), l.b0().unwrap(), &down, &up, &x);
        assert!(got.max_abs_diff(&want) <= 1e-12);
        assert_eq!(l.trainable_param_count(&cfg), 3 + 3); // rank * (d_in + d_out)
    }

    #[test]
    fn ssf_identity_parameters_reproduce_base() {
        let mut l = layer(3, 4, 2, 2);
        let gamma = DenseMatrix::from_fn(4, 1, |_, _| 1.0);
        let beta = DenseMatrix::zeros(4, 1);
        let cfg = as_ssf(&mut l, &gamma, &beta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = DenseMatrix::gaussian(2, 6, 1.0, &mut rng);
        // The scale vector is explicitly zero, so the output matches exactly.
        let got = l.forward_adapter(&cfg, &x).unwrap();
        assert!(got.max_abs_diff(&l.forward_base(&x).unwrap()) <= 1e-15);
    }

    #[test]
    fn ssf_matches_scale_shift_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = layer(4, 4, 4, 2);
        let gamma = DenseMatrix::from_fn(4, 1, |_, _| 0.5 + rng.random::<f64>());
        let beta = DenseMatrix::gaussian(4, 1, 0.5, &mut rng);
        let cfg = as_ssf(&mut l, &gamma, &beta).unwrap();
        let x = DenseMatrix::gaussian(4, 7, 1.0, &mut rng);
        let got = l.forward_adapter(&cfg, &x).unwrap();
        let want = ssf_oracle(l.w0(), l.b0(), &gamma, &beta, &x);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn ssf_without_bias_matches_oracle_with_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = DenseMatrix::gaussian(3, 2, 1.0, &mut rng);
        let mut l = GloraLinear::new(w0, None, 2, &mut rng).unwrap();
        let gamma = DenseMatrix::from_fn(3, 1, |_, _| 0.5 + rng.random::<f64>());
        let beta = DenseMatrix::gaussian(3, 1, 0.5, &mut rng);
        let cfg = as_ssf(&mut l, &gamma, &beta).unwrap();
        let x = DenseMatrix::gaussian(2, 5, 1.0, &mut rng);
        let got = l.forward_adapter(&cfg, &x).unwrap();
        let want = ssf_oracle(l.w0(), None, &gamma, &beta, &x);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn prompt_matches_shifted_input_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut l = layer(6, 3, 4, 2);
        let c = DenseMatrix::gaussian(4, 1, 1.0, &mut rng);
        let cfg = as_prompt(&mut l, &c).unwrap();
        let x = DenseMatrix::gaussian(4, 6, 1.0, &mut rng);
        let got = l.forward_adapter(&cfg, &x).unwrap();
        let want = prompt_oracle(l.w0(), l.b0().unwrap(), &c, &x);
        assert!(got.max_abs_diff(&want) <= 1e-12);

        // Merged form: the weight is untouched, the offset lands in the bias.
        let merged = l.reparameterize(&cfg).unwrap();
        assert!(merged.w_uni.bits_eq(l.w0()));
        let b_expect = l.w0().matmul(&c).unwrap().add(l.b0().unwrap()).unwrap();
        assert!(merged.b_uni.unwrap().max_abs_diff(&b_expect) <= 1e-15);
    }

    #[test]
    fn zero_prompt_is_the_base_layer() {
        let mut l = layer(7, 3, 4, 2);
        let cfg = as_prompt(&mut l, &DenseMatrix::zeros(4, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = DenseMatrix::gaussian(4, 5, 1.0, &mut rng);
        let got = l.forward_adapter(&cfg, &x).unwrap();
        assert!(got.max_abs_diff(&l.forward_base(&x).unwrap()) <= 1e-15);
    }

    #[test]
    fn frozen_linear_degradation() {
        let l = layer(8, 3, 3, 2);
        let cfg = as_frozen_linear(&l);
        assert!(cfg.is_identity());
        assert_eq!(l.trainable_param_count(&cfg), 0);
        let merged = l.reparameterize(&cfg).unwrap();
        assert!(merged.w_uni.bits_eq(l.w0()));
        assert!(merged.b_uni.unwrap().bits_eq(l.b0().unwrap()));
    }

    #[test]
    fn degradations_validate_inside_the_full_search_space() {
        let space = crate::glora::LayerSearchSpace::full(&[2]).unwrap();
        let mut l = layer(9, 3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let configs = vec![
            as_lora(
                &mut l,
                2,
                &DenseMatrix::gaussian(3, 2, 1.0, &mut rng),
                &DenseMatrix::gaussian(2, 3, 1.0, &mut rng),
            )
            .unwrap(),
            as_ssf(
                &mut l,
                &DenseMatrix::from_fn(3, 1, |_, _| 1.1),
                &DenseMatrix::zeros(3, 1),
            )
            .unwrap(),
            as_prompt(&mut l, &DenseMatrix::zeros(3, 1)).unwrap(),
            as_frozen_linear(&l),
        ];
        for cfg in configs {
            assert!(space.validate(&cfg).is_empty(), "{cfg:?}");
        }
    }

    #[test]
    fn degraded_merge_preserves_the_oracle_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut l = layer(10, 4, 4, 3);
        let down = DenseMatrix::gaussian(4, 2, 0.7, &mut rng);
        let up = DenseMatrix::gaussian(2, 4, 0.7, &mut rng);
        let cfg = as_lora(&mut l, 2, &down, &up).unwrap();
        let x = DenseMatrix::gaussian(4, 8, 1.0, &mut rng);
        let merged = l.reparameterize(&cfg).unwrap().forward(&x).unwrap();
        let want = lora_oracle(l.w0(), l.b0().unwrap(), &down, &up, &x);
        assert!(merged.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn gradient_flows_through_degraded_configs() {
        // A degradation is trainable: its loss gradient with respect to the
        // active factors matches finite differences.
        let mut l = layer(11, 3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let down = DenseMatrix::gaussian(3, 1, 0.5, &mut rng);
        let up = DenseMatrix::gaussian(1, 3, 0.5, &mut rng);
        let cfg = as_lora(&mut l, 1, &down, &up).unwrap();
        let x = DenseMatrix::gaussian(3, 4, 1.0, &mut rng);
        let target = DenseMatrix::gaussian(3, 4, 1.0, &mut rng);

        let mut tape = crate::tensor::Tape::new();
        let binding = l.bind_on_tape(&mut tape, &cfg, true).unwrap();
        let x_id = tape.constant(x.clone());
        let t_id = tape.constant(target.clone());
        let y = l
            .forward_bound(&mut tape, &binding, Some(&cfg), x_id)
            .unwrap();
        let loss = tape.mse(y, t_id).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads
            .get(binding.factor_id(FactorSlot::ShiftDown).unwrap())
            .unwrap();

        let numeric = crate::tensor::finite_difference_grad(
            |probe: &DenseMatrix<f64>| {
                let mut probe_layer = l.clone();
                *probe_layer.factor_mut(FactorSlot::ShiftDown) = probe.clone();
                mse(&probe_layer.forward_adapter(&cfg, &x).unwrap(), &target).unwrap()
            },
            l.factor(FactorSlot::ShiftDown),
            1e-6,
        );
        let mut worst = 0.0f64;
        for (a, n) in analytic.data().iter().zip(numeric.data().iter()) {
            worst = worst.max((a - n).abs() / (1.0 + a.abs()));
        }
        assert!(worst <= 1e-4);
        // The role stays what the degradation claims.
        assert_eq!(
            cfg.get(SupportRole::WeightShift),
            SupportKind::Lora { rank: 1 }
        );
    }
}
