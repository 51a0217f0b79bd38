//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use glora_core::glora::LayerSearchSpace;
use glora_core::supernet::{build_model, sample_subnet, ModelKind, ToyModel};
use glora_core::synth::{gen_pretrain_task, Dataset, TaskSpec};
use glora_core::{DenseMatrix, ModelConfig};

pub struct Fixture {
    pub model: ToyModel<f32>,
    pub spaces: Vec<LayerSearchSpace>,
    pub config: ModelConfig,
    pub input: DenseMatrix<f32>,
    pub data: Dataset<f32>,
}

/// A mini-attention supernet with a sampled configuration and a matching
/// regression task.
pub fn fixture() -> Fixture {
    let model = build_model::<f32>(ModelKind::MiniAttention, &[8, 2, 3], 4, 7).unwrap();
    let spaces: Vec<LayerSearchSpace> = (0..model.n_layers())
        .map(|_| LayerSearchSpace::full(&[4, 2]).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = sample_subnet(&spaces, &mut rng);
    let input = DenseMatrix::gaussian(model.input_dim(), 64, 1.0, &mut rng);
    let spec = TaskSpec::regression(model.input_dim(), model.output_dim(), 640);
    let (data, _) = gen_pretrain_task::<f32>(&spec, 9).unwrap();
    Fixture {
        model,
        spaces,
        config,
        input,
        data,
    }
}
