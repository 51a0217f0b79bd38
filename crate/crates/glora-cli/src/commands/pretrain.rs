//! `glora pretrain`: train a plain model (weights and biases, no adapters) on
//! a dataset and save it as the frozen base for later fine-tuning.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::ValueEnum;
use glora_core::persist::{load_dataset, save_model};
use glora_core::report::RunReport;
use glora_core::supernet::{build_model, evaluate_model, train_base, ModelKind, TrainSchedule};
use glora_core::synth::{Dataset, Split};
use glora_core::tensor::{ElemType, Scalar};
use serde::Serialize;
use serde_json::json;

use super::common::{
    parse_dims, peek_elem, report_path, require_file, resolve_seed, usage, write_report, CliError,
    CommandTimer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFlag {
    Mlp,
    MiniAttention,
}

impl From<ModelFlag> for ModelKind {
    fn from(f: ModelFlag) -> Self {
        match f {
            ModelFlag::Mlp => ModelKind::Mlp,
            ModelFlag::MiniAttention => ModelKind::MiniAttention,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Model family to build.
    #[arg(long, value_enum, default_value = "mlp")]
    model: ModelFlag,
    /// Model dimensions. Default for the MLP is "[feature_dim,target_dim]";
    /// mini-attention requires "embed,tokens,outputs".
    #[arg(long)]
    dims: Option<String>,
    /// Rank cap of the (untrained) support factors stored in the checkpoint.
    #[arg(long, default_value_t = 4)]
    rmax: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    wd: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Base checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<(), CliError> {
    require_file(&args.data, "dataset")?;
    match peek_elem(&args.data)? {
        ElemType::F32 => run_typed::<f32>(args),
        ElemType::F64 => run_typed::<f64>(args),
    }
}

/// Metrics over every non-empty split.
pub fn split_metrics<T: Scalar>(
    model: &glora_core::supernet::ToyModel<T>,
    config: Option<&glora_core::ModelConfig>,
    data: &Dataset<T>,
) -> Result<BTreeMap<String, glora_core::supernet::SplitMetrics>, CliError> {
    let mut out = BTreeMap::new();
    for (split, name) in [
        (Split::Train, "train"),
        (Split::Val, "val"),
        (Split::Test, "test"),
    ] {
        if !data.split_indices(split).is_empty() {
            out.insert(
                name.to_string(),
                evaluate_model(model, config, data, split)?,
            );
        }
    }
    Ok(out)
}

fn run_typed<T: Scalar>(args: Args) -> Result<(), CliError> {
    let timer = CommandTimer::start();
    let seed = resolve_seed(args.seed)?;
    let data = load_dataset::<T>(&args.data)?;

    let kind: ModelKind = args.model.into();
    let dims = match (&args.dims, kind) {
        (Some(text), _) => parse_dims(text, "--dims")?,
        (None, ModelKind::Mlp) => vec![data.feature_dim(), data.target_dim()],
        (None, ModelKind::MiniAttention) => {
            return Err(usage(
                "mini-attention needs --dims \"embed,tokens,outputs\"",
            ))
        }
    };

    let mut model = build_model::<T>(kind, &dims, args.rmax, seed)?;
    if model.input_dim() != data.feature_dim() {
        return Err(usage(format!(
            "model input dim {} does not match dataset feature dim {}",
            model.input_dim(),
            data.feature_dim()
        )));
    }
    let schedule = TrainSchedule {
        epochs: args.epochs,
        batch_size: args.batch,
        peak_lr: args.lr,
        weight_decay: args.wd,
        seed,
    };
    let log = train_base(&mut model, &data, &schedule)?;
    let bytes = save_model(&model, None, &args.out)?;

    let mut report = RunReport::new(
        "pretrain",
        json!({
            "data": args.data,
            "model": args.model,
            "dims": dims,
            "rmax": args.rmax,
            "epochs": args.epochs,
            "batch": args.batch,
            "lr": args.lr,
            "wd": args.wd,
            "out": args.out,
        }),
        seed,
    );
    report.metrics = Some(split_metrics(&model, None, &data)?);
    report.epoch_losses = Some(log.epoch_losses.clone());
    timer.finish(&mut report);
    write_report(&report, &report_path(&args.out))?;

    let last = log.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "wrote {} ({bytes} bytes) after {} epochs, final train loss {last:.6e}",
        args.out.display(),
        args.epochs
    );
    Ok(())
}
