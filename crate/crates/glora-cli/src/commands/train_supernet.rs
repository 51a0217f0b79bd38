//! `glora train-supernet`: load a frozen base, rebuild the support factors at
//! the requested rank cap, and train the multi-path supernet by random-subnet
//! sampling. The saved checkpoint carries the per-layer search spaces, and
//! its base tensors are bitwise those of the input checkpoint.

use std::path::PathBuf;

use glora_core::glora::LayerSearchSpace;
use glora_core::persist::{load_dataset, load_model, save_model};
use glora_core::report::RunReport;
use glora_core::supernet::{reinit_supernet_factors, train_supernet, TrainSchedule};
use glora_core::tensor::{ElemType, Scalar};
use serde_json::json;

use super::common::{
    parse_dims, peek_elem, report_path, require_file, resolve_seed, usage, write_report, CliError,
    CommandTimer,
};
use super::pretrain::split_metrics;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Frozen base checkpoint (from `pretrain`).
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuning dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    /// Low-rank ranks admitted in the search space, e.g. "8,4".
    #[arg(long, default_value = "8,4")]
    ranks: String,
    /// Rank cap of the stored factors; defaults to the largest entry of
    /// --ranks. Every rank must stay within it.
    #[arg(long)]
    rmax: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Supernet checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<(), CliError> {
    require_file(&args.base, "base checkpoint")?;
    require_file(&args.data, "dataset")?;
    match peek_elem(&args.base)? {
        ElemType::F32 => run_typed::<f32>(args),
        ElemType::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<T: Scalar>(args: Args) -> Result<(), CliError> {
    let timer = CommandTimer::start();
    let seed = resolve_seed(args.seed)?;
    let ranks = parse_dims(&args.ranks, "--ranks")?;
    let r_max = args
        .rmax
        .unwrap_or_else(|| ranks.iter().copied().max().unwrap_or(1));
    if let Some(&bad) = ranks.iter().find(|&&r| r > r_max) {
        return Err(usage(format!(
            "rank {bad} exceeds the configured cap {r_max}"
        )));
    }

    let (base, _) = load_model::<T>(&args.base)?;
    let data = load_dataset::<T>(&args.data)?;

    // Fresh factors at the requested cap over the loaded frozen base.
    let mut model = reinit_supernet_factors(&base, r_max, seed)?;

    let spaces: Vec<LayerSearchSpace> = (0..model.n_layers())
        .map(|_| LayerSearchSpace::full(&ranks))
        .collect::<glora_core::Result<_>>()?;

    let schedule = TrainSchedule {
        epochs: args.epochs,
        batch_size: args.batch,
        peak_lr: args.lr,
        weight_decay: args.wd,
        seed,
    };
    let log = train_supernet(&mut model, &spaces, &data, &schedule)?;
    let bytes = save_model(&model, Some(&spaces), &args.out)?;

    let accounting = glora_core::evolution::search_space_size(&spaces);
    let mut report = RunReport::new(
        "train-supernet",
        json!({
            "base": args.base,
            "data": args.data,
            "epochs": args.epochs,
            "batch": args.batch,
            "lr": args.lr,
            "wd": args.wd,
            "ranks": ranks,
            "rmax": r_max,
            "out": args.out,
        }),
        seed,
    );
    report.metrics = Some(split_metrics(&model, None, &data)?);
    report.epoch_losses = Some(log.epoch_losses.clone());
    report.search_space = Some(accounting.into());
    timer.finish(&mut report);
    write_report(&report, &report_path(&args.out))?;

    println!(
        "wrote {} ({bytes} bytes) after {} epochs over {} layers",
        args.out.display(),
        args.epochs,
        model.n_layers()
    );
    Ok(())
}
