//! `glora eval`: split metrics for a checkpoint on a dataset. A plain or
//! supernet checkpoint evaluates on the base path, or on the adapter path
//! when `--config` names a configuration; a merged checkpoint evaluates its
//! folded weights directly.

use std::collections::BTreeMap;
use std::path::PathBuf;

use glora_core::glora::validate_model_config;
use glora_core::persist::{load_config_document, load_dataset, load_merged, load_model, peek};
use glora_core::report::RunReport;
use glora_core::supernet::evaluate_merged;
use glora_core::synth::Split;
use glora_core::tensor::{ElemType, Scalar};
use serde_json::json;

use super::common::{require_file, resolve_seed, usage, write_report, CliError, CommandTimer};
use super::pretrain::split_metrics;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Checkpoint to evaluate (plain, supernet, or merged).
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Evaluate the adapter path under this configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<(), CliError> {
    require_file(&args.ckpt, "checkpoint")?;
    require_file(&args.data, "dataset")?;
    match peek(&args.ckpt)?.elem {
        ElemType::F32 => run_typed::<f32>(args),
        ElemType::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<T: Scalar>(args: Args) -> Result<(), CliError> {
    let timer = CommandTimer::start();
    let seed = resolve_seed(None)?;
    let data = load_dataset::<T>(&args.data)?;
    let merged_ckpt = peek(&args.ckpt)?.merged;

    let mut report = RunReport::new(
        "eval",
        json!({
            "ckpt": args.ckpt,
            "data": args.data,
            "config": args.config,
            "merged": merged_ckpt,
            "out": args.out,
        }),
        seed,
    );

    let metrics = if merged_ckpt {
        if args.config.is_some() {
            return Err(usage("--config does not apply to a merged checkpoint"));
        }
        let model = load_merged::<T>(&args.ckpt)?;
        if model.input_dim() != data.feature_dim() {
            return Err(glora_core::Error::Format(format!(
                "checkpoint input dim {} does not match dataset feature dim {}",
                model.input_dim(),
                data.feature_dim()
            ))
            .into());
        }
        let mut out = BTreeMap::new();
        for (split, name) in [
            (Split::Train, "train"),
            (Split::Val, "val"),
            (Split::Test, "test"),
        ] {
            if !data.split_indices(split).is_empty() {
                out.insert(name.to_string(), evaluate_merged(&model, &data, split)?);
            }
        }
        out
    } else {
        let (model, spaces) = load_model::<T>(&args.ckpt)?;
        if model.input_dim() != data.feature_dim() {
            return Err(glora_core::Error::Format(format!(
                "checkpoint input dim {} does not match dataset feature dim {}",
                model.input_dim(),
                data.feature_dim()
            ))
            .into());
        }
        let config = match &args.config {
            Some(path) => {
                require_file(path, "configuration document")?;
                let doc = load_config_document(path)?;
                let config = doc.model_config();
                if config.layers.len() != model.n_layers() {
                    return Err(glora_core::Error::Format(format!(
                        "config covers {} layers, checkpoint has {}",
                        config.layers.len(),
                        model.n_layers()
                    ))
                    .into());
                }
                if let Some(spaces) = &spaces {
                    let problems = validate_model_config(spaces, &config);
                    if !problems.is_empty() {
                        return Err(usage(format!(
                            "configuration is invalid for this checkpoint:\n  {}",
                            problems.join("\n  ")
                        )));
                    }
                }
                Some(config)
            }
            None => None,
        };
        if let Some(config) = &config {
            report.param_counts = Some(glora_core::report::param_breakdown(&model, config)?);
            report.layer_kinds = Some(glora_core::report::layer_kind_table(&model, config));
        }
        split_metrics(&model, config.as_ref(), &data)?
    };

    for (name, m) in &metrics {
        match m.accuracy {
            Some(acc) => {
                println!(
                    "{name}: loss {:.6e}, accuracy {:.4} ({} samples)",
                    m.loss, acc, m.count
                )
            }
            None => println!("{name}: loss {:.6e} ({} samples)", m.loss, m.count),
        }
    }
    report.metrics = Some(metrics);
    timer.finish(&mut report);
    write_report(&report, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
