//! `glora report`: the trainable-parameter distribution across layer types
//! and the per-layer kind table for a configuration, as machine-readable
//! JSON.

use std::path::PathBuf;

use glora_core::glora::validate_model_config;
use glora_core::persist::{load_config_document, load_model};
use glora_core::report::RunReport;
use glora_core::tensor::{ElemType, Scalar};
use serde_json::json;

use super::common::{
    peek_elem, require_file, resolve_seed, usage, write_report, CliError, CommandTimer,
};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Trained supernet checkpoint.
    #[arg(long)]
    supernet: PathBuf,
    /// Configuration document to report on.
    #[arg(long)]
    config: PathBuf,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<(), CliError> {
    require_file(&args.supernet, "supernet checkpoint")?;
    require_file(&args.config, "configuration document")?;
    match peek_elem(&args.supernet)? {
        ElemType::F32 => run_typed::<f32>(args),
        ElemType::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<T: Scalar>(args: Args) -> Result<(), CliError> {
    let timer = CommandTimer::start();
    let (model, spaces) = load_model::<T>(&args.supernet)?;
    let doc = load_config_document(&args.config)?;
    let config = doc.model_config();

    let mut problems = Vec::new();
    if config.layers.len() != model.n_layers() {
        problems.push(format!(
            "config covers {} layers, checkpoint has {}",
            config.layers.len(),
            model.n_layers()
        ));
    } else if let Some(spaces) = &spaces {
        problems.extend(validate_model_config(spaces, &config));
    }
    if !problems.is_empty() {
        return Err(usage(format!(
            "invalid configuration:\n  {}",
            problems.join("\n  ")
        )));
    }

    let breakdown = glora_core::report::param_breakdown(&model, &config)?;
    let table = glora_core::report::layer_kind_table(&model, &config);

    println!(
        "trainable parameters by layer type (total {}):",
        breakdown.total
    );
    for (label, count) in &breakdown.by_layer_type {
        println!("  {label:<11} {count}");
    }
    for row in &table {
        println!(
            "layer {:>2} [{:<10}] scale={} shift={} prompt={} bias_scale={} bias_shift={} ({} params)",
            row.layer,
            row.label.name(),
            row.kinds.weight_scale,
            row.kinds.weight_shift,
            row.kinds.prompt,
            row.kinds.bias_scale,
            row.kinds.bias_shift,
            row.trainable_params
        );
    }

    let mut report = RunReport::new(
        "report",
        json!({
            "supernet": args.supernet,
            "config": args.config,
            "out": args.out,
        }),
        resolve_seed(None)?,
    );
    report.param_counts = Some(breakdown);
    report.layer_kinds = Some(table);
    timer.finish(&mut report);
    write_report(&report, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
