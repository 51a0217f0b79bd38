//! `glora merge`: fold a searched configuration into plain affine weights.
//! The merged checkpoint holds exactly one weight (and bias) per layer — the
//! base model's shapes, nothing more.

use std::path::PathBuf;

use glora_core::glora::validate_model_config;
use glora_core::persist::{load_config_document, load_model, save_merged};
use glora_core::report::RunReport;
use glora_core::tensor::{ElemType, Scalar};
use serde_json::json;

use super::common::{
    peek_elem, report_path, require_file, resolve_seed, write_report, CliError, CommandTimer,
};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Trained supernet checkpoint.
    #[arg(long)]
    supernet: PathBuf,
    /// Configuration document (from `search`).
    #[arg(long)]
    config: PathBuf,
    /// Merged checkpoint output path.
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
    let (supernet, spaces) = load_model::<T>(&args.supernet)?;
    let doc = load_config_document(&args.config)?;
    let config = doc.model_config();

    if config.layers.len() != supernet.n_layers() {
        return Err(glora_core::Error::Format(format!(
            "config covers {} layers, checkpoint has {}",
            config.layers.len(),
            supernet.n_layers()
        ))
        .into());
    }
    if let Some(spaces) = &spaces {
        let problems = validate_model_config(spaces, &config);
        if !problems.is_empty() {
            return Err(super::common::usage(format!(
                "configuration is invalid for this checkpoint:\n  {}",
                problems.join("\n  ")
            )));
        }
    }

    let merged = supernet.merge(&config)?;
    let bytes = save_merged(&merged, &args.out)?;

    let mut report = RunReport::new(
        "merge",
        json!({
            "supernet": args.supernet,
            "config": args.config,
            "out": args.out,
            "merged_params": merged.param_count(),
            "base_params": supernet.base_param_count(),
        }),
        resolve_seed(None)?,
    );
    report.param_counts = Some(glora_core::report::param_breakdown(&supernet, &config)?);
    report.layer_kinds = Some(glora_core::report::layer_kind_table(&supernet, &config));
    timer.finish(&mut report);
    write_report(&report, &report_path(&args.out))?;

    println!(
        "wrote {} ({bytes} bytes): {} merged parameters, identical to the base model's {}",
        args.out.display(),
        merged.param_count(),
        supernet.base_param_count()
    );
    Ok(())
}
