//! `glora search`: evolutionary search over the supernet's per-layer search
//! spaces, scored on the dataset's validation split. Writes the best
//! configuration as a JSON document with its provenance and the
//! per-generation history.

use std::path::PathBuf;

use glora_core::evolution::{evolve, search_space_size, EvoSettings};
use glora_core::persist::{
    load_dataset, load_model, save_config_document, ConfigDocument, Provenance,
};
use glora_core::report::RunReport;
use glora_core::tensor::{ElemType, Scalar};
use serde_json::json;

use super::common::{
    peek_elem, report_path, require_file, resolve_seed, usage, write_report, CliError, CommandTimer,
};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Trained supernet checkpoint (must carry its search spaces).
    #[arg(long)]
    supernet: PathBuf,
    /// Dataset whose validation split scores fitness.
    #[arg(long)]
    val: PathBuf,
    /// Genomes per breeding operator per generation.
    #[arg(long, default_value_t = 50)]
    population: usize,
    #[arg(long, default_value_t = 20)]
    generations: usize,
    /// Parents kept per generation.
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// Crossover probability per pairing.
    #[arg(long, default_value_t = 0.2)]
    pc: f64,
    /// Mutation probability per gene.
    #[arg(long, default_value_t = 0.2)]
    pm: f64,
    /// Fitness evaluation threads; the thread count never changes results.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Best-configuration document output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<(), CliError> {
    require_file(&args.supernet, "supernet checkpoint")?;
    require_file(&args.val, "validation dataset")?;
    match peek_elem(&args.supernet)? {
        ElemType::F32 => run_typed::<f32>(args),
        ElemType::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<T: Scalar>(args: Args) -> Result<(), CliError> {
    let timer = CommandTimer::start();
    let seed = resolve_seed(args.seed)?;
    let (supernet, spaces) = load_model::<T>(&args.supernet)?;
    let spaces = spaces.ok_or_else(|| {
        usage(format!(
            "{} carries no search spaces; run train-supernet first",
            args.supernet.display()
        ))
    })?;
    let data = load_dataset::<T>(&args.val)?;
    if args.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }

    let settings = EvoSettings {
        population: args.population,
        generations: args.generations,
        parents: args.topk,
        crossover_prob: args.pc,
        mutation_prob: args.pm,
        seed,
        threads: args.threads,
    };
    let outcome = evolve(&supernet, &spaces, &data, &settings)?;
    let config = outcome.best.genome.decode(&spaces)?;

    let doc = ConfigDocument {
        layers: config.layers.clone(),
        provenance: Provenance {
            seed,
            generation: settings.generations,
            fitness: Some(outcome.best.fitness),
            param_count: Some(outcome.best.param_count),
        },
        history: Some(outcome.history.clone()),
    };
    let bytes = save_config_document(&doc, &args.out)?;

    let mut report = RunReport::new(
        "search",
        json!({
            "supernet": args.supernet,
            "val": args.val,
            "population": args.population,
            "generations": args.generations,
            "topk": args.topk,
            "pc": args.pc,
            "pm": args.pm,
            "threads": args.threads,
            "out": args.out,
        }),
        seed,
    );
    report.history = Some(outcome.history.clone());
    report.search_space = Some(search_space_size(&spaces).into());
    report.param_counts = Some(glora_core::report::param_breakdown(&supernet, &config)?);
    report.layer_kinds = Some(glora_core::report::layer_kind_table(&supernet, &config));
    timer.finish(&mut report);
    write_report(&report, &report_path(&args.out))?;

    println!(
        "wrote {} ({bytes} bytes): fitness {:.6}, {} trainable params, {} evaluations",
        args.out.display(),
        outcome.best.fitness,
        outcome.best.param_count,
        outcome.history.iter().map(|h| h.evaluations).sum::<usize>()
    );
    Ok(())
}
