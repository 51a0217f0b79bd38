//! `glora gen-data`: synthetic pretrain and shifted tasks.
//!
//! A pretrain run writes the dataset plus a `<out>.teacher.glra` sidecar
//! holding the generating teacher. A shift run reads that teacher and writes
//! the dataset plus two sidecars: `<out>.oracle.json` (the configuration that
//! realizes the shift exactly, with its validation fitness) and
//! `<out>.oracle.glra` (the adapted teacher carrying the oracle values, so
//! every sidecar number is recomputable).

use std::path::PathBuf;

use clap::ValueEnum;
use glora_core::persist::{
    load_merged, save_config_document, save_dataset, save_merged, save_model, ConfigDocument,
    Provenance,
};
use glora_core::report::RunReport;
use glora_core::supernet::evaluate_model;
use glora_core::synth::{
    gen_pretrain_task, gen_shifted_task, ShiftKind, ShiftSpec, Split, TaskKind, TaskSpec,
    TeacherKind,
};
use glora_core::tensor::Scalar;
use serde::Serialize;
use serde_json::json;

use super::common::{
    parse_dims, require_file, resolve_seed, sidecar, usage, write_report, CliError, CommandTimer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFlag {
    Pretrain,
    Shift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindFlag {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherFlag {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftFlag {
    ScaleShift,
    LowRank,
    Prompt,
    Mixed,
}

impl From<ShiftFlag> for ShiftKind {
    fn from(f: ShiftFlag) -> Self {
        match f {
            ShiftFlag::ScaleShift => ShiftKind::ScaleShift,
            ShiftFlag::LowRank => ShiftKind::LowRank,
            ShiftFlag::Prompt => ShiftKind::Prompt,
            ShiftFlag::Mixed => ShiftKind::Mixed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionFlag {
    F32,
    F64,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Which stage of the synthetic protocol to generate.
    #[arg(long, value_enum)]
    task: TaskFlag,
    /// Regression targets or quantile-binned class labels.
    #[arg(long, value_enum, default_value = "regression")]
    kind: KindFlag,
    /// Teacher family for pretrain tasks.
    #[arg(long, value_enum, default_value = "linear")]
    teacher: TeacherFlag,
    /// Teacher dimensions for pretrain tasks: "d_in,d_out" for the linear
    /// teacher, "d_in,hidden,d_out" for the two-layer teacher.
    #[arg(long)]
    dims: Option<String>,
    /// Sample count.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Class count for classification tasks.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Standard deviation of the Gaussian target noise.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Seed; falls back to GLORA_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Teacher transformation for shift tasks.
    #[arg(long, value_enum)]
    shift: Option<ShiftFlag>,
    /// Scale of the shift parameters; zero means the identity shift.
    #[arg(long, default_value_t = 1.0)]
    magnitude: f64,
    /// Rank of the weight delta for low-rank and mixed shifts.
    #[arg(long, default_value_t = 2)]
    shift_rank: usize,
    /// Seed of the shift parameters themselves (default: seed + 1).
    #[arg(long)]
    shift_seed: Option<u64>,
    /// Teacher checkpoint from the pretrain run (shift tasks).
    #[arg(long)]
    teacher_file: Option<PathBuf>,
    /// Element width of the generated tensors.
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionFlag,
    /// Dataset output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<(), CliError> {
    match args.precision {
        PrecisionFlag::F32 => run_typed::<f32>(args),
        PrecisionFlag::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<T: Scalar>(args: Args) -> Result<(), CliError> {
    let timer = CommandTimer::start();
    let seed = resolve_seed(args.seed)?;
    let task_kind = match args.kind {
        KindFlag::Regression => TaskKind::Regression,
        KindFlag::Classification => TaskKind::Classification,
    };

    match args.task {
        TaskFlag::Pretrain => {
            let dims_text = args
                .dims
                .as_deref()
                .ok_or_else(|| usage("--dims is required for pretrain tasks"))?;
            let dims = parse_dims(dims_text, "--dims")?;
            let (teacher_kind, d_in, hidden, d_out) = match (args.teacher, dims.as_slice()) {
                (TeacherFlag::Linear, [d_in, d_out]) => (TeacherKind::Linear, *d_in, 0, *d_out),
                (TeacherFlag::Mlp, [d_in, hidden, d_out]) => {
                    (TeacherKind::Mlp, *d_in, *hidden, *d_out)
                }
                (TeacherFlag::Linear, _) => {
                    return Err(usage("linear teacher expects --dims \"d_in,d_out\""))
                }
                (TeacherFlag::Mlp, _) => {
                    return Err(usage("mlp teacher expects --dims \"d_in,hidden,d_out\""))
                }
            };
            let spec = TaskSpec {
                d_in,
                d_out,
                n: args.n,
                teacher: teacher_kind,
                task: task_kind,
                n_classes: args.classes,
                hidden,
                noise_std: args.noise,
            };
            let (dataset, teacher) = gen_pretrain_task::<T>(&spec, seed)?;
            let bytes = save_dataset(&dataset, &args.out)?;
            let teacher_path = sidecar(&args.out, ".teacher.glra");
            save_merged(&teacher, &teacher_path)?;

            let mut report = RunReport::new(
                "gen-data",
                json!({
                    "task": "pretrain",
                    "kind": args.kind,
                    "teacher": args.teacher,
                    "dims": dims,
                    "n": args.n,
                    "noise": args.noise,
                    "out": args.out,
                    "teacher_file": teacher_path,
                }),
                seed,
            );
            timer.finish(&mut report);
            write_report(&report, &super::common::report_path(&args.out))?;
            println!(
                "wrote {} ({bytes} bytes, {} samples) and teacher sidecar {}",
                args.out.display(),
                dataset.n(),
                teacher_path.display()
            );
        }
        TaskFlag::Shift => {
            let shift_flag = args
                .shift
                .ok_or_else(|| usage("--shift is required for shift tasks"))?;
            let teacher_path = args
                .teacher_file
                .clone()
                .ok_or_else(|| usage("--teacher-file is required for shift tasks"))?;
            require_file(&teacher_path, "teacher checkpoint")?;
            let teacher = load_merged::<T>(&teacher_path)?;
            let shift = ShiftSpec {
                kind: shift_flag.into(),
                magnitude: args.magnitude,
                rank: args.shift_rank,
                seed: args.shift_seed.unwrap_or_else(|| seed.wrapping_add(1)),
            };
            let (dataset, oracle) = gen_shifted_task(
                &teacher,
                &shift,
                task_kind,
                args.classes,
                args.n,
                args.noise,
                seed,
            )?;
            let bytes = save_dataset(&dataset, &args.out)?;

            // Oracle sidecars: the config document with its measured
            // validation fitness, and the adapted teacher it applies to.
            let metrics =
                evaluate_model(&oracle.model, Some(&oracle.config), &dataset, Split::Val)?;
            let fitness = match task_kind {
                TaskKind::Regression => -metrics.loss,
                TaskKind::Classification => metrics.accuracy.unwrap_or(0.0),
            };
            let oracle_model_path = sidecar(&args.out, ".oracle.glra");
            save_model(&oracle.model, None, &oracle_model_path)?;
            let doc = ConfigDocument {
                layers: oracle.config.layers.clone(),
                provenance: Provenance {
                    seed: shift.seed,
                    generation: 0,
                    fitness: Some(fitness),
                    param_count: Some(oracle.model.trainable_param_count(&oracle.config)),
                },
                history: None,
            };
            let oracle_cfg_path = sidecar(&args.out, ".oracle.json");
            save_config_document(&doc, &oracle_cfg_path)?;

            let mut report = RunReport::new(
                "gen-data",
                json!({
                    "task": "shift",
                    "kind": args.kind,
                    "shift": shift_flag,
                    "magnitude": args.magnitude,
                    "shift_rank": args.shift_rank,
                    "shift_seed": shift.seed,
                    "n": args.n,
                    "noise": args.noise,
                    "teacher_file": teacher_path,
                    "out": args.out,
                    "oracle_config": oracle_cfg_path,
                    "oracle_model": oracle_model_path,
                    "oracle_val_loss": metrics.loss,
                }),
                seed,
            );
            timer.finish(&mut report);
            write_report(&report, &super::common::report_path(&args.out))?;
            println!(
                "wrote {} ({bytes} bytes), oracle val loss {:.6e}",
                args.out.display(),
                metrics.loss
            );
        }
    }
    Ok(())
}
