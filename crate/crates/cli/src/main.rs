use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stagewise::data::{
    load_cohort, split_folds, synthesize_cohort, textualize_tabular, write_cohort, DementiaLevel, Gender,
    SubjectRecord, Tabular, TemplateId,
};
use stagewise::harness::{self, tables, AblationResult, Checkpoint, EvalReport};
use stagewise::{Ablations, Scalar, TrainConfig};

#[derive(Parser)]
#[command(name = "stagewise", version, about = "Staged multimodal sub-type classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Volumes up to this many voxels are stored inline in the JSONL.
        #[arg(long, default_value_t = 0)]
        inline_max_voxels: usize,
    },
    /// Train on the training folds and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, value_parser = ["f32", "f64"], default_value = "f32")]
        dtype: String,
    },
    /// Evaluate a checkpoint on the full-modality test fold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        theta: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-subject stage trajectories as JSON.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at several thresholds.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        thetas: Vec<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate with components removed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: AblationFlags,
        /// Run the full model and every single-component ablation.
        #[arg(long, conflicts_with_all = ["no_disentangle", "no_alignment", "no_fusion", "no_progressive"])]
        all: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Show a textualization template, or train and evaluate with it.
    Template {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        id: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print the texts of the first N subjects instead of training.
        #[arg(long)]
        show: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Copy)]
struct AblationFlags {
    #[arg(long)]
    no_disentangle: bool,
    #[arg(long)]
    no_alignment: bool,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    no_progressive: bool,
}

impl From<AblationFlags> for Ablations {
    fn from(f: AblationFlags) -> Self {
        Ablations {
            no_disentangle: f.no_disentangle,
            no_alignment: f.no_alignment,
            no_fusion: f.no_fusion,
            no_progressive: f.no_progressive,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn load_data(path: &Path) -> Result<Vec<SubjectRecord>> {
    load_cohort(path).with_context(|| format!("loading cohort {}", path.display()))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn csv_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn train_cmd<T: Scalar>(cfg: &TrainConfig, cohort: &[SubjectRecord], out: &Path, history: Option<&Path>) -> Result<()> {
    let split = split_folds(cohort, cfg.seed)?;
    let outcome = harness::train::<T>(cohort, &split, cfg)?;
    outcome.checkpoint.save(out)?;
    log::info!(
        "saved epoch {} (best validation AUC {:?}) to {}",
        outcome.checkpoint.meta.epoch,
        outcome.checkpoint.meta.best_val_auc,
        out.display()
    );
    if let Some(h) = history {
        write_json(Some(h), &outcome.history)?;
    }
    Ok(())
}

fn eval_cmd<T: Scalar>(
    ckpt: &Path,
    cohort: &[SubjectRecord],
    theta: f64,
    report: Option<&Path>,
    traj: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(ckpt)?;
    let split = split_folds(cohort, ckpt.meta.config.seed)?;
    let test = harness::test_subjects(cohort, &split);
    let scored = harness::score_records(&ckpt.model, &test)?;
    let policy = ckpt.meta.config.effective_policy().with_threshold(theta);
    let r = harness::report_from_scores(&scored, &policy, ckpt.meta.config.auc_scores)?;
    write_json(report, &r)?;
    if let Some(p) = traj {
        write_json(Some(p), &harness::trajectories(&scored, &policy))?;
    }
    Ok(())
}

fn sweep_cmd<T: Scalar>(
    ckpt: &Path,
    cohort: &[SubjectRecord],
    thetas: &[f64],
    report: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(ckpt)?;
    let split = split_folds(cohort, ckpt.meta.config.seed)?;
    let test = harness::test_subjects(cohort, &split);
    let reports = harness::sweep_threshold(&ckpt, &test, thetas)?;
    if let Some(p) = csv {
        tables::write_threshold_table(csv_file(p)?, &reports)?;
    }
    write_json(report, &reports)
}

fn with_dtype<F32, F64>(ckpt: &Path, f32_fn: F32, f64_fn: F64) -> Result<()>
where
    F32: FnOnce() -> Result<()>,
    F64: FnOnce() -> Result<()>,
{
    let meta = harness::read_meta(ckpt)?;
    match meta.dtype.as_str() {
        d if d == f32::DTYPE => f32_fn(),
        d if d == f64::DTYPE => f64_fn(),
        other => bail!("unsupported checkpoint dtype {other}"),
    }
}

fn sample_tabular() -> Tabular {
    Tabular {
        age: Some(75),
        education: Some(16),
        gender: Some(Gender::Female),
        heart_attack: Some(false),
        hypertension: Some(true),
        stroke: Some(false),
        alcohol_abuse: Some(false),
        psychiatric_disorder: Some(false),
        blood_test: Some(1.25),
        dementia_level: Some(DementiaLevel::Cdr05),
    }
}

fn print_texts(title: &str, tabular: &Tabular, template: TemplateId) {
    let b = textualize_tabular(tabular, template);
    println!("{title}");
    for (name, t) in ["personal", "health", "dementia"].iter().zip(b.components()) {
        println!("  {name}: {}", t.unwrap_or("<absent>"));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            out,
            inline_max_voxels,
        } => {
            let cfg = load_config(config.as_deref())?;
            let cohort = synthesize_cohort(&cfg.synth, seed)?;
            let file = write_cohort(&cohort, &out, inline_max_voxels)?;
            log::info!("wrote {} subjects to {}", cohort.len(), file.display());
        }
        Command::Train {
            config,
            data,
            out,
            history,
            dtype,
        } => {
            let cfg = load_config(config.as_deref())?;
            let cohort = load_data(&data)?;
            match dtype.as_str() {
                "f64" => train_cmd::<f64>(&cfg, &cohort, &out, history.as_deref())?,
                _ => train_cmd::<f32>(&cfg, &cohort, &out, history.as_deref())?,
            }
        }
        Command::Eval {
            ckpt,
            data,
            theta,
            report,
            trajectories,
        } => {
            let cohort = load_data(&data)?;
            let (r, t) = (report.as_deref(), trajectories.as_deref());
            with_dtype(
                &ckpt,
                || eval_cmd::<f32>(&ckpt, &cohort, theta, r, t),
                || eval_cmd::<f64>(&ckpt, &cohort, theta, r, t),
            )?;
        }
        Command::Sweep {
            ckpt,
            data,
            thetas,
            report,
            csv,
        } => {
            let cohort = load_data(&data)?;
            let (r, c) = (report.as_deref(), csv.as_deref());
            with_dtype(
                &ckpt,
                || sweep_cmd::<f32>(&ckpt, &cohort, &thetas, r, c),
                || sweep_cmd::<f64>(&ckpt, &cohort, &thetas, r, c),
            )?;
        }
        Command::Ablate {
            config,
            data,
            flags,
            all,
            report,
            csv,
        } => {
            let cfg = load_config(config.as_deref())?;
            let cohort = load_data(&data)?;
            let split = split_folds(&cohort, cfg.seed)?;
            let runs: Vec<Ablations> = if all {
                let none = Ablations::default();
                vec![
                    none,
                    Ablations {
                        no_progressive: true,
                        ..none
                    },
                    Ablations {
                        no_alignment: true,
                        ..none
                    },
                    Ablations {
                        no_disentangle: true,
                        ..none
                    },
                    Ablations {
                        no_fusion: true,
                        ..none
                    },
                ]
            } else {
                vec![flags.into()]
            };
            let results: Vec<AblationResult> = runs
                .into_iter()
                .map(|a| harness::ablate::<f32>(&cohort, &split, &cfg, a))
                .collect::<stagewise::Result<_>>()?;
            if let Some(p) = csv {
                let rows: Vec<(String, EvalReport)> =
                    results.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
                tables::write_method_table(csv_file(&p)?, &rows)?;
            }
            write_json(report.as_deref(), &results)?;
        }
        Command::Template {
            id,
            config,
            data,
            show,
            report,
            csv,
        } => {
            let template = TemplateId::new(id)?;
            let Some(data) = data else {
                if show.is_some() {
                    bail!("--show needs --data");
                }
                print_texts("example", &sample_tabular(), template);
                return Ok(());
            };
            let cohort = load_data(&data)?;
            if let Some(n) = show {
                for r in cohort.iter().take(n) {
                    print_texts(&format!("{} ({})", r.id, r.label), &r.tabular, template);
                }
                return Ok(());
            }
            let mut cfg = load_config(config.as_deref())?;
            cfg.model.template_id = template;
            let split = split_folds(&cohort, cfg.seed)?;
            let outcome = harness::train::<f32>(&cohort, &split, &cfg)?;
            let test = harness::test_subjects(&cohort, &split);
            let r = harness::evaluate(&outcome.checkpoint, &test, cfg.policy.thresholds[0])?;
            if let Some(p) = csv {
                tables::write_template_table(csv_file(&p)?, &[(id, r.clone())])?;
            }
            write_json(report.as_deref(), &r)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
