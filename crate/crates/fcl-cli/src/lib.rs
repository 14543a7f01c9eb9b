//! `fclcod`: weakly-supervised camouflaged-object detection on synthetic
//! data. Subcommands cover dataset generation, the two training stages,
//! pseudo-label export, evaluation, and the gradient verification sweep.

pub mod pipeline;

use std::path::PathBuf;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use fcl_core::config::RunConfig;
use fcl_core::data::GeneratorParams;
use fcl_core::triadic::Branch;

#[derive(Parser)]
#[command(name = "fclcod", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic camouflage dataset
    GenData(GenDataArgs),
    /// Stage-1 triadic self-training of the promptable segmenter
    TrainStage1(TrainStage1Args),
    /// Export pseudo-label masks from a stage-1 checkpoint
    MakePseudo(MakePseudoArgs),
    /// Stage-2 detector training on pseudo-labels
    TrainStage2(TrainStage2Args),
    /// Compare prediction maps against ground-truth masks
    Eval(EvalArgs),
    /// Finite-difference verification of every gradient path
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 250)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.25)]
    pub difficulty: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    pub val_frac: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainStage1Args {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest path
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from a checkpoint written under the same config
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Disable one component: fora or gcl
    #[arg(long)]
    pub ablate: Option<String>,
    /// Write per-epoch Grad-CAM and prototype-similarity dumps
    #[arg(long, default_value_t = false)]
    pub dump_diagnostics: bool,
}

#[derive(Args)]
pub struct MakePseudoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test, or all
    #[arg(long, default_value = "train")]
    pub split: String,
    /// anchor, student, or teacher
    #[arg(long, default_value = "teacher")]
    pub branch: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct TrainStage2Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of stage-1 pseudo-label masks
    #[arg(long)]
    pub pseudo: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Disable one component: msfa
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write the report to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Check only the tensor primitives, skipping composed forwards
    #[arg(long, default_value_t = false)]
    pub primitives_only: bool,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    })
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let params = GeneratorParams {
                count: a.count,
                size: a.size,
                difficulty: a.difficulty,
                seed: a.seed,
                test_fraction: a.test_frac,
                val_fraction: a.val_frac,
            };
            let manifest = pipeline::gen_data(&params, &a.out)?;
            println!("wrote {} samples; manifest at {}", a.count, manifest.display());
        }
        Command::TrainStage1(a) => {
            let cfg = load_config(&a.config)?;
            let (ablate_fora, ablate_gcl) = match a.ablate.as_deref() {
                None => (false, false),
                Some("fora") => (true, false),
                Some("gcl") => (false, true),
                Some(other) => bail!("stage 1 can ablate 'fora' or 'gcl', not '{other}'"),
            };
            let outputs = pipeline::train_stage1(&pipeline::Stage1Params {
                cfg: &cfg,
                manifest_path: &a.data,
                seed: a.seed,
                out: &a.out,
                resume: a.resume.as_deref(),
                ablate_fora,
                ablate_gcl,
                dump_diagnostics: a.dump_diagnostics,
            })?;
            println!(
                "stage1 done; checkpoint {} log {}",
                outputs.final_checkpoint.display(),
                outputs.log_path.display()
            );
        }
        Command::MakePseudo(a) => {
            let n = pipeline::make_pseudo(&pipeline::MakePseudoParams {
                checkpoint: &a.checkpoint,
                manifest_path: &a.data,
                splits: pipeline::parse_splits(&a.split)?,
                branch: Branch::parse(&a.branch)?,
                out: &a.out,
                workers: a.workers,
            })?;
            println!("wrote {n} pseudo-labels to {}", a.out.display());
        }
        Command::TrainStage2(a) => {
            let cfg = load_config(&a.config)?;
            let ablate_msfa = match a.ablate.as_deref() {
                None => false,
                Some("msfa") => true,
                Some(other) => bail!("stage 2 can ablate 'msfa', not '{other}'"),
            };
            let outputs = pipeline::train_stage2(&pipeline::Stage2Params {
                cfg: &cfg,
                manifest_path: &a.data,
                pseudo_dir: &a.pseudo,
                seed: a.seed,
                out: &a.out,
                resume: a.resume.as_deref(),
                ablate_msfa,
                workers: a.workers,
            })?;
            println!(
                "stage2 done; checkpoint {} predictions {}",
                outputs.final_checkpoint.display(),
                outputs.pred_dir.display()
            );
        }
        Command::Eval(a) => {
            let (_summary, report) = pipeline::eval_dirs(&pipeline::EvalParams {
                pred_dir: &a.pred,
                gt_dir: &a.gt,
                out: a.out.as_deref(),
                workers: a.workers,
            })?;
            print!("{report}");
        }
        Command::GradCheck(a) => {
            let rendered = pipeline::grad_check(a.seed, a.configs, a.tol, a.primitives_only)?;
            print!("{rendered}");
            println!("gradient check PASSED (tol {:.1e}, {} configs/op)", a.tol, a.configs);
        }
    }
    Ok(())
}
