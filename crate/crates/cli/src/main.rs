//! `vlaforge` command-line interface.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `ablate`, `viz`. Flags override
//! config-file values, which override defaults. Exit codes: 0 success,
//! 2 validation/config error, 1 anything else.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vlaforge_core::config::RunConfig;
use vlaforge_core::error::Error as CoreError;
use vlaforge_core::evalkit;
use vlaforge_core::pipeline::{ModelVariant, Trainer, VlaForgeModel};
use vlaforge_core::synthgen::{build_benchmark, Dataset, Split};
use vlaforge_core::vla::{FAKE_TEMPLATE, REAL_TEMPLATE};

#[derive(Parser)]
#[command(name = "vlaforge", about = "Deepfake-video-detection toolkit on a synthetic benchmark")]
struct Cli {
    /// Print the prompt templates verbatim and continue.
    #[arg(long, global = true)]
    show_prompts: bool,

    /// Run configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fusion weight override.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dataset directory override.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData,
    /// Train a model variant on the benchmark's train split.
    Train {
        /// Resume from a trainer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a benchmark split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: `test` (default) or `train`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate the variant ladder across seeds.
    Ablate {
        /// Comma-separated list of seeds.
        #[arg(long, default_value = "1024,0,1111")]
        seeds: String,
        /// Comma-separated list of variants.
        #[arg(long, default_value = "Base,T1,T2,T3,T4")]
        variants: String,
    },
    /// Export heatmaps for one frame of the benchmark.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame selector `<video_id>/<frame_index>`.
        #[arg(long)]
        frame_id: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<CoreError>() {
                Some(CoreError::Validation(_) | CoreError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(alpha) = cli.alpha {
        config.alpha = alpha;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(dataset) = &cli.dataset {
        config.dataset = dataset.clone();
    }
    let config = config.normalized();
    config.validate()?;
    println!("effective-config: {}", config.effective_json());
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.show_prompts {
        println!("real prompt: {REAL_TEMPLATE}");
        println!("fake prompt: {FAKE_TEMPLATE}");
    }
    let config = load_config(&cli)?;
    match &cli.command {
        Command::GenData => gen_data(&config),
        Command::Train { resume } => train(&config, resume.as_deref()),
        Command::Eval { checkpoint, split } => eval(&config, checkpoint, split),
        Command::Ablate { seeds, variants } => ablate(&config, seeds, variants),
        Command::Viz { checkpoint, frame_id } => viz(&config, checkpoint, frame_id),
    }
}

fn gen_data(config: &RunConfig) -> anyhow::Result<()> {
    let dataset = build_benchmark(&config.data, config.seed, &config.dataset)?;
    let frames: usize = dataset.records.iter().map(|r| r.num_frames).sum();
    println!(
        "generated {} videos / {} frames at {}",
        dataset.records.len(),
        frames,
        config.dataset.display()
    );
    Ok(())
}

fn train(config: &RunConfig, resume: Option<&std::path::Path>) -> anyhow::Result<()> {
    let dataset = Dataset::open(&config.dataset)?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::load(path)?;
            println!("resumed from {} at epoch {}", path.display(), t.epochs_done);
            t
        }
        None => {
            let model = VlaForgeModel::new(config.model_config(), config.seed)?;
            Trainer::new(model, config.optimizer_profile()?, config.seed)
        }
    };
    println!(
        "training variant {} ({} trainable scalars)",
        trainer.model.config.variant.as_str(),
        trainer.model.num_trainable_scalars()
    );
    let contexts = trainer.prepare_contexts(&dataset)?;
    println!("prepared {} train frames", contexts.len());

    std::fs::create_dir_all(&config.out)?;
    let log_path = config.out.join("loss_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)?;
    trainer.run(&contexts, |entry| {
        let line = serde_json::to_string(entry).expect("loss entry serializes");
        println!("{line}");
        writeln!(log_file, "{line}").expect("loss log writable");
    })?;

    let ckpt_path = config.out.join("checkpoint.vlfg");
    trainer.save(&ckpt_path)?;
    println!("checkpoint: {}", ckpt_path.display());
    println!("loss log: {}", log_path.display());
    Ok(())
}

fn eval(config: &RunConfig, checkpoint: &std::path::Path, split: &str) -> anyhow::Result<()> {
    let split = match split.to_ascii_lowercase().as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => return Err(CoreError::Validation(format!("unknown split {other}")).into()),
    };
    let dataset = Dataset::open(&config.dataset)?;
    let model = VlaForgeModel::load(checkpoint)?;
    let report = evalkit::evaluate(&model, &dataset, split, config.alpha)?;
    println!(
        "frame AUROC {:.4}  video AUROC {:.4}  ({} frames, {} videos, alpha {})",
        report.frame_auroc, report.video_auroc, report.n_frames, report.n_videos, report.alpha
    );
    for (family, auc) in &report.per_family {
        println!("  family {family}: frame AUROC {auc:.4}");
    }
    std::fs::create_dir_all(&config.out)?;
    let path = config.out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("report: {}", path.display());
    Ok(())
}

fn ablate(config: &RunConfig, seeds: &str, variants: &str) -> anyhow::Result<()> {
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CoreError::Validation(format!("bad --seeds: {e}")))?;
    let variants: Vec<ModelVariant> = variants
        .split(',')
        .map(|s| s.trim().parse::<ModelVariant>())
        .collect::<vlaforge_core::Result<_>>()?;
    let dataset = Dataset::open(&config.dataset)?;
    let table = evalkit::run_ablation(
        &dataset,
        &config.model_config(),
        &variants,
        &seeds,
        &config.optimizer_profile()?,
        config.alpha,
    )?;
    print!("{}", table.render());
    std::fs::create_dir_all(&config.out)?;
    let path = config.out.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&table)?)?;
    println!("table: {}", path.display());
    Ok(())
}

fn viz(config: &RunConfig, checkpoint: &std::path::Path, frame_id: &str) -> anyhow::Result<()> {
    let (video_id, index) = frame_id
        .rsplit_once('/')
        .ok_or_else(|| CoreError::Validation(format!("frame id {frame_id} is not <video>/<k>")))?;
    let index: usize = index
        .parse()
        .map_err(|e| CoreError::Validation(format!("bad frame index in {frame_id}: {e}")))?;
    let dataset = Dataset::open(&config.dataset)?;
    let record = dataset
        .records
        .iter()
        .find(|r| r.video_id == video_id)
        .ok_or_else(|| CoreError::Validation(format!("unknown video {video_id}")))?;
    if index >= record.num_frames {
        return Err(CoreError::Validation(format!(
            "frame {index} out of range for {video_id} ({} frames)",
            record.num_frames
        ))
        .into());
    }
    let frame = dataset.load_frame(record, index)?;
    let model = VlaForgeModel::load(checkpoint)?;
    let out_dir = config.out.join("heatmaps").join(format!("{video_id}_{index}"));
    let written = evalkit::export_heatmaps(&model, &frame, &out_dir)?;
    println!("wrote {} heatmaps to {}", written.len(), out_dir.display());
    Ok(())
}
