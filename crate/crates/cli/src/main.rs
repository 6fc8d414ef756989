use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use concept_mmvae::experiment::{self, ExperimentConfig, ExperimentError, ResolvedConfig, TaxonomySource};
use concept_mmvae::taxonomy::TaxonomyVariant;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Hierarchical concept learning with a mixture-of-experts multimodal VAE.
#[derive(Parser, Debug)]
#[command(name = "concept-mmvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and write it with a summary.
    GenData(Common),
    /// Train the model and write a checkpoint and loss trace.
    Train(Common),
    /// Run the language understanding and naming tests on a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate all three taxonomy variants.
    Ablate(Common),
    /// Render existing evaluation outputs as Markdown.
    Report(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON config, or any file this tool emitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Variant {
    Base,
    AblationWide,
    AblationDeep,
}

impl From<Variant> for TaxonomyVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Base => TaxonomyVariant::Base,
            Variant::AblationWide => TaxonomyVariant::AblationWide,
            Variant::AblationDeep => TaxonomyVariant::AblationDeep,
        }
    }
}

fn resolve(common: &Common) -> Result<ResolvedConfig, ExperimentError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = common.variant {
        cfg.taxonomy = TaxonomySource::Variant(v.into());
    }
    if common.paper_scale {
        cfg.paper_scale = true;
    }
    cfg.resolve()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let resolved = resolve(&common)?;
            let s = experiment::cmd_gen_data(&resolved)?;
            println!(
                "{} subordinate, {} basic, {} superordinate concepts; {} examples ({} train / {} test) in {}",
                s.subordinate,
                s.basic,
                s.superordinate,
                s.examples,
                s.train_examples,
                s.test_examples,
                resolved.out_dir().display()
            );
        }
        Command::Train(common) => {
            let resolved = resolve(&common)?;
            let outcome = experiment::cmd_train(&resolved)?;
            let last = outcome.trace.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final negative ELBO {last:.4}; wrote {}", outcome.trace.len(), resolved.out_dir().display());
        }
        Command::Eval { common, checkpoint } => {
            let resolved = resolve(&common)?;
            let report = experiment::cmd_eval(&resolved, checkpoint.as_deref())?;
            for test in [&report.understanding, &report.naming] {
                for r in &test.rows {
                    println!("{} {} {}: {:.4} (ground truth {:.4})", test.test.as_str(), r.level, r.metric.as_str(), r.value, r.baseline);
                }
            }
        }
        Command::Ablate(common) => {
            let resolved = resolve(&common)?;
            let (_, rows) = experiment::cmd_ablate(&resolved)?;
            for r in rows {
                let kind = if r.ground_truth { "ground_truth" } else { "result" };
                println!("{} {} {kind}: l2v {:.4} v2l {:.4}", r.variant, r.level, r.language_to_vision, r.vision_to_language);
            }
        }
        Command::Report(common) => {
            let resolved = resolve(&common)?;
            print!("{}", experiment::cmd_report(&resolved)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<ExperimentError>().is_some_and(ExperimentError::is_validation);
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
