use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use reqa_core::assessor::AssessorConfig;
use reqa_core::backbone::BackboneVariant;
use reqa_core::data::{load_dataset, synth_generate, write_synth, SynthSpec};
use reqa_core::harness::{self, RunConfig};
use reqa_core::Exec;

#[derive(Parser)]
#[command(
    name = "reqa",
    version,
    about = "Coarse-to-fine blind image quality assessment"
)]
struct Cli {
    /// Run every stage on a single thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Tiny,
    Full,
}

impl From<Variant> for BackboneVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Tiny => BackboneVariant::Tiny,
            Variant::Full => BackboneVariant::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic distorted dataset with oracle MOS.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Side of the generated square images.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model and evaluate it on a held-out split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset with a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Range-effect report for a predictions CSV.
    Analyze {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots: Option<PathBuf>,
    },
}

fn resolve_assessor(run: &RunConfig, variant: Option<Variant>) -> Result<AssessorConfig> {
    match (&run.assessor, variant) {
        (Some(cfg), Some(v)) if cfg.backbone.variant != BackboneVariant::from(v) => bail!(
            "--variant {:?} conflicts with the config file's backbone variant {:?}",
            BackboneVariant::from(v),
            cfg.backbone.variant
        ),
        (Some(cfg), _) => Ok(cfg.clone()),
        (None, Some(Variant::Full)) => Ok(AssessorConfig::full()),
        (None, _) => Ok(AssessorConfig::tiny()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };

    match cli.command {
        Command::Synth { n, seed, out, size } => {
            let spec = SynthSpec {
                n,
                seed,
                base_size: size,
                ..SynthSpec::default()
            };
            let items = synth_generate(&spec, exec)?;
            write_synth(&out, &items, exec)?;
            println!("wrote {n} images and manifest.csv to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            seed,
        } => {
            let mut run = RunConfig::load(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let mut assessor = resolve_assessor(&run, variant)?;
            if let Some(s) = seed {
                run.train.seed = s;
                assessor.init_seed = s;
            }
            let dataset = load_dataset(&data, exec)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            fs::create_dir_all(&out)?;
            let resolved = RunConfig {
                train: run.train.clone(),
                assessor: Some(assessor.clone()),
            };
            harness::write_atomic(&out.join("config.toml"), resolved.to_toml()?.as_bytes())?;
            let outcome = harness::train(&run.train, &assessor, &dataset, &out, exec)?;
            let g = outcome.report.global;
            println!(
                "trained on {} images, evaluated {}: SROCC {} PLCC {}",
                outcome.train_len,
                outcome.test_len,
                fmt_opt(g.srocc),
                fmt_opt(g.plcc)
            );
            println!("artifacts in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let dataset = load_dataset(&data, exec)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let records = harness::evaluate(&checkpoint, &dataset, exec)?;
            harness::write_atomic(&out, &harness::predictions_csv(&records)?)?;
            println!("wrote {} predictions to {}", records.len(), out.display());
        }
        Command::Analyze { preds, out, plots } => {
            let (report, files) = harness::analyze(&preds, &out, plots.as_deref())?;
            println!(
                "n = {}: SROCC {} PLCC {}; report {} pairs {}",
                report.n,
                fmt_opt(report.global.srocc),
                fmt_opt(report.global.plcc),
                files.report.display(),
                files.pairs.display()
            );
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}
