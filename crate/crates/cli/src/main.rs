use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coldgraph::config::ExperimentConfig;
use coldgraph::eval::{format_reports, Setting};
use coldgraph::experiment;

#[derive(Parser)]
#[command(name = "coldgraph", version, about = "Strict cold-start recommendation with frozen graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the split, knowledge graph and frozen graphs.
    Build(Common),
    /// Train a model on built artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Repeatable; defaults to all settings.
        #[arg(long = "setting", value_parser = parse_setting)]
        settings: Vec<Setting>,
    },
    /// Write final item embeddings with warm/cold tags.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add noise to the built knowledge graph and rebuild the graphs.
    InjectNoise(Common),
    /// Write the synthetic dataset as raw input files.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated branches to disable: ba, ka, ma_text, ma_image, ms.
    #[arg(long)]
    ablate: Option<String>,
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: coldgraph::Error| e.to_string())
}

impl Common {
    fn load(&self) -> coldgraph::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.split.seed = seed;
            cfg.noise.seed = seed;
            cfg.synthetic.seed = seed;
        }
        if let Some(list) = &self.ablate {
            cfg.train.ablation.disable(list)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> coldgraph::Result<()> {
    match cli.command {
        Command::Build(c) => {
            let out = experiment::cmd_build(&c.load()?)?;
            if let Some(r) = &out.noise {
                println!("noise\t{} {} added, {} skipped", r.added, r.mode, r.skipped);
            }
            print!("{}", out.stats);
            log::info!("artifacts written to {}", out.dir.display());
        }
        Command::Train { common, checkpoint } => {
            let out = experiment::cmd_train(&common.load()?, checkpoint.as_deref())?;
            println!(
                "epochs\t{}\nbest_epoch\t{}\nbest_val_recall@20\t{:.4}\ncheckpoint\t{}",
                out.epochs,
                out.best_epoch,
                out.best_metric,
                out.checkpoint.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            mut settings,
        } => {
            if settings.is_empty() {
                settings = Setting::ALL.to_vec();
            }
            let reports = experiment::cmd_eval(&common.load()?, checkpoint.as_deref(), &settings)?;
            print!("{}", format_reports(&reports));
        }
        Command::ExportEmbeddings { common, checkpoint, out } => {
            let path = experiment::cmd_export_embeddings(&common.load()?, checkpoint.as_deref(), out.as_deref())?;
            println!("{}", path.display());
        }
        Command::InjectNoise(c) => {
            let r = experiment::cmd_inject_noise(&c.load()?)?;
            println!(
                "mode\t{}\nadded\t{}\nnew_entities\t{}\nskipped\t{}",
                r.mode, r.added, r.new_entities, r.skipped
            );
        }
        Command::Synth(c) => {
            let out = experiment::cmd_synth(&c.load()?)?;
            println!("interactions\t{}", out.interactions.display());
            println!("kg_entities\t{}", out.kg_entities.display());
            println!("kg_triples\t{}", out.kg_triples.display());
            for (m, p) in &out.features {
                println!("{m}_features\t{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
