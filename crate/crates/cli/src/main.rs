use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use narrel_core::config::PipelineConfig;
use narrel_core::pipeline::{Pipeline, PipelineError};

/// Relation embeddings for screenplay characters.
#[derive(Debug, Parser)]
#[command(name = "narrel", version)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus directory (`<show>/<episode>.txt`).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cluster labeling CSV (subject,object,cluster_id).
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    /// Cleaning rules file.
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    /// Loss modes to run (em, inv); repeatable.
    #[arg(long = "mode", global = true)]
    modes: Vec<String>,
    /// f32 or f64.
    #[arg(long, global = true)]
    precision: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long = "lr", global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    mask_prob: Option<f64>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the corpus into relation examples.
    Parse,
    /// Generate a planted-structure corpus with ground-truth labels.
    Synth,
    /// Filter, split, select validation pairs and build the vocabulary.
    Build,
    /// Train one encoder per loss mode.
    Train,
    /// Write validation embeddings.
    Embed,
    /// Score embeddings with cosine silhouettes.
    Eval,
    /// Render the comparison tables and histogram data.
    Report,
}

impl Cli {
    fn flag_overrides(&self) -> Vec<String> {
        let quote = |p: &PathBuf| format!("{:?}", p.display().to_string());
        let mut out = self.overrides.clone();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push(format!("{key}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("corpus_dir", self.corpus.as_ref().map(quote));
        push("out_dir", self.out.as_ref().map(quote));
        push("labels", self.labels.as_ref().map(quote));
        push("rules", self.rules.as_ref().map(quote));
        push("precision", self.precision.as_ref().map(|p| format!("{p:?}")));
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push("train.learning_rate", self.learning_rate.map(|v| format!("{v:?}")));
        push("train.batch_size", self.batch_size.map(|v| v.to_string()));
        push("train.mask_prob", self.mask_prob.map(|v| format!("{v:?}")));
        if !self.modes.is_empty() {
            let modes: Vec<String> = self.modes.iter().map(|m| format!("{m:?}")).collect();
            out.push(format!("modes=[{}]", modes.join(",")));
        }
        out
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let text = match &cli.config {
        Some(path) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Usage(format!("cannot read config {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let config = PipelineConfig::resolve(text.as_deref(), &cli.flag_overrides())?;
    let pipeline = Pipeline::new(config);
    match cli.command {
        Command::Parse => {
            let s = pipeline.parse()?;
            println!(
                "parsed {} episodes, {} examples, {} skipped lines, {} malformed files",
                s.episodes.len(),
                s.examples,
                s.skipped_lines,
                s.malformed_files.len()
            );
        }
        Command::Synth => {
            let s = pipeline.synth()?;
            println!(
                "wrote {} episodes for {} ordered pairs (planted inverse coverage {:.3})",
                s.episodes,
                s.pairs.len(),
                s.planted_coverage
            );
        }
        Command::Build => {
            let s = pipeline.build()?;
            for st in &s.stats {
                println!("{:<10} {:>6} examples, mean length {:.1}", st.split, st.count, st.mean_length);
            }
            println!("vocabulary {} tokens; dropped {} pairs", s.vocab_size, s.dropped_pairs);
        }
        Command::Train => {
            for s in pipeline.train()? {
                println!(
                    "[{}] best epoch {}: test loss {}, train loss {:.4} -> {:.4}",
                    s.mode,
                    s.best_epoch,
                    s.best_test_loss.map_or("-".into(), |l| format!("{l:.4}")),
                    s.initial_train_loss,
                    s.final_train_loss
                );
            }
        }
        Command::Embed => {
            pipeline.embed()?;
            println!("wrote embeddings to {}", pipeline.config.out_dir.display());
        }
        Command::Eval => {
            for s in pipeline.eval()? {
                let ev = &s.evaluation;
                println!(
                    "[{}] character {:.3} cluster {:.3} composite {:.3}",
                    s.mode, ev.character.overall, ev.cluster.overall, ev.composite.overall
                );
            }
        }
        Command::Report => {
            pipeline.report()?;
            println!("wrote tables to {}", pipeline.config.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
