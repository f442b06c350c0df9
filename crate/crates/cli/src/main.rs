//! Command-line driver for the pipeline: generate a synthetic corpus, train,
//! evaluate, sweep ablation variants, and export feature projections.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use ramer_core::corpus::gen::{generate_synthetic, GenConfig};
use ramer_core::corpus::io::{read_corpus, write_corpus};
use ramer_core::harness::{
    modality_label_correlation, parse_variant, project_features, run_ablation, evaluate_model,
    write_correlation_csv, write_projection_csv, ProjectionKind, ProjectionMethod,
};
use ramer_core::trainer::{TrainConfig, Trainer};
use ramer_core::{Error, Split};

#[derive(Parser)]
#[command(name = "ramer", version, about = "Multi-party multi-modal emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a directory.
    Gen {
        /// Output directory for manifest.json and features.bin.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Generator configuration (JSON). Missing keys take defaults.
        #[arg(long, value_name = "FILE")]
        gen_config: PathBuf,
        /// Master seed; overrides the seed in the config file.
        #[arg(long, value_name = "N")]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Training configuration (JSON). Missing keys take defaults.
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Override the seed in the config file.
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split and write a metrics report.
    Eval {
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// JSON report output path.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
    /// Train and evaluate named structural variants over several seeds.
    Ablate {
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Training configuration (JSON).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Comma-separated variant names, e.g. full,no_C,no_Xbeta_Xgamma.
        #[arg(long, value_name = "NAMES")]
        variants: String,
        /// Seeds per variant.
        #[arg(long, value_name = "N", default_value_t = 3)]
        seeds: usize,
        /// JSON report output path.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
    /// Export 2-D feature projections or modality-to-label attribution as CSV.
    Viz {
        /// Checkpoint path.
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Which export to produce.
        #[arg(long, value_name = "WHAT")]
        what: VizWhat,
        /// CSV output path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Use the exact linear projection instead of the neighbor embedding.
        #[arg(long)]
        pca: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VizWhat {
    /// Specificity and commonality features per modality.
    #[value(name = "spec_common")]
    SpecCommon,
    /// Input, reconstruction, and the two generated feature levels.
    #[value(name = "recon")]
    Recon,
    /// Per-label modality attribution matrix.
    #[value(name = "mod2label")]
    Mod2Label,
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Gen { out, gen_config, seed } => {
            let mut cfg = GenConfig::from_json_file(&gen_config)?;
            cfg.seed = seed;
            let corpus = generate_synthetic(&cfg)?;
            write_corpus(&corpus, &out)?;
            println!("wrote {} samples to {}", corpus.samples.len(), out.display());
        }
        Command::Train { data, config, out, seed } => {
            let corpus = read_corpus(&data)?;
            let mut cfg = TrainConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = Trainer::fit(&corpus, &cfg)?;
            run.trainer.save_checkpoint(&out)?;
            match run.epochs.last().and_then(|e| e.val_micro_f1) {
                Some(f1) => println!(
                    "trained {} epochs (val micro-F1 {f1:.4}); checkpoint {}",
                    run.epochs.len(),
                    out.display()
                ),
                None => println!(
                    "trained {} epochs; checkpoint {}",
                    run.epochs.len(),
                    out.display()
                ),
            }
        }
        Command::Eval { data, ckpt, report } => {
            let corpus = read_corpus(&data)?;
            let trainer = Trainer::load_checkpoint(&ckpt)?;
            let metrics = evaluate_model(&trainer.model, &corpus, Split::Test)?;
            let text = serde_json::to_string_pretty(&metrics)
                .map_err(|e| Error::data(format!("cannot serialize report: {e}")))?;
            std::fs::write(&report, text + "\n")?;
            println!(
                "micro-F1 {:.4} on {} test samples; report {}",
                metrics.micro_f1,
                metrics.n_samples,
                report.display()
            );
        }
        Command::Ablate { data, config, variants, seeds, report } => {
            let corpus = read_corpus(&data)?;
            let cfg = TrainConfig::from_json_file(&config)?;
            let names: Vec<String> = variants
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            for name in &names {
                parse_variant(name)?;
            }
            let result = run_ablation(&corpus, &cfg, &names, seeds)?;
            let text = serde_json::to_string_pretty(&result)
                .map_err(|e| Error::data(format!("cannot serialize report: {e}")))?;
            std::fs::write(&report, text + "\n")?;
            for entry in &result.entries {
                println!(
                    "{}: micro-F1 {:.4} +- {:.4} over {} seeds",
                    entry.variant, entry.mean_micro_f1, entry.std_micro_f1, seeds
                );
            }
            println!("report {}", report.display());
        }
        Command::Viz { ckpt, data, what, out, pca } => {
            let corpus = read_corpus(&data)?;
            let trainer = Trainer::load_checkpoint(&ckpt)?;
            let model = &trainer.model;
            match what {
                VizWhat::Mod2Label => {
                    let corr = modality_label_correlation(model, &corpus, Split::Test)?;
                    write_correlation_csv(&corr, &out)?;
                    println!("wrote {} label rows to {}", corr.nrows(), out.display());
                }
                VizWhat::SpecCommon | VizWhat::Recon => {
                    let kind = match what {
                        VizWhat::SpecCommon => ProjectionKind::SpecCommon,
                        _ => ProjectionKind::Recon,
                    };
                    let method = if pca { ProjectionMethod::Pca } else { ProjectionMethod::Tsne };
                    let points = project_features(
                        model,
                        &corpus,
                        Split::Test,
                        kind,
                        method,
                        model.cfg.seed,
                    )?;
                    write_projection_csv(&points, &out)?;
                    println!("wrote {} points to {}", points.len(), out.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
