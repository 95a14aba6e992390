use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crossview_cli::config::{FeatureSource, RunConfig};
use crossview_cli::convert::{convert_cube, convert_labels};
use crossview_cli::error::Result;
use crossview_cli::pipeline::{Pipeline, Stage};
use crossview_core::contrast::PairingMode;

#[derive(Debug, Parser)]
#[command(name = "crossview", version, about = "Cross-view feature learning for hyperspectral cubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Start from a named configuration (ip, pu, sa, smoke) instead of a file.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,

    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Features handed to the classifier: vae, aae or contrast.
    #[arg(long, global = true)]
    feature_source: Option<FeatureSource>,

    /// Which target projection each online prediction is compared with.
    #[arg(long, global = true, value_enum)]
    pairing: Option<Pairing>,

    /// Train the autoencoders to reconstruct their own input view.
    #[arg(long, global = true)]
    self_reconstruction: bool,

    /// No progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Pairing {
    Cross,
    Same,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn CSV dumps into cube or label containers.
    Convert {
        #[command(subcommand)]
        kind: ConvertKind,
    },
    /// Every stage in order, reusing fresh artifacts.
    RunAll,
    /// Fit PCA on every pixel and project the cube.
    Pca,
    /// Cut labeled patches from the reduced cube.
    Patches,
    /// Print the two channel views.
    DescribeSplit,
    /// Cross-channel variational autoencoder.
    TrainVae,
    /// Cross-channel adversarial autoencoder.
    TrainAae,
    /// Online/target contrast networks on the paired codes.
    TrainContrast,
    /// Export features for the selected source.
    Extract,
    /// Linear SVM on the training fraction, predictions for the rest.
    Classify,
    /// OA, AA and per-class accuracy of the predictions.
    Evaluate,
    /// Print the effective configuration with every default filled in.
    PrintConfig,
}

#[derive(Debug, Subcommand)]
enum ConvertKind {
    /// One CSV record per pixel (row-major), one field per band.
    Cube {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// One CSV record per image row, one integer label per column.
    Labels {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        num_classes: usize,
        #[arg(long, value_delimiter = ',')]
        class_names: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    if let Some(source) = cli.feature_source {
        cfg.ablation.feature_source = source;
    }
    if let Some(p) = cli.pairing {
        cfg.ablation.pairing = match p {
            Pairing::Cross => PairingMode::CrossView,
            Pairing::Same => PairingMode::SameView,
        };
    }
    if cli.self_reconstruction {
        cfg.ablation.self_reconstruction = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    crossview_cli::init_threads()?;
    let stage_name = match &cli.command {
        Command::Convert { kind } => {
            match kind {
                ConvertKind::Cube {
                    input,
                    output,
                    height,
                    width,
                    note,
                } => {
                    let cube = convert_cube(input, *height, *width, note, output)?;
                    println!("{} x {} x {} cube -> {}", cube.height, cube.width, cube.channels, output.display());
                }
                ConvertKind::Labels {
                    input,
                    output,
                    num_classes,
                    class_names,
                } => {
                    let gt = convert_labels(input, *num_classes, class_names.clone(), output)?;
                    println!(
                        "{} x {} labels, {} labeled -> {}",
                        gt.height,
                        gt.width,
                        gt.labeled(),
                        output.display()
                    );
                }
            }
            return Ok(());
        }
        Command::PrintConfig => {
            println!("{}", load_config(cli)?.to_json());
            return Ok(());
        }
        Command::RunAll => None,
        Command::Pca => Some("pca"),
        Command::Patches => Some("patches"),
        Command::DescribeSplit => Some("describe-split"),
        Command::TrainVae => Some("train-vae"),
        Command::TrainAae => Some("train-aae"),
        Command::TrainContrast => Some("train-contrast"),
        Command::Extract => Some("extract"),
        Command::Classify => Some("classify"),
        Command::Evaluate => Some("evaluate"),
    };
    let cfg = load_config(cli)?;
    let mut pipeline = Pipeline::new(&cfg)?;
    pipeline.verbose = !cli.quiet;
    let source = pipeline.config().ablation.feature_source;
    match stage_name {
        None => {
            let report = pipeline.run_all()?;
            println!("{}", report.to_json());
        }
        Some(name) => {
            let stage = Stage::from_command(name, source).expect("known stage");
            pipeline.ensure(stage, false)?;
            match stage {
                Stage::Split => println!("{}", pipeline.channel_split()?),
                Stage::Evaluate(s) => println!("{}", pipeline.metrics(s)?.to_json()),
                _ => println!("{}", pipeline.dir(stage).display()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
