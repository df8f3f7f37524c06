use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use isplit::checkpoint;
use isplit::data::{load_idx_images, synth_dataset, write_idx, Profile};
use isplit::harness::{load_data, run_pipeline, run_stage, ExperimentConfig, HarnessError, Stage};
use isplit::runtime::{head_infer, serve_tail, ServerConfig};

/// Interpretable split-point selection, bottleneck retraining and split inference.
#[derive(Parser)]
#[command(name = "isplit", version)]
struct Cli {
    /// Print the default experiment config as JSON and exit.
    #[arg(long)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight classes equally in the general CUI curve.
    #[arg(long)]
    class_balanced: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model.
    Train(ConfigArgs),
    /// Compute CUI and gradient-baseline curves and pick split candidates.
    Cui(ConfigArgs),
    /// Build and train a bottleneck at every candidate.
    Split(ConfigArgs),
    /// Fine-tune every split end to end.
    Retrain(ConfigArgs),
    /// Measure split accuracy and transfer estimates.
    Sweep(ConfigArgs),
    /// Resampled accuracy statistics and per-class F1.
    Stats(ConfigArgs),
    /// Render SVG charts from existing artifacts.
    Plot(ConfigArgs),
    /// All stages in order.
    Run(ConfigArgs),
    /// Serve a tail checkpoint over TCP.
    Serve {
        #[arg(long)]
        bind: String,
        #[arg(long)]
        tail: PathBuf,
        #[arg(long = "max-conn", default_value_t = 16)]
        max_conn: usize,
        /// Idle connections are dropped after this long.
        #[arg(long, default_value_t = 30_000)]
        read_timeout_ms: u64,
    },
    /// Run a head checkpoint locally and the tail on a server.
    Infer {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        server: String,
        /// IDX image file.
        #[arg(long)]
        image: PathBuf,
        /// Image index inside the IDX file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 5_000)]
        timeout_ms: u64,
    },
    /// Write a synthetic dataset as an IDX pair.
    Synth {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value = "mixed")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Stage(anyhow::Error),
    Network(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Stage(_) => 3,
            Failure::Network(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Stage(e) | Failure::Network(e) => e,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Config(e.into()),
            HarnessError::Data(_) => Failure::Data(e.into()),
            HarnessError::Stage { .. } => Failure::Stage(e.into()),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            ExperimentConfig::from_json(&text)
                .map_err(|e| Failure::Config(anyhow!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.cui.class_balanced |= args.class_balanced;
    cfg.validate().map_err(|e| Failure::Config(anyhow!(e)))?;
    Ok(cfg)
}

fn stage(args: &ConfigArgs, stage: Stage) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let data = load_data(&cfg)?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))
        .map_err(Failure::Stage)?;
    run_stage(&cfg, &data, stage)?;
    info!("stage {stage} done; artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn load_image(path: &Path, index: usize) -> Result<isplit::tensor::Tensor<f32>, Failure> {
    let images = load_idx_images(path).map_err(|e| Failure::Data(e.into()))?;
    let count = images.len();
    images
        .into_iter()
        .nth(index)
        .ok_or_else(|| Failure::Data(anyhow!("image index {index} outside the {count} images")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.print_default_config {
        print!("{}", ExperimentConfig::default().to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::Config(anyhow!("no subcommand given; see --help")));
    };
    match command {
        Command::Train(a) => stage(&a, Stage::Train),
        Command::Cui(a) => stage(&a, Stage::Cui),
        Command::Split(a) => stage(&a, Stage::Split),
        Command::Retrain(a) => stage(&a, Stage::Retrain),
        Command::Sweep(a) => stage(&a, Stage::Sweep),
        Command::Stats(a) => stage(&a, Stage::Stats),
        Command::Plot(a) => stage(&a, Stage::Plot),
        Command::Run(a) => {
            let cfg = load_config(&a)?;
            let out = run_pipeline(&cfg)?;
            let summary = fs::read_to_string(out.join("summary.json")).unwrap_or_default();
            print!("{summary}");
            Ok(())
        }
        Command::Serve {
            bind,
            tail,
            max_conn,
            read_timeout_ms,
        } => {
            if max_conn == 0 {
                return Err(Failure::Config(anyhow!("--max-conn must be at least 1")));
            }
            let model = checkpoint::load(&tail)
                .with_context(|| format!("loading tail {}", tail.display()))
                .map_err(Failure::Data)?;
            let config = ServerConfig {
                max_connections: max_conn,
                read_timeout: Duration::from_millis(read_timeout_ms),
            };
            let handle = serve_tail(&bind, model, config)
                .with_context(|| format!("binding {bind}"))
                .map_err(Failure::Network)?;
            println!("listening on {}", handle.local_addr());
            handle.wait();
            Ok(())
        }
        Command::Infer {
            head,
            server,
            image,
            index,
            timeout_ms,
        } => {
            let model = checkpoint::load(&head)
                .with_context(|| format!("loading head {}", head.display()))
                .map_err(Failure::Data)?;
            let x = load_image(&image, index)?;
            let out = head_infer(&model, &x, &server, Duration::from_millis(timeout_ms))
                .with_context(|| format!("remote inference via {server}"))
                .map_err(Failure::Network)?;
            let json = serde_json::json!({
                "class": out.class(),
                "logits": out.logits.data(),
                "request_bytes": out.request_bytes,
                "timing": out.timing,
            });
            println!("{}", serde_json::to_string_pretty(&json).expect("json"));
            Ok(())
        }
        Command::Synth {
            classes,
            per_class,
            size,
            profile,
            seed,
            images,
            labels,
        } => {
            let data = synth_dataset(classes, per_class, size, profile, seed).map_err(|e| Failure::Data(e.into()))?;
            write_idx(&data, &images, &labels).map_err(|e| Failure::Data(e.into()))?;
            println!("wrote {} images ({}) to {}", data.len(), data.id, images.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
