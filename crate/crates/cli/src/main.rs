mod commands;
mod config;
mod error;
mod video;

use std::path::PathBuf;
use std::process::ExitCode;

use atmv_core::toydata::DatasetParams;
use atmv_core::trainer::Stage;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{parse_size, sampler_config, CliResult, PredictArgs, SampleArgs, TrainArgs};
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "atmv", version, about = "Toy image-to-video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset to disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        clips: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value = "32x32")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue a run of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Spatial checkpoint that starts the temporal stage.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a clip from one image.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Start from the noisy prior of this strength instead of pure noise.
        #[arg(long)]
        noisy_prior: Option<f64>,
        /// Use a schedule without zero terminal SNR for the noisy prior.
        #[arg(long, requires = "noisy_prior")]
        prior_linear: bool,
        #[arg(long)]
        latent_replacement: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend the first frames of a video by iterated prediction.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        context: usize,
        #[arg(long)]
        total: usize,
        /// Clip length of each sampling window.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        latent_replacement: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated videos against reference first frames.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Directory receiving report.tsv and report.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long = "cfg", default_value_t = 1.0)]
    guidance: f64,
    #[arg(long)]
    rescale_phi: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Spatial,
    Temporal,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            out,
            clips,
            frames,
            size,
            seed,
        } => {
            let (height, width) = parse_size(&size)?;
            commands::gen_data(
                &out,
                &DatasetParams {
                    clips,
                    frames,
                    height,
                    width,
                    seed,
                },
            )
        }
        Command::Train {
            config,
            stage,
            resume,
            init_from,
            out,
        } => {
            let config = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let stage = match stage {
                StageArg::Spatial => Stage::SpatialPretrain,
                StageArg::Temporal => Stage::Temporal,
            };
            commands::train(&TrainArgs {
                config,
                stage,
                resume,
                init_from,
                out,
            })
        }
        Command::Sample {
            ckpt,
            image,
            frames,
            sampling: s,
            noisy_prior,
            prior_linear,
            latent_replacement,
            out,
        } => commands::sample(&SampleArgs {
            ckpt,
            image,
            frames,
            sampler: sampler_config(s.steps, s.guidance, s.rescale_phi, s.eta, s.seed, latent_replacement),
            noisy_prior,
            prior_linear,
            out,
        }),
        Command::Predict {
            ckpt,
            video,
            context,
            total,
            frames,
            sampling: s,
            latent_replacement,
            out,
        } => commands::predict(&PredictArgs {
            ckpt,
            video,
            context,
            total,
            frames,
            sampler: sampler_config(s.steps, s.guidance, s.rescale_phi, s.eta, s.seed, latent_replacement),
            out,
        }),
        Command::Eval {
            generated,
            references,
            out,
        } => {
            let report = commands::eval(&generated, &references, &out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
