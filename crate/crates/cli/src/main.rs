use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Learn multi-layer residual sparsifying transforms and denoise images.
#[derive(Parser, Debug)]
#[command(name = "deeprest", version, about)]
struct Cli {
    /// Directory for every file the command writes, manifest included.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Print the command's report as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on one image; writes the model, a report and atom montages.
    Train(TrainArgs),
    /// Encode an image with a trained model into a codes file.
    Encode(EncodeArgs),
    /// Decode a codes file back to an image.
    Decode(DecodeArgs),
    /// Add seeded Gaussian noise to a clean image and denoise it.
    Denoise(DenoiseArgs),
    /// PSNR between two images of equal size.
    Psnr(PsnrArgs),
    /// Denoise every image at every noise level and depth; prints a PSNR grid.
    Table(TableArgs),
}

/// Layer schedule shared by `train`, `denoise` and `table`.
#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Alternations per layer.
    #[arg(long, default_value_t = deeprest::denoise::DEFAULT_ITERS)]
    pub iters: usize,
    /// First-layer patch size, `ROWSxCOLS` or a single side.
    #[arg(long, default_value = "9x9", value_parser = parse_patch)]
    pub patch: (usize, usize),
    /// Residual maps kept after layers 1..L-1, comma separated; the first
    /// L-1 entries are used. Defaults to 49,36,25,16 (36,25,16,9 above
    /// sigma 50).
    #[arg(long, value_delimiter = ',')]
    pub keep_schedule: Option<Vec<usize>>,
    /// First-layer threshold as a multiple of sigma.
    #[arg(long, default_value_t = deeprest::denoise::FIRST_LAYER_MULTIPLIER)]
    pub eta_mult1: f64,
    /// Threshold of later layers as a multiple of sigma.
    #[arg(long, default_value_t = deeprest::denoise::LATER_LAYER_MULTIPLIER)]
    pub eta_mult2: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub image: PathBuf,
    /// Noise level that sets the thresholds (`eta = mult * sigma`).
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub codes: PathBuf,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    pub image: PathBuf,
    /// Noise standard deviation (intensity units, 0..255 scale).
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of passes. Two passes at sigma 100 default to estimates 90,20;
    /// other multi-pass runs need `--pass-sigmas`.
    #[arg(long)]
    pub passes: Option<usize>,
    /// Noise estimate per pass, e.g. `90,20`.
    #[arg(long, value_delimiter = ',')]
    pub pass_sigmas: Option<Vec<f64>>,
    /// Treat the input as already noisy: no noise is added and no PSNR is reported.
    #[arg(long)]
    pub noisy_input: bool,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
pub struct PsnrArgs {
    pub reference: PathBuf,
    pub test: PathBuf,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 20.0, 30.0, 100.0])]
    pub sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 5])]
    pub layers: Vec<usize>,
    /// Base seed; cell `k` (image-major, then sigma, then layers) uses `seed + k`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

fn parse_patch(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad patch size `{s}`")))
        .collect::<Result<Vec<_>, _>>()?;
    match nums[..] {
        [n] if n > 0 => Ok((n, n)),
        [a, b] if a > 0 && b > 0 => Ok((a, b)),
        _ => Err(format!("patch size must look like 9x9, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
