//! `disco-mri`: masks, phantoms, reconstruction, training and transfer
//! experiments from one binary.

mod commands;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use disco_mri::mask::MaskPattern;

#[derive(Debug, Parser)]
#[command(name = "disco-mri", version, about = "Resolution-agnostic accelerated MRI reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and save an undersampling mask.
    Mask(MaskCmd),
    /// Generate a synthetic multi-coil phantom dataset.
    Phantom(PhantomCmd),
    /// Reconstruct one slice.
    Recon(ReconCmd),
    /// Train an unrolled network.
    Train(TrainCmd),
    /// Metric table over sampling patterns and rates.
    Eval(EvalCmd),
    /// Resolution and field-of-view transfer of a trained model.
    Superres(SuperresCmd),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckCmd),
}

#[derive(Debug, Clone, Args)]
pub struct Sampling {
    #[arg(long, default_value = "equispaced", value_parser = parse_pattern)]
    pub pattern: MaskPattern,
    #[arg(long, default_value_t = 4)]
    pub accel: usize,
    #[arg(long, default_value_t = 0.08)]
    pub cf: f64,
}

#[derive(Debug, Clone, Args)]
pub struct Output {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Where slices come from: a saved dataset or a freshly generated one.
#[derive(Debug, Clone, Args)]
pub struct DataSource {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "64x64", value_parser = parse_shape)]
    pub shape: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub coils: usize,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct MaskCmd {
    #[command(flatten)]
    pub sampling: Sampling,
    #[arg(long, default_value = "320x320", value_parser = parse_shape)]
    pub shape: (usize, usize),
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct PhantomCmd {
    #[arg(long, default_value = "64x64", value_parser = parse_shape)]
    pub shape: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub coils: usize,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum Method {
    ZeroFilled,
    Fista,
    Model,
}

#[derive(Debug, Args)]
pub struct ReconCmd {
    #[arg(long, value_enum, default_value = "zero-filled")]
    pub method: Method,
    #[command(flatten)]
    pub sampling: Sampling,
    #[command(flatten)]
    pub source: DataSource,
    /// Slice of the dataset to reconstruct.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// FISTA weight relative to the zero-filled maximum.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    /// Directory holding `model.cfg` and `model.ckpt`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub bypass_no: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum Kernel {
    Disco,
    Cnn,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub sampling: Sampling,
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long, value_enum, default_value = "disco")]
    pub kernel: Kernel,
    /// Physical kernel radius of DISCO layers.
    #[arg(long, default_value_t = disco_mri::model::DESK_RADIUS)]
    pub radius: f64,
    /// Side length of CNN kernels.
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 2)]
    pub cascades: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long, value_enum, value_delimiter = ',', default_value = "zero-filled,fista")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', value_parser = parse_pattern, default_value = "equispaced,random,magic,gaussian,radial,poisson")]
    pub patterns: Vec<MaskPattern>,
    /// Restrict to one acceleration; otherwise 4×, 6×, 8× and 16×.
    #[arg(long)]
    pub accel: Option<usize>,
    /// Centre fraction for `--accel`; defaults to the standard pairing.
    #[arg(long)]
    pub cf: Option<f64>,
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub bypass_no: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum Mode {
    Image,
    Fov,
}

#[derive(Debug, Args)]
pub struct SuperresCmd {
    #[arg(long, value_enum, default_value = "image")]
    pub mode: Mode,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: Sampling,
    #[command(flatten)]
    pub source: DataSource,
    /// Upsampling factor of the image grid.
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    /// Training field of view in pixels; defaults to half the input.
    #[arg(long)]
    pub crop: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    #[command(flatten)]
    pub output: Output,
}

fn parse_pattern(s: &str) -> Result<MaskPattern, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad dimension {v:?}"));
    Ok((dim(h)?, dim(w)?))
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Run(e.to_string())
    }
}

fn dispatch(argv: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Run(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    ExitCode::from(dispatch(&argv))
}
