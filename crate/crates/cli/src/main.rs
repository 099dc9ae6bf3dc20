mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointcaps::{Error, Result, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "pointcaps",
    version,
    about = "Point-capsule auto-encoder toolkit"
)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fixed reduction order and epoch permutation.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the labeled synthetic shape set.
    GenData(GenDataArgs),
    /// Trains the auto-encoder on a directory of clouds.
    Train(TrainArgs),
    /// Reports reconstruction Chamfer and capsule spread.
    Eval(EvalArgs),
    /// Encodes and decodes one cloud.
    Reconstruct(ReconstructArgs),
    /// Labels the reconstruction of one cloud with predicted parts.
    Segment(SegmentArgs),
    /// Trains the per-capsule part classifier.
    TrainPartnet(TrainPartnetArgs),
    /// Blends the selected capsules of two shapes.
    Interpolate(InterpolateArgs),
    /// Swaps the selected capsules of the source for those of the target.
    Replace(PartArgs),
    /// Linear classifier on flattened latent codes.
    Classify(ClassifyArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, default_value = "xyz")]
    format: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of training clouds.
    #[arg(long = "in", value_name = "DIR")]
    input: Option<PathBuf>,
    /// Checkpoint written after the last epoch.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long = "in", value_name = "DIR")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output format; taken from the output extension when absent.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    io: ReconstructArgs,
    /// Part classifier checkpoint.
    #[arg(long, value_name = "PATH")]
    partnet: PathBuf,
}

#[derive(Args, Debug)]
struct TrainPartnetArgs {
    /// Directory of labeled clouds.
    #[arg(long = "in", value_name = "DIR")]
    input: Option<PathBuf>,
    /// Auto-encoder checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PartArgs {
    /// Source and target clouds.
    #[arg(long = "in", value_name = "PATH", num_args = 2, required = true)]
    input: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Part label whose capsules are selected; needs labeled inputs.
    #[arg(
        long,
        conflicts_with = "capsules",
        required_unless_present = "capsules"
    )]
    part: Option<usize>,
    /// Explicit source capsule indices.
    #[arg(long, value_delimiter = ',')]
    capsules: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    part: PartArgs,
    /// Interpolation weights in [0, 1]; several weights give numbered outputs.
    #[arg(long, value_delimiter = ',', required = true)]
    t: Vec<f64>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    /// Training and test directories; categories come from the files.
    #[arg(long = "in", value_name = "DIR", num_args = 2, required = true)]
    input: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Also write per-file predictions here.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &cli.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {item}` is not KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.resolved()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli)?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData(a) => commands::gen_data(&cfg, a, &mut out),
        Command::Train(a) => commands::train(&cfg, a, &mut out),
        Command::Eval(a) => commands::eval(&cfg, a, &mut out),
        Command::Reconstruct(a) => commands::reconstruct(&cfg, a, &mut out),
        Command::Segment(a) => commands::segment(&cfg, a, &mut out),
        Command::TrainPartnet(a) => commands::train_partnet(&cfg, a, &mut out),
        Command::Interpolate(a) => commands::interpolate(&cfg, a.part, &a.t, &mut out),
        Command::Replace(a) => commands::interpolate(&cfg, a, &[1.0], &mut out),
        Command::Classify(a) => commands::classify(&cfg, a, &mut out),
        Command::Gradcheck => commands::gradcheck(&cfg, &mut out),
    }
}

fn error_line(kind: &str, msg: &str) -> String {
    let msg: String = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error kind={kind} msg={msg:?}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
