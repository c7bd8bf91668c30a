use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use subspace_fusion::data::{generate, Split, SynthConfig};
use subspace_fusion::fusion::FusionConfig;
use subspace_fusion::objectives::{MetricReport, Task};
use subspace_fusion::train::{self, TrainConfig};
use subspace_fusion::Error;

#[derive(Parser)]
#[command(name = "subfuse", version, about = "Two-stream genomics/histology subspace fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, model.sfck and config.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Generate a synthetic cohort.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        n_samples: usize,
        #[arg(long, default_value = "7x7")]
        grid: String,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 5.0)]
        snr: f64,
        /// Fraction of samples whose TME signal contradicts the tumour signal.
        #[arg(long, default_value_t = 0.0)]
        conflict: f64,
        /// Both subspaces carry the diagnosis signal equally.
        #[arg(long)]
        symmetric: bool,
    },
    /// Compare the full model against its ablations over several seeds.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Task::Diagnosis)]
    task: Task,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Defaults to 20 for diagnosis and grading, 10 for survival.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_ge_con: bool,
    #[arg(long)]
    no_cg_coord: bool,
    #[arg(long, default_value = "7x7")]
    grid: String,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
}

fn parse_grid(s: &str) -> Result<(usize, usize), Error> {
    s.split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("grid must look like HxW, got {s:?}")))
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig, Error> {
        let (grid_h, grid_w) = parse_grid(&self.grid)?;
        let cfg = TrainConfig {
            task: self.task,
            alpha: self.alpha,
            epochs: self.epochs.unwrap_or(self.task.default_epochs()),
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            data_dir: self.data.clone(),
            out_dir: self.out.clone(),
            fusion: FusionConfig {
                heads: self.heads,
                embed_dim: self.embed_dim,
                grid_h,
                grid_w,
                ..FusionConfig::default()
            },
            cg_coord_enabled: !self.no_cg_coord,
            ge_con_enabled: !self.no_ge_con,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(report: &MetricReport) {
    println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let outcome = train::train(&args.config()?)?;
            print!("{}", outcome.metrics_csv);
            print_report(&outcome.final_val);
        }
        Command::Evaluate { checkpoint, data, split } => {
            print_report(&train::evaluate(checkpoint, data, split)?);
        }
        Command::Generate {
            out,
            seed,
            n_samples,
            grid,
            channels,
            snr,
            conflict,
            symmetric,
        } => {
            let (height, width) = parse_grid(&grid)?;
            let cfg = SynthConfig {
                n_samples,
                height,
                width,
                channels,
                snr,
                conflict_strength: conflict,
                symmetric,
                ..SynthConfig::default()
            };
            let data = generate(&cfg, seed)?;
            data.save(&out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Ablate { train: args, seeds } => {
            print!("{}", train::ablate(&args.config()?, seeds)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Format { .. } => 3,
                _ => 1,
            })
        }
    }
}
