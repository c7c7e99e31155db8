use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stepsplit_core::experiment::{self, Command, ExperimentSpec, RunMode};
use stepsplit_core::inversion::Strategy;
use stepsplit_core::network::{DatasetKind, FirstActivation, GradientMode, TrainConfig};
use stepsplit_core::{Activation, StepWiseConfig};

#[derive(Parser)]
#[command(name = "stepsplit", version, about = "Split learning with step-wise activations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the reference model and write metrics.txt and model.svw.
    Train(Common),
    /// Reconstruct test images from first-layer outputs under every activation.
    Attack(Common),
    /// Run the edge side of a split session.
    ServeEdge {
        #[command(flatten)]
        common: Common,
        /// Trainer address, host:port.
        #[arg(long)]
        connect: String,
    },
    /// Run the trainer side of a split session.
    ServeTrainer {
        #[command(flatten)]
        common: Common,
        /// Address to listen on, host:port.
        #[arg(long)]
        listen: String,
    },
    /// Test accuracy of a checkpoint.
    Eval(Common),
    /// Accuracy table plus the nine-panel reconstruction figure.
    Figure {
        #[command(flatten)]
        common: Common,
        /// Train missing accuracy rows instead of failing.
        #[arg(long)]
        train_missing: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Sigmoid,
    Tanh,
    Relu,
    Stepwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Monolithic,
    Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModeArg {
    Frozen,
    StraightThrough,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Patchwise,
    Joint,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Use only the first N samples of each split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_enum, default_value = "sigmoid")]
    activation: ActivationArg,
    /// Quantization levels per side of the step-wise activation.
    #[arg(long, default_value_t = 21)]
    n: u32,
    /// Clipping value of the step-wise activation.
    #[arg(long, default_value_t = 10.0)]
    v: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    epochs: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "monolithic")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "frozen")]
    grad_mode: GradModeArg,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "joint")]
    strategy: StrategyArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    num_images: usize,
}

impl Common {
    fn spec(&self, command: Command) -> Result<ExperimentSpec> {
        let first = match self.activation {
            ActivationArg::Sigmoid => FirstActivation::Plain(Activation::Sigmoid),
            ActivationArg::Tanh => FirstActivation::Plain(Activation::Tanh),
            ActivationArg::Relu => FirstActivation::Plain(Activation::Relu),
            ActivationArg::Stepwise => FirstActivation::StepWise(StepWiseConfig::new(Activation::Sigmoid, self.n, self.v)?),
        };
        let mut spec = ExperimentSpec::new(command, self.dataset, &self.data_dir, &self.out);
        spec.limit = self.limit;
        spec.first_activation = first;
        spec.train = TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            stepwise_gradient_mode: match self.grad_mode {
                GradModeArg::Frozen => GradientMode::FrozenPrefix,
                GradModeArg::StraightThrough => GradientMode::StraightThrough,
            },
        };
        spec.train.validate()?;
        spec.mode = match self.mode {
            ModeArg::Monolithic => RunMode::Monolithic,
            ModeArg::Split => RunMode::Split,
        };
        spec.strategy = match self.strategy {
            StrategyArg::Patchwise => Strategy::Patchwise,
            StrategyArg::Joint => Strategy::Joint,
        };
        spec.checkpoint = self.checkpoint.clone();
        spec.num_images = self.num_images;
        spec.v = self.v;
        Ok(spec)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(c) => {
            let spec = c.spec(Command::Train)?;
            let outcome = experiment::run_train(&spec)?;
            for m in &outcome.metrics {
                println!("{m}");
            }
        }
        Cmd::Attack(c) => {
            let outcome = experiment::run_attack(&c.spec(Command::Attack)?)?;
            println!("activation n mse psnr");
            for r in &outcome.rows {
                println!("{r}");
            }
        }
        Cmd::ServeEdge { common, connect } => {
            let report = experiment::serve_edge(&common.spec(Command::ServeEdge)?, &connect)
                .with_context(|| format!("edge session with {connect}"))?;
            for (epoch, acc) in &report.eval {
                println!("{epoch} test accuracy {acc}");
            }
        }
        Cmd::ServeTrainer { common, listen } => {
            let metrics = experiment::serve_trainer(&common.spec(Command::ServeTrainer)?, &listen)
                .with_context(|| format!("trainer session on {listen}"))?;
            for m in &metrics {
                println!("{m}");
            }
        }
        Cmd::Eval(c) => {
            let spec = c.spec(Command::Eval)?;
            if spec.checkpoint.is_none() {
                bail!("eval needs --checkpoint");
            }
            println!("test accuracy {}", experiment::run_eval(&spec)?);
        }
        Cmd::Figure { common, train_missing } => {
            let mut spec = common.spec(Command::Figure)?;
            spec.train_missing = train_missing;
            let fig = experiment::run_figure(&spec)?;
            for (label, acc) in &fig.accuracy {
                println!("{label} accuracy {acc}");
            }
            for r in &fig.attack.rows {
                println!("{r}");
            }
            println!("wrote {}", spec.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
