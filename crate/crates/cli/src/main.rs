use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hgm_cli::commands::{self, EvalArgs, GenDemosArgs, GraspArgs, SceneArgs, SceneRole, TrainArgs};
use hgm_core::simenv::{Split, Variant};

#[derive(Parser)]
#[command(name = "hgm", version, about = "Correspondence-guided grasping and diffusion policies on synthetic manipulation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoCg,
    NoPe,
    NoMfm,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoCg => Variant::NoCg,
            VariantArg::NoPe => Variant::NoPe,
            VariantArg::NoMfm => Variant::NoMfm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Operated,
    Background,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations as a dataset directory.
    GenDemos {
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 50)]
        num: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit descriptors and train a policy; writes a checkpoint and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Task configuration JSON; defaults to the task's built-in config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over several runs of episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer a demo grasp onto a target cloud and print the pose.
    Grasp {
        #[arg(long)]
        demo_annotation: PathBuf,
        #[arg(long)]
        target_cloud: PathBuf,
        /// Writes the target cloud with a `match` payload here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one object of a generated scene as a cloud directory.
    Scene {
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "operated")]
        role: RoleArg,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
        /// Attach provider features.
        #[arg(long)]
        features: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mut log = String::new();
    let result = match cli.command {
        Command::GenDemos { task, split, num, seed, out } => {
            commands::gen_demos(&GenDemosArgs { task, split: split.into(), num, seed, out }, &mut log)
        }
        Command::Train { data, config, variant, epochs, seed, out } => commands::train(
            &TrainArgs { data, config, variant: variant.map(Into::into), epochs, seed, out },
            &mut log,
        ),
        Command::Eval { checkpoint, task, split, episodes, runs, seed, variant, out } => commands::eval(
            &EvalArgs { checkpoint, task, split: split.into(), episodes, runs, seed, variant: variant.map(Into::into), out },
            &mut log,
        )
        .map(|_| ()),
        Command::Grasp { demo_annotation, target_cloud, out } => {
            commands::grasp(&GraspArgs { demo_annotation, target_cloud, out }, &mut log).map(|_| ())
        }
        Command::Scene { task, split, seed, role, variant, features, out } => {
            let role = match role {
                RoleArg::Operated => SceneRole::Operated,
                RoleArg::Background => SceneRole::Background,
            };
            commands::scene(
                &SceneArgs { task, split: split.into(), seed, role, variant: variant.into(), features, out },
                &mut log,
            )
        }
    };
    print!("{log}");
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
