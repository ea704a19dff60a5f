use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use domino::envs::{EnvKind, Split};
use domino::harness::{self, files, Ablation, ExperimentConfig};
use domino::Result;

#[derive(Parser)]
#[command(name = "domino", version, about = "Disentangled context learning for dynamics generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Jointly train the context encoder and world model with CEM data collection.
    TrainMb(Common),
    /// Train a context-conditioned PPO policy on the frozen encoder from `train-mb`.
    TrainMf(Common),
    /// Evaluate the trained agent in `--out` on a split.
    Eval(Common),
    /// Joint versus decomposed InfoNCE on correlated Gaussians.
    MiBench(Common),
    /// Record encoder contexts on unseen settings.
    ExportEmbeddings(Common),
    /// PCA projection and silhouette score of exported contexts.
    AnalyzeEmbeddings(AnalyzeArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// Run directory for checkpoints and metrics.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Embedding CSV to analyze; defaults to the one `export-embeddings` wrote for `--split`.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Pendulum,
    Cartpole,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Domino,
    Mino,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(env) = self.env {
            cfg.env = match env {
                EnvArg::Pendulum => EnvKind::Pendulum,
                EnvArg::Cartpole => EnvKind::CartPole,
            };
        }
        if let Some(split) = self.split {
            cfg.split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
        }
        if let Some(ablation) = self.ablation {
            cfg.ablation = match ablation {
                AblationArg::Domino => Ablation::Domino,
                AblationArg::Mino => Ablation::Mino,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainMb(c) => {
            let run = harness::train_model_based(&c.config()?, &c.out)?;
            let last = run.rows.last().expect("baseline row");
            println!(
                "{} env steps, {} updates; test return {:.1}, test MSE {:.4e}; InfoNCE ceiling violations {}",
                run.env_steps, run.updates, last.test_return, last.test_mse, run.ceiling_violations
            );
        }
        Command::TrainMf(c) => {
            let run = harness::train_model_free(&c.config()?, &c.out)?;
            println!(
                "{} timesteps, {} updates; final return train {:.1}, test {:.1}",
                run.timesteps, run.updates, run.final_train_return, run.final_test_return
            );
        }
        Command::Eval(c) => {
            let s = harness::evaluate(&c.config()?, &c.out)?;
            println!("{} {} ({}): {:.1} +- {:.1} over {} episodes", s.env, s.split, s.agent, s.mean_return, s.std_return, s.episodes);
        }
        Command::MiBench(c) => {
            let s = harness::run_mi_bench(&c.config()?, &c.out)?;
            println!(
                "analytic {:.4}, joint {:.4} (ln K = {:.4}), decomposed {:.4}, gap {:.4}",
                s.analytic, s.mean_joint, s.ln_k, s.mean_sum, s.mean_gap
            );
        }
        Command::ExportEmbeddings(c) => {
            let cfg = c.config()?;
            let rows = harness::export_embeddings(&cfg, &c.out)?;
            println!("{} context rows written to {}", rows.len(), c.out.join(files::embeddings(cfg.split)).display());
        }
        Command::AnalyzeEmbeddings(a) => {
            let cfg = a.common.config()?;
            let input = a.input.unwrap_or_else(|| a.common.out.join(files::embeddings(cfg.split)));
            if !input.exists() {
                return Err(domino::Error::MissingPrerequisite(format!(
                    "{} not found; run `domino export-embeddings` first",
                    input.display()
                )));
            }
            let rows = harness::read_embeddings_csv(std::fs::File::open(&input)?)?;
            let s = harness::analyze_embeddings(&rows, &a.common.out)?;
            println!("{} trajectories over {} settings: silhouette {:.4}", s.trajectories, s.settings, s.silhouette);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
