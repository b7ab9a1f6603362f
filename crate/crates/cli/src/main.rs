mod commands;
mod config;
mod error;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::rundir::{RunDir, CONFIG_FILE};

/// Material diffusion pipeline: data, stage-1 training, reward, finetuning
/// and evaluation. Each command writes a timestamped run directory.
#[derive(Parser)]
#[command(name = "matforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); the built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides run.out, the parent of run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides rl.epochs and reward.epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Overrides diffusion.steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Overrides run.resolution, the grid side in pixels.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    /// Worker threads.
    #[arg(long, global = true, env = "MATFORGE_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Export dataset grids, environments and reward corpora.
    GenData,
    /// Train the stage-1 denoiser.
    TrainDiffusion {
        /// Continue an interrupted run directory from its latest checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample materials from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the realism classifier and reward heads.
    TrainReward,
    /// Keep the lowest-realism candidate prompts per category.
    SelectPrompts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reward_head: PathBuf,
    },
    /// Finetune LoRA adapters with policy gradients.
    RlFinetune {
        #[arg(long, required_unless_present = "resume")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reward_head: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Continue an interrupted run directory from its latest checkpoint.
        #[arg(long, conflicts_with_all = ["checkpoint", "reward_head", "prompts"])]
        resume: Option<PathBuf>,
    },
    /// Render packed grid PNGs.
    Render {
        #[arg(long, required = true, num_args = 1..)]
        grid: Vec<PathBuf>,
    },
    /// Corpus scores, TV ablation and realism curves.
    Eval {
        #[arg(long)]
        reward_head: PathBuf,
        #[arg(long)]
        reward_head_notv: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        rl_metrics: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Sample { .. } => "sample",
            Command::TrainReward => "train-reward",
            Command::SelectPrompts { .. } => "select-prompts",
            Command::RlFinetune { .. } => "rl-finetune",
            Command::Render { .. } => "render",
            Command::Eval { .. } => "eval",
        }
    }

    fn resume_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::TrainDiffusion { resume } | Command::RlFinetune { resume, .. } => resume.as_ref(),
            _ => None,
        }
    }
}

impl Cli {
    fn apply_overrides(&self, cfg: &mut RunConfig) -> CliResult<()> {
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.rl.epochs = e;
            cfg.reward.epochs = e;
        }
        if let Some(s) = self.steps {
            cfg.diffusion.steps = s;
        }
        if let Some(r) = self.resolution {
            cfg.run.resolution = r;
        }
        cfg.validate()
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    }
    let resume = cli.command.resume_dir();
    if resume.is_some() && cli.config.is_some() {
        return Err(CliError::Config("--resume reads the config stored in the run directory; drop --config".into()));
    }
    let mut cfg = match (resume, &cli.config) {
        (Some(dir), _) => RunConfig::load(&dir.join(CONFIG_FILE))?,
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => RunConfig::default(),
    };
    cli.apply_overrides(&mut cfg)?;
    let mut dir = match resume {
        Some(d) => RunDir::open(d)?,
        None => RunDir::create(&cfg.run.out, cli.command.name())?,
    };
    dir.write_config(&cfg)?;
    eprintln!("run directory {}", dir.root().display());
    let result = match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &mut dir),
        Command::TrainDiffusion { resume } => commands::train_diffusion(&cfg, &mut dir, resume.is_some()),
        Command::Sample { checkpoint } => commands::sample(&cfg, &mut dir, checkpoint),
        Command::TrainReward => commands::train_reward(&cfg, &mut dir),
        Command::SelectPrompts { checkpoint, reward_head } => commands::select_prompts(&cfg, &mut dir, checkpoint, reward_head),
        Command::RlFinetune {
            checkpoint,
            reward_head,
            prompts,
            resume,
        } => commands::rl_finetune(
            &cfg,
            &mut dir,
            &commands::RlInputs {
                checkpoint: checkpoint.as_deref(),
                reward_head: reward_head.as_deref(),
                prompts: prompts.as_deref(),
            },
            resume.is_some(),
        ),
        Command::Render { grid } => commands::render(&cfg, &mut dir, grid),
        Command::Eval {
            reward_head,
            reward_head_notv,
            rl_metrics,
        } => commands::eval(
            &cfg,
            &mut dir,
            &commands::EvalInputs {
                reward_head,
                reward_head_notv: reward_head_notv.as_deref(),
                rl_metrics,
            },
        ),
    };
    dir.write_manifest()?;
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
