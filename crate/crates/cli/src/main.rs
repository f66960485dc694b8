mod analyze;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use grpo_agg::sim::{OptimizerKind, TaskKind};
use grpo_agg::verify::{run_suite, SuiteOptions, MANIFEST};
use grpo_agg::{ClipConfig, Rule};

#[derive(Parser, Debug)]
#[command(
    name = "grpo-agg",
    version,
    about = "Loss-aggregation analysis for group-normalized policy gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the seeded identity suite.
    Verify(VerifyArgs),
    /// Analyze a JSONL rollout log.
    Analyze(AnalyzeArgs),
    /// Train one rule on a toy task.
    Simulate(SimulateArgs),
    /// Train all four rules on identical rollout seeds.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variance floor added inside the advantage normalization.
    #[arg(long)]
    eps_var: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    clip_low: f64,
    #[arg(long, default_value_t = 0.28)]
    clip_high: f64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    input: PathBuf,
    /// Groups per length-statistics window.
    #[arg(long, default_value_t = 16)]
    window: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TaskArg {
    Count,
    FreeLength,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum RuleArg {
    Token,
    Seq,
    Balanced,
    BalancedGen,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value_t = TaskArg::Count)]
    task: TaskArg,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    group_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    prompts: usize,
    #[arg(long, default_value_t = 3)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    t_max: usize,
    /// Prompts per step; all prompts when omitted.
    #[arg(long)]
    batch_prompts: Option<usize>,
    #[arg(long, default_value_t = 1)]
    inner_epochs: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Also write every sampled group as JSONL.
    #[arg(long)]
    dump_rollouts: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum, default_value_t = RuleArg::Balanced)]
    rule: RuleArg,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Also evaluate all rules on the token rule's rollouts.
    #[arg(long)]
    locked_rollouts: bool,
}

impl From<RuleArg> for Rule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Token => Rule::Token,
            RuleArg::Seq => Rule::Seq,
            RuleArg::Balanced => Rule::Balanced,
            RuleArg::BalancedGen => Rule::BalancedGen,
        }
    }
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Count => TaskKind::Count,
            TaskArg::FreeLength => TaskKind::FreeLength,
        }
    }
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

/// Exits with status 2 and clap's usage formatting.
fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

impl CommonArgs {
    fn clip(&self) -> ClipConfig {
        ClipConfig::new(self.clip_low, self.clip_high).unwrap_or_else(|e| usage_error(e))
    }

    fn eps_var(&self, default: f64) -> f64 {
        let eps = self.eps_var.unwrap_or(default);
        if !eps.is_finite() || eps < 0.0 {
            usage_error(format!(
                "--eps-var must be finite and non-negative, got {eps}"
            ));
        }
        eps
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<ExitCode> {
    let clip = args.common.clip();
    if args.common.eps_var(0.0) != 0.0 {
        usage_error("verify checks eps_var = 0 identities; --eps-var must be 0");
    }
    if let Some(name) = &args.inject_fault {
        if !MANIFEST.iter().any(|i| i.name == name) {
            usage_error(format!("unknown identity '{name}'"));
        }
    }
    let report = run_suite(&SuiteOptions {
        seed: args.common.seed,
        clip,
        inject_fault: args.inject_fault.clone(),
        ..SuiteOptions::default()
    });
    let text = report.render();
    print!("{text}");
    if let Some(dir) = &args.common.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("verify_report.txt"), &text)?;
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Simulate(a) => train::simulate(a),
        Command::Compare(a) => train::compare(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
