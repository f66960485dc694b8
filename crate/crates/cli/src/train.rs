use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::Context;
use grpo_agg::io::{write_metrics, write_rollouts, MetricRecord};
use grpo_agg::sim::{
    expected_mean_reward, run_training, TaskKind, TaskSpec, TrainConfig, TrainingRun,
};
use grpo_agg::Rule;
use rayon::prelude::*;

use crate::{usage_error, CompareArgs, SimulateArgs, TrainArgs};

/// Steps at the end of a run over which the pg_loss running mean is reported.
const TAIL_STEPS: usize = 100;

impl TrainArgs {
    fn task(&self) -> TaskSpec {
        let task = match TaskKind::from(self.task) {
            TaskKind::Count => TaskSpec::count(self.prompts, self.vocab, self.t_max),
            TaskKind::FreeLength => TaskSpec::free_length(self.prompts, self.vocab, self.t_max),
        };
        task.unwrap_or_else(|e| usage_error(e))
    }

    fn config(&self, rule: Rule) -> TrainConfig {
        let config = TrainConfig {
            rule,
            group_size: self.group_size,
            learning_rate: self.lr,
            steps: self.steps,
            clip: self.common.clip(),
            eps_var: self.common.eps_var(TrainConfig::default().eps_var),
            seed: self.common.seed,
            prompts_per_batch: self.batch_prompts,
            inner_epochs: self.inner_epochs,
            optimizer: self.optimizer.into(),
        };
        if let Err(e) = config.validate() {
            usage_error(e);
        }
        config
    }
}

fn tail_mean_pg_loss(records: &[MetricRecord]) -> Option<f64> {
    let tail = &records[records.len().saturating_sub(TAIL_STEPS)..];
    let losses: Vec<f64> = tail.iter().filter_map(|r| r.pg_loss).collect();
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

fn write_outputs(
    out: &Path,
    rule: Rule,
    run: &TrainingRun,
    dump_rollouts: bool,
) -> anyhow::Result<()> {
    write_metrics(
        &run.records(),
        out.join(format!("metrics_{}.csv", rule.name())),
    )?;
    let policy_path = out.join(format!("policy_{}.json", rule.name()));
    fs::write(&policy_path, run.final_policy.to_json())
        .with_context(|| format!("writing {}", policy_path.display()))?;
    if dump_rollouts {
        let groups: Vec<(String, &grpo_agg::RolloutGroup)> = run
            .reports
            .iter()
            .enumerate()
            .flat_map(|(step, rep)| {
                rep.batch
                    .iter()
                    .map(move |s| (format!("step{step}-prompt{}", s.prompt), &s.group))
            })
            .collect();
        write_rollouts(
            groups.iter().map(|(id, g)| (id.as_str(), *g)),
            out.join(format!("rollouts_{}.jsonl", rule.name())),
        )?;
    }
    Ok(())
}

fn summary_line(rule: Rule, task: &TaskSpec, run: &TrainingRun, baseline: f64) -> String {
    let tail = tail_mean_pg_loss(&run.records())
        .map(|x| format!("{x:.6e}"))
        .unwrap_or_else(|| "n/a".into());
    format!(
        "{:<13} final_expected_reward={:.6} baseline={:.6} tail_mean_pg_loss={}",
        rule.name(),
        expected_mean_reward(&run.final_policy, task),
        baseline,
        tail
    )
}

fn prepare(train: &TrainArgs) -> anyhow::Result<(TaskSpec, std::path::PathBuf, f64)> {
    let task = train.task();
    let out = train.common.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let baseline = expected_mean_reward(&task.uniform_policy()?, &task);
    Ok((task, out, baseline))
}

pub fn simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let rule = Rule::from(args.rule);
    let config = args.train.config(rule);
    let (task, out, baseline) = prepare(&args.train)?;
    let run = run_training(&task, &config)?;
    write_outputs(&out, rule, &run, args.train.dump_rollouts)?;
    println!("{}", summary_line(rule, &task, &run, baseline));
    Ok(ExitCode::SUCCESS)
}

pub fn compare(args: CompareArgs) -> anyhow::Result<ExitCode> {
    let configs: Vec<TrainConfig> = Rule::ALL.iter().map(|&r| args.train.config(r)).collect();
    let (task, out, baseline) = prepare(&args.train)?;
    let runs: Vec<TrainingRun> = configs
        .par_iter()
        .map(|c| run_training(&task, c))
        .collect::<grpo_agg::Result<_>>()?;

    for (rule, run) in Rule::ALL.into_iter().zip(&runs) {
        write_outputs(&out, rule, run, args.train.dump_rollouts)?;
    }
    let per_rule: Vec<Vec<MetricRecord>> = runs.iter().map(TrainingRun::records).collect();
    let joined: Vec<&MetricRecord> = (0..args.train.steps)
        .flat_map(|step| per_rule.iter().map(move |recs| &recs[step]))
        .collect();
    write_metrics(joined, out.join("comparison.csv"))?;
    if args.locked_rollouts {
        let token = Rule::ALL
            .iter()
            .position(|&r| r == Rule::Token)
            .expect("token rule present");
        write_metrics(
            &runs[token].all_rule_records(),
            out.join("locked_rollouts.csv"),
        )?;
    }

    let mut summary = String::new();
    for (rule, run) in Rule::ALL.into_iter().zip(&runs) {
        summary.push_str(&summary_line(rule, &task, run, baseline));
        summary.push('\n');
    }
    fs::write(out.join("compare_summary.txt"), &summary).context("writing compare summary")?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}
