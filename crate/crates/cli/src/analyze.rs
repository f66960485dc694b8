use std::fmt::Write as _;
use std::fs;
use std::process::ExitCode;

use anyhow::Context;
use grpo_agg::io::{format_float, read_rollouts, write_metrics, MetricRecord, ParsedGroup};
use grpo_agg::{
    evaluate, length_stats, normalize_advantages, regime_report, AdvantageSet, AggError,
    LengthStats, RegimeThresholds, Rule,
};

use crate::{usage_error, AnalyzeArgs};

const GROUP_HEADER: &str = "line,group_id,prompt_id,size,tokens,k,mean_reward,token,seq,balanced,balanced_gen,clip_fraction";

struct Analyzed {
    parsed: ParsedGroup,
    adv: AdvantageSet,
    /// Objective per rule in `Rule::ALL` order; `None` for length-only groups.
    objectives: Option<[f64; 4]>,
    clip_fraction: Option<f64>,
}

fn opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn stats_line(label: &str, stats: &LengthStats, thresholds: &RegimeThresholds) -> String {
    format!(
        "{label} responses={} mean_len={} len_cv={} len_gap={} tbar_pos={} tbar_neg={} regime={}",
        stats.n_responses,
        format_float(stats.mean_len),
        format_float(stats.len_cv),
        opt(stats.len_gap),
        opt(stats.tbar_pos),
        opt(stats.tbar_neg),
        regime_report(stats, thresholds)
    )
}

fn window_stats(items: &[Analyzed]) -> grpo_agg::Result<LengthStats> {
    let groups: Vec<_> = items.iter().map(|a| a.parsed.group.clone()).collect();
    let advs: Vec<_> = items.iter().map(|a| a.adv.clone()).collect();
    length_stats(&groups, &advs)
}

pub fn run(args: AnalyzeArgs) -> anyhow::Result<ExitCode> {
    let clip = args.common.clip();
    let eps_var = args.common.eps_var(0.0);
    if args.window == 0 {
        usage_error("--window must be at least 1");
    }
    let out = args.common.out_dir();

    let reader = read_rollouts(&args.input, eps_var).with_context(|| "opening rollout log")?;
    let mut items = Vec::new();
    let mut n_errors = 0usize;
    let mut n_degenerate = 0usize;
    for entry in reader {
        let parsed = match entry {
            Ok(p) => p,
            Err(e @ AggError::Io { .. }) => return Err(e.into()),
            Err(e) => {
                eprintln!("error: {e}");
                n_errors += 1;
                continue;
            }
        };
        let adv = match normalize_advantages(&parsed.group) {
            Ok(a) => a,
            Err(AggError::DegenerateGroup) => {
                n_degenerate += 1;
                AdvantageSet::degenerate(&parsed.group)
            }
            Err(e) => {
                eprintln!("error: line {}: {e}", parsed.line);
                n_errors += 1;
                continue;
            }
        };
        let (objectives, clip_fraction) = if parsed.is_length_only() {
            (None, None)
        } else {
            let mut obj = [0.0; 4];
            let mut cf = 0.0;
            for (slot, rule) in Rule::ALL.into_iter().enumerate() {
                let r = evaluate(rule, &parsed.group, &adv, &clip)?;
                obj[slot] = r.objective;
                cf = r.clip_fraction;
            }
            (Some(obj), Some(cf))
        };
        items.push(Analyzed {
            parsed,
            adv,
            objectives,
            clip_fraction,
        });
    }

    if items.is_empty() {
        eprintln!("no groups parsed from {}", args.input.display());
        return Ok(ExitCode::from(1));
    }
    let n_length_only = items.iter().filter(|a| a.objectives.is_none()).count();
    if n_length_only > 0 {
        println!(
            "notice: {n_length_only} length-only group(s) carry no ratios; objective columns left empty for them"
        );
    }
    if n_degenerate > 0 {
        println!("notice: {n_degenerate} group(s) with identical rewards have zero advantages");
    }
    if n_errors > 0 {
        println!("notice: {n_errors} line(s) rejected; see errors above");
    }

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut per_group = String::from(GROUP_HEADER);
    per_group.push('\n');
    for a in &items {
        let g = &a.parsed.group;
        let rewards = g.rewards();
        let objs: Vec<String> = match a.objectives {
            Some(o) => o.iter().map(|&x| format_float(x)).collect(),
            None => vec![String::new(); 4],
        };
        let _ = writeln!(
            per_group,
            "{},{},{},{},{},{},{},{},{}",
            a.parsed.line,
            csv_field(&a.parsed.group_id),
            csv_field(g.prompt_id()),
            g.size(),
            g.total_tokens(),
            a.adv.k(),
            format_float(rewards.iter().sum::<f64>() / rewards.len() as f64),
            objs.join(","),
            opt(a.clip_fraction)
        );
    }
    let group_path = out.join("group_objectives.csv");
    fs::write(&group_path, per_group)
        .with_context(|| format!("writing {}", group_path.display()))?;

    let thresholds = RegimeThresholds::default();
    let mut records = Vec::new();
    let mut summary = String::new();
    for (w, chunk) in items.chunks(args.window).enumerate() {
        let stats = window_stats(chunk)?;
        let first = chunk[0].parsed.line;
        let last = chunk[chunk.len() - 1].parsed.line;
        let _ = writeln!(
            summary,
            "{}",
            stats_line(
                &format!("window {w} lines {first}-{last} groups={}", chunk.len()),
                &stats,
                &thresholds
            )
        );
        let n_resp: usize = chunk.iter().map(|a| a.parsed.group.size()).sum();
        let reward_sum: f64 = chunk.iter().flat_map(|a| a.parsed.group.rewards()).sum();
        let k_mean = mean(chunk.iter().map(|a| a.adv.k() as f64));
        let clip_fraction = mean(chunk.iter().filter_map(|a| a.clip_fraction));
        for (slot, rule) in Rule::ALL.into_iter().enumerate() {
            let objective = mean(chunk.iter().filter_map(|a| a.objectives.map(|o| o[slot])));
            records.push(MetricRecord {
                step: w,
                rule: rule.name().to_string(),
                objective,
                pg_loss: objective.map(|o| -o),
                len_cv: Some(stats.len_cv),
                len_gap: stats.len_gap,
                tbar_pos: stats.tbar_pos,
                tbar_neg: stats.tbar_neg,
                mean_reward: Some(reward_sum / n_resp as f64),
                k_mean,
                clip_fraction,
            });
        }
    }
    let overall = window_stats(&items)?;
    let _ = writeln!(
        summary,
        "{}",
        stats_line(
            &format!("overall groups={}", items.len()),
            &overall,
            &thresholds
        )
    );

    let metrics_path = out.join("analyze_metrics.csv");
    write_metrics(&records, &metrics_path)?;
    let summary_path = out.join("regime_summary.txt");
    fs::write(&summary_path, &summary)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    print!("{summary}");
    println!(
        "wrote {} and {}",
        metrics_path.display(),
        group_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
