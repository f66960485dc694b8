//! Rollout sampling and the optimization loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{evaluate, ClipConfig, Rule};
use crate::decomposition::length_stats;
use crate::error::{AggError, Result};
use crate::group::{normalize_advantages, AdvantageSet, Response, RolloutGroup};
use crate::io::MetricRecord;
use crate::sim::policy::PolicyTable;
use crate::sim::task::{verify_reward, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training hyperparameters.
///
/// `learning_rate` defaults to `1e-2`: the `1e-6` used for billion-parameter
/// models leaves a tabular policy frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rule: Rule,
    pub group_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub clip: ClipConfig,
    pub eps_var: f64,
    pub seed: u64,
    /// `None` uses every prompt each step.
    pub prompts_per_batch: Option<usize>,
    pub inner_epochs: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rule: Rule::Balanced,
            group_size: 16,
            learning_rate: 1e-2,
            steps: 200,
            clip: ClipConfig::default(),
            eps_var: 1e-6,
            seed: 0,
            prompts_per_batch: None,
            inner_epochs: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AggError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.eps_var.is_finite() && self.eps_var >= 0.0) {
            return bad("eps_var must be non-negative");
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be at least 1");
        }
        if self.prompts_per_batch == Some(0) {
            return bad("prompts_per_batch must be at least 1");
        }
        Ok(())
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for a `(seed, a, b)` triple, e.g. `(run seed, step, prompt slot)`.
pub fn derive_seed(seed: u64, a: usize, b: usize) -> u64 {
    mix(mix(mix(seed) ^ a as u64) ^ b as u64)
}

/// A sampled group together with what training needs to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub prompt: usize,
    pub group: RolloutGroup,
    pub advantages: AdvantageSet,
    /// Responses that hit `t_max` without emitting EOS.
    pub truncated: Vec<bool>,
}

impl SampledGroup {
    pub fn tokens(&self, i: usize) -> &[u32] {
        self.group.responses()[i]
            .tokens()
            .expect("sampled responses carry tokens")
    }
}

fn sample_symbol(probs: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (v, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return v as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// Samples `g` responses autoregressively from `policy` at temperature 1 and
/// records per-token ratios `pi_policy / pi_old`.
pub fn sample_group(
    policy: &PolicyTable,
    old: &PolicyTable,
    task: &TaskSpec,
    prompt: usize,
    g: usize,
    eps_var: f64,
    seed: u64,
) -> Result<SampledGroup> {
    if prompt >= policy.n_prompts() || prompt >= task.n_prompts() {
        return Err(AggError::InvalidConfig(format!(
            "prompt {prompt} out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eos = policy.eos();
    let mut responses = Vec::with_capacity(g);
    let mut truncated = Vec::with_capacity(g);
    for _ in 0..g {
        let mut tokens = Vec::new();
        for pos in 0..policy.t_max() {
            let s = sample_symbol(&policy.probs(prompt, pos), &mut rng);
            tokens.push(s);
            if s == eos {
                break;
            }
        }
        truncated.push(tokens.last() != Some(&eos));
        let reward = verify_reward(task, prompt, &tokens);
        let lp_new = policy.sequence_log_probs(prompt, &tokens);
        let lp_old = old.sequence_log_probs(prompt, &tokens);
        responses.push(Response::from_logprobs(tokens, reward, lp_new, lp_old)?);
    }
    let group = RolloutGroup::new(prompt.to_string(), responses, eps_var)?;
    let advantages = match normalize_advantages(&group) {
        Err(AggError::DegenerateGroup) => AdvantageSet::degenerate(&group),
        other => other?,
    };
    Ok(SampledGroup {
        prompt,
        group,
        advantages,
        truncated,
    })
}

/// Current ratios `pi_policy / pi_old` for the fixed tokens of `sample`.
pub fn current_ratios(
    policy: &PolicyTable,
    old: &PolicyTable,
    sample: &SampledGroup,
) -> Vec<Vec<f64>> {
    (0..sample.group.size())
        .map(|i| {
            let toks = sample.tokens(i);
            policy
                .sequence_log_probs(sample.prompt, toks)
                .iter()
                .zip(old.sequence_log_probs(sample.prompt, toks))
                .map(|(n, o)| (n - o).exp())
                .collect()
        })
        .collect()
}

/// Batch-mean surrogate objective and its gradient with respect to every
/// logit of `policy`, with the sampled tokens held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGradient {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub clip_fraction: f64,
}

pub fn surrogate_gradient(
    policy: &PolicyTable,
    old: &PolicyTable,
    batch: &[SampledGroup],
    rule: Rule,
    clip: &ClipConfig,
) -> Result<SurrogateGradient> {
    let mut grad = vec![0.0; policy.n_params()];
    let mut objective = 0.0;
    let mut clipped_tokens = 0.0;
    let mut total_tokens = 0usize;
    let scale = 1.0 / batch.len() as f64;
    for (gi, sample) in batch.iter().enumerate() {
        let group = sample
            .group
            .with_ratios(current_ratios(policy, old, sample))?;
        let res = evaluate(rule, &group, &sample.advantages, clip)?;
        objective += scale * res.objective;
        clipped_tokens += res.clip_fraction * group.total_tokens() as f64;
        total_tokens += group.total_tokens();
        let ratios = group.ratios()?;
        for (i, (g_row, rho_row)) in res.grad_ratios.iter().zip(&ratios).enumerate() {
            for (pos, ((&g, &rho), &sym)) in g_row
                .iter()
                .zip(rho_row.iter())
                .zip(sample.tokens(i))
                .enumerate()
            {
                if g == 0.0 {
                    continue;
                }
                // d rho / d z_v = rho * (1[v = sym] - pi_v)
                let c = scale * g * rho;
                let off = policy.offset(sample.prompt, pos);
                for (v, p) in policy.probs(sample.prompt, pos).iter().enumerate() {
                    let ind = if v as u32 == sym { 1.0 } else { 0.0 };
                    grad[off + v] += c * (ind - p);
                }
            }
        }
        if !grad.iter().all(|x| x.is_finite()) {
            return Err(AggError::NonFiniteGradient {
                group: gi,
                prompt: sample.prompt,
            });
        }
    }
    Ok(SurrogateGradient {
        objective,
        grad,
        clip_fraction: if total_tokens == 0 {
            0.0
        } else {
            clipped_tokens / total_tokens as f64
        },
    })
}

/// Batch-mean surrogate objective only.
pub fn surrogate_objective(
    policy: &PolicyTable,
    old: &PolicyTable,
    batch: &[SampledGroup],
    rule: Rule,
    clip: &ClipConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for sample in batch {
        let group = sample
            .group
            .with_ratios(current_ratios(policy, old, sample))?;
        total += evaluate(rule, &group, &sample.advantages, clip)?.objective;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient-ascent optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u32,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            },
        }
    }

    /// Moves `params` along `grad` (ascent).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += lr * g;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] += lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

/// Everything one training step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Row for the applied rule.
    pub record: MetricRecord,
    /// Rows for all four rules evaluated on this step's rollouts.
    pub all_rules: Vec<MetricRecord>,
    pub batch: Vec<SampledGroup>,
}

/// Prompts used at `step`: a contiguous cyclic window over the prompt set.
pub fn batch_prompts(step: usize, n_prompts: usize, per_batch: Option<usize>) -> Vec<usize> {
    let b = per_batch.unwrap_or(n_prompts);
    (0..b).map(|j| (step * b + j) % n_prompts).collect()
}

/// Samples each prompt's group from `old` with its per-`(step, prompt)` seed.
pub fn sample_batch(
    policy: &PolicyTable,
    old: &PolicyTable,
    task: &TaskSpec,
    prompts: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<Vec<SampledGroup>> {
    prompts
        .iter()
        .enumerate()
        .map(|(slot, &p)| {
            sample_group(
                policy,
                old,
                task,
                p,
                config.group_size,
                config.eps_var,
                derive_seed(config.seed, step, slot),
            )
        })
        .collect()
}

fn step_record(
    step: usize,
    rule: Rule,
    objective: f64,
    clip_fraction: f64,
    batch: &[SampledGroup],
) -> Result<MetricRecord> {
    let groups: Vec<RolloutGroup> = batch.iter().map(|s| s.group.clone()).collect();
    let advs: Vec<AdvantageSet> = batch.iter().map(|s| s.advantages.clone()).collect();
    let stats = length_stats(&groups, &advs)?;
    let n_resp: usize = groups.iter().map(RolloutGroup::size).sum();
    let mean_reward = groups.iter().flat_map(|g| g.rewards()).sum::<f64>() / n_resp as f64;
    let k_mean = advs.iter().map(|a| a.k() as f64).sum::<f64>() / advs.len() as f64;
    Ok(MetricRecord {
        step,
        rule: rule.name().to_string(),
        objective: Some(objective),
        pg_loss: Some(-objective),
        len_cv: Some(stats.len_cv),
        len_gap: stats.len_gap,
        tbar_pos: stats.tbar_pos,
        tbar_neg: stats.tbar_neg,
        mean_reward: Some(mean_reward),
        k_mean: Some(k_mean),
        clip_fraction: Some(clip_fraction),
    })
}

/// Applies `config.inner_epochs` updates under `config.rule` to the batch
/// sampled for `step`. Objectives in the report are evaluated before the
/// first update (ratios relative to `old`).
pub fn train_step_on_batch(
    policy: &PolicyTable,
    old: &PolicyTable,
    optimizer: &mut Optimizer,
    batch: Vec<SampledGroup>,
    config: &TrainConfig,
    step: usize,
) -> Result<(PolicyTable, StepReport)> {
    let mut all_rules = Vec::with_capacity(Rule::ALL.len());
    let mut applied = None;
    for rule in Rule::ALL {
        let s = surrogate_gradient(policy, old, &batch, rule, &config.clip)?;
        all_rules.push(step_record(
            step,
            rule,
            s.objective,
            s.clip_fraction,
            &batch,
        )?);
        if rule == config.rule {
            applied = Some(s);
        }
    }
    let first = applied.expect("config rule is one of Rule::ALL");
    let record = all_rules
        .iter()
        .find(|r| r.rule == config.rule.name())
        .cloned()
        .expect("record for applied rule");

    let mut next = policy.clone();
    optimizer.ascend(next.logits_mut(), &first.grad, config.learning_rate);
    for _ in 1..config.inner_epochs {
        let s = surrogate_gradient(&next, old, &batch, config.rule, &config.clip)?;
        optimizer.ascend(next.logits_mut(), &s.grad, config.learning_rate);
    }
    Ok((
        next,
        StepReport {
            record,
            all_rules,
            batch,
        },
    ))
}

/// One outer step: sample from `old`, then update.
pub fn train_step(
    policy: &PolicyTable,
    old: &PolicyTable,
    optimizer: &mut Optimizer,
    task: &TaskSpec,
    config: &TrainConfig,
    step: usize,
) -> Result<(PolicyTable, StepReport)> {
    let prompts = batch_prompts(step, task.n_prompts(), config.prompts_per_batch);
    let batch = sample_batch(old, old, task, &prompts, config, step)?;
    train_step_on_batch(policy, old, optimizer, batch, config, step)
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub reports: Vec<StepReport>,
    pub final_policy: PolicyTable,
}

impl TrainingRun {
    /// Applied-rule rows, one per step.
    pub fn records(&self) -> Vec<MetricRecord> {
        self.reports.iter().map(|r| r.record.clone()).collect()
    }

    /// All-rule rows on this run's rollouts, four per step.
    pub fn all_rule_records(&self) -> Vec<MetricRecord> {
        self.reports
            .iter()
            .flat_map(|r| r.all_rules.iter().cloned())
            .collect()
    }
}

/// Trains from the uniform policy.
pub fn run_training(task: &TaskSpec, config: &TrainConfig) -> Result<TrainingRun> {
    run_training_from(task.uniform_policy()?, task, config)
}

/// Trains from `initial`, snapshotting the old policy at each step start.
pub fn run_training_from(
    initial: PolicyTable,
    task: &TaskSpec,
    config: &TrainConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    if initial.n_prompts() != task.n_prompts()
        || initial.t_max() != task.t_max
        || initial.vocab() != task.vocab_size
    {
        return Err(AggError::InvalidConfig(
            "policy shape does not match the task".into(),
        ));
    }
    let mut optimizer = Optimizer::new(config.optimizer, initial.n_params());
    let mut policy = initial;
    let mut reports = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let old = policy.clone();
        let (next, report) = train_step(&policy, &old, &mut optimizer, task, config, step)?;
        policy = next;
        reports.push(report);
    }
    Ok(TrainingRun {
        reports,
        final_policy: policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::task::TaskKind;

    fn small_task() -> TaskSpec {
        TaskSpec::count(4, 3, 8).unwrap()
    }

    #[test]
    fn first_step_ratios_are_one() {
        let task = small_task();
        let p = task.uniform_policy().unwrap();
        let s = sample_group(&p, &p, &task, 2, 16, 1e-6, 11).unwrap();
        for r in s.group.responses() {
            assert!(r.ratios().unwrap().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn deterministic_forced_policy() {
        let task = TaskSpec::with_targets(TaskKind::Count, 3, 8, vec![3]).unwrap();
        let mut p = task.uniform_policy().unwrap();
        for pos in 0..8 {
            let z = if pos < 3 {
                [60.0, -60.0, -60.0]
            } else {
                [-60.0, -60.0, 60.0]
            };
            p.set_logits_at(0, pos, &z).unwrap();
        }
        let s = sample_group(&p, &p, &task, 0, 4, 1e-6, 5).unwrap();
        for r in s.group.responses() {
            assert_eq!(r.reward(), 1.0);
            assert_eq!(r.len(), 4);
        }
        let tied = sample_group(&p, &p, &task, 0, 4, 0.0, 5).unwrap();
        assert!(tied.advantages.all_zero());
        assert!(s.truncated.iter().all(|t| !t));
    }

    #[test]
    fn truncation_is_flagged() {
        let task = TaskSpec::with_targets(TaskKind::Count, 3, 5, vec![2]).unwrap();
        let mut p = task.uniform_policy().unwrap();
        for pos in 0..5 {
            p.set_logits_at(0, pos, &[60.0, -60.0, -60.0]).unwrap();
        }
        let s = sample_group(&p, &p, &task, 0, 3, 1e-6, 1).unwrap();
        assert!(s.truncated.iter().all(|&t| t));
        assert!(s
            .group
            .responses()
            .iter()
            .all(|r| r.len() == 5 && r.reward() == 0.0));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let task = small_task();
        let p = task.uniform_policy().unwrap();
        let a = sample_group(&p, &p, &task, 1, 16, 1e-6, 99).unwrap();
        let b = sample_group(&p, &p, &task, 1, 16, 1e-6, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_group(&p, &p, &task, 1, 16, 1e-6, 100).unwrap();
        assert_ne!(a.group, c.group);
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        // every response is correct, so every group has zero advantage
        let task = TaskSpec::with_targets(TaskKind::FreeLength, 3, 4, vec![0, 0]).unwrap();
        let mut p = task.uniform_policy().unwrap();
        for prompt in 0..2 {
            p.set_logits_at(prompt, 0, &[80.0, -80.0, -80.0]).unwrap();
        }
        let config = TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        };
        for rule in Rule::ALL {
            let cfg = TrainConfig {
                rule,
                ..config.clone()
            };
            let run = run_training_from(p.clone(), &task, &cfg).unwrap();
            assert_eq!(run.final_policy, p);
        }
    }

    #[test]
    fn zero_steps_returns_initial_policy() {
        let task = small_task();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let run = run_training(&task, &cfg).unwrap();
        assert!(run.reports.is_empty());
        assert_eq!(run.final_policy, task.uniform_policy().unwrap());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig {
            group_size: 1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            inner_epochs: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            prompts_per_batch: Some(0),
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn batch_prompt_cycling() {
        assert_eq!(batch_prompts(0, 4, None), vec![0, 1, 2, 3]);
        assert_eq!(batch_prompts(1, 5, Some(2)), vec![2, 3]);
        assert_eq!(batch_prompts(2, 5, Some(2)), vec![4, 0]);
    }

    #[test]
    fn sgd_and_adam_move_uphill() {
        let grad = [1.0, -2.0];
        let mut p = [0.0, 0.0];
        Optimizer::new(OptimizerKind::Sgd, 2).ascend(&mut p, &grad, 0.1);
        assert_eq!(p, [0.1, -0.2]);
        let mut q = [0.0, 0.0];
        Optimizer::new(OptimizerKind::Adam, 2).ascend(&mut q, &grad, 0.1);
        assert!((q[0] - 0.1).abs() < 1e-6 && (q[1] + 0.1).abs() < 1e-6);
    }
}
