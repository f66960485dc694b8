use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AggError, Result};
use crate::sim::policy::PolicyTable;

/// Symbol the count task asks to be repeated.
pub const SYMBOL_A: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Emit exactly `n(prompt)` copies of symbol `a`, then EOS.
    Count,
    /// Start with the prompt's target symbol; the continuation is free.
    FreeLength,
}

impl FromStr for TaskKind {
    type Err = AggError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" | "count-task" => Ok(TaskKind::Count),
            "free-length" | "free-length-task" => Ok(TaskKind::FreeLength),
            other => Err(AggError::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

/// A toy task with a deterministic 0/1 verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub t_max: usize,
    /// Per prompt: the required count (count task) or the target symbol
    /// (free-length task).
    pub targets: Vec<usize>,
}

impl TaskSpec {
    /// Count task with `n(p) = 1 + p mod (t_max - 1)`.
    pub fn count(n_prompts: usize, vocab_size: usize, t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(AggError::InvalidConfig(
                "count task needs t_max >= 2".into(),
            ));
        }
        let targets = (0..n_prompts).map(|p| 1 + p % (t_max - 1)).collect();
        Self::with_targets(TaskKind::Count, vocab_size, t_max, targets)
    }

    /// Free-length task with target symbol `p mod (vocab_size - 1)`.
    pub fn free_length(n_prompts: usize, vocab_size: usize, t_max: usize) -> Result<Self> {
        let non_eos = vocab_size.saturating_sub(1).max(1);
        let targets = (0..n_prompts).map(|p| p % non_eos).collect();
        Self::with_targets(TaskKind::FreeLength, vocab_size, t_max, targets)
    }

    pub fn with_targets(
        kind: TaskKind,
        vocab_size: usize,
        t_max: usize,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(AggError::InvalidConfig(
                "vocab_size must be at least 2".into(),
            ));
        }
        if targets.is_empty() || t_max == 0 {
            return Err(AggError::InvalidConfig(
                "task needs prompts and t_max >= 1".into(),
            ));
        }
        for (p, &t) in targets.iter().enumerate() {
            let ok = match kind {
                TaskKind::Count => t >= 1 && t < t_max,
                TaskKind::FreeLength => t < vocab_size - 1,
            };
            if !ok {
                return Err(AggError::InvalidConfig(format!(
                    "target {t} of prompt {p} is unreachable"
                )));
            }
        }
        Ok(Self {
            kind,
            vocab_size,
            t_max,
            targets,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.targets.len()
    }

    pub fn eos(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn uniform_policy(&self) -> Result<PolicyTable> {
        PolicyTable::uniform(self.n_prompts(), self.t_max, self.vocab_size)
    }

    /// The lone correct string for a count-task prompt.
    pub fn correct_count_string(&self, prompt: usize) -> Vec<u32> {
        let mut s = vec![SYMBOL_A; self.targets[prompt]];
        s.push(self.eos());
        s
    }
}

/// Deterministic verifier. Malformed input scores 0.
pub fn verify_reward(task: &TaskSpec, prompt: usize, tokens: &[u32]) -> f64 {
    let Some(&target) = task.targets.get(prompt) else {
        return 0.0;
    };
    if tokens.iter().any(|&t| t as usize >= task.vocab_size) {
        return 0.0;
    }
    let correct = match task.kind {
        TaskKind::Count => {
            tokens.len() == target + 1
                && tokens[..target].iter().all(|&t| t == SYMBOL_A)
                && tokens[target] == task.eos()
        }
        TaskKind::FreeLength => tokens.first().is_some_and(|&t| t as usize == target),
    };
    if correct {
        1.0
    } else {
        0.0
    }
}

/// Exact expected reward of `policy` on `prompt` under position-only
/// sampling with truncation at `t_max`.
pub fn expected_reward(policy: &PolicyTable, task: &TaskSpec, prompt: usize) -> f64 {
    let target = task.targets[prompt];
    match task.kind {
        TaskKind::Count => {
            let a: f64 = (0..target)
                .map(|pos| policy.probs(prompt, pos)[SYMBOL_A as usize])
                .product();
            a * policy.probs(prompt, target)[task.eos() as usize]
        }
        TaskKind::FreeLength => policy.probs(prompt, 0)[target],
    }
}

/// Mean of [`expected_reward`] over all prompts.
pub fn expected_mean_reward(policy: &PolicyTable, task: &TaskSpec) -> f64 {
    (0..task.n_prompts())
        .map(|p| expected_reward(policy, task, p))
        .sum::<f64>()
        / task.n_prompts() as f64
}
