//! Reference implementations used as test oracles. They work from plain
//! vectors and share no code with the library beyond its public types.

#![allow(dead_code)]

use grpo_agg::sim::{PolicyTable, SampledGroup};
use grpo_agg::{RolloutGroup, Rule};
use rand::Rng;

pub struct Clip {
    pub low: f64,
    pub high: f64,
}

pub const CLIP: Clip = Clip {
    low: 0.2,
    high: 0.28,
};

/// Relative closeness with the `max(1, |x|)` scaling used for exact identities.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn scaled_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn advantages(rewards: &[f64], eps_var: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / g;
    let sigma = (var + eps_var).sqrt();
    rewards.iter().map(|r| (r - mu) / sigma).collect()
}

pub fn phi(rho: f64, a: f64, c: &Clip) -> f64 {
    let clipped = rho.max(1.0 - c.low).min(1.0 + c.high);
    (rho * a).min(clipped * a)
}

#[derive(Debug, Clone)]
pub struct Group {
    pub rewards: Vec<f64>,
    pub ratios: Vec<Vec<f64>>,
}

impl Group {
    pub fn g(&self) -> usize {
        self.rewards.len()
    }

    pub fn n(&self) -> usize {
        self.ratios.iter().map(Vec::len).sum()
    }

    pub fn to_lib(&self, eps_var: f64) -> RolloutGroup {
        RolloutGroup::from_ratios(&self.rewards, self.ratios.clone(), eps_var).unwrap()
    }

    fn phis(&self, adv: &[f64], c: &Clip) -> Vec<Vec<f64>> {
        self.ratios
            .iter()
            .zip(adv)
            .map(|(row, &a)| row.iter().map(|&r| phi(r, a, c)).collect())
            .collect()
    }

    pub fn token_objective(&self, adv: &[f64], c: &Clip) -> f64 {
        let s: f64 = self.phis(adv, c).iter().flatten().sum();
        s / self.n() as f64
    }

    pub fn seq_objective(&self, adv: &[f64], c: &Clip) -> f64 {
        let per: f64 = self
            .phis(adv, c)
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .sum();
        per / self.g() as f64
    }

    /// Balanced objective with subsets taken from the reward values
    /// (reward 1 positive, reward 0 negative).
    pub fn binary_balanced_objective(&self, adv: &[f64], c: &Clip) -> f64 {
        let phis = self.phis(adv, c);
        let g = self.g() as f64;
        let mut total = 0.0;
        for target in [1.0, 0.0] {
            let idx: Vec<usize> = (0..self.g())
                .filter(|&i| self.rewards[i] == target)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let tokens: usize = idx.iter().map(|&i| phis[i].len()).sum();
            let s: f64 = idx.iter().flat_map(|&i| phis[i].iter()).sum();
            total += (idx.len() as f64 / g) * s / tokens as f64;
        }
        total
    }

    /// Generalized balanced objective from its mass-weighted definition.
    pub fn gen_objective(&self, adv: &[f64], c: &Clip) -> f64 {
        let phis = self.phis(adv, c);
        let g = self.g() as f64;
        let (mut m_pos, mut m_neg, mut z_pos, mut z_neg, mut s_pos, mut s_neg) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, &a) in adv.iter().enumerate() {
            let t = phis[i].len() as f64;
            let s: f64 = phis[i].iter().sum();
            if a > 0.0 {
                m_pos += a;
                z_pos += a * t;
                s_pos += s;
            } else if a < 0.0 {
                m_neg += -a;
                z_neg += -a * t;
                s_neg += s;
            }
        }
        let mut j = 0.0;
        if z_pos > 0.0 {
            j += (m_pos / g) * s_pos / z_pos;
        }
        if z_neg > 0.0 {
            j += (m_neg / g) * s_neg / z_neg;
        }
        j
    }

    pub fn objective(&self, rule: Rule, adv: &[f64], c: &Clip) -> f64 {
        match rule {
            Rule::Token => self.token_objective(adv, c),
            Rule::Seq => self.seq_objective(adv, c),
            Rule::Balanced => self.binary_balanced_objective(adv, c),
            Rule::BalancedGen => self.gen_objective(adv, c),
        }
    }
}

pub fn log_uniform_ratio<R: Rng>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        return 1.0;
    }
    rng.gen_range(-half_width..half_width).exp()
}

/// Binary group, `G` in `[2, 32]`, both reward values present.
pub fn random_binary<R: Rng>(rng: &mut R, max_len: usize, half_width: f64) -> Group {
    let g = rng.gen_range(2..=32usize);
    let k = rng.gen_range(1..g);
    let mut rewards = vec![0.0; g];
    let mut placed = 0;
    while placed < k {
        let i = rng.gen_range(0..g);
        if rewards[i] == 0.0 {
            rewards[i] = 1.0;
            placed += 1;
        }
    }
    let ratios = (0..g)
        .map(|_| {
            (0..rng.gen_range(1..=max_len))
                .map(|_| log_uniform_ratio(rng, half_width))
                .collect()
        })
        .collect();
    Group { rewards, ratios }
}

/// Real-valued rewards, lengths in `[1, max_len]`.
pub fn random_real<R: Rng>(rng: &mut R, max_len: usize) -> Group {
    let g = rng.gen_range(2..=32usize);
    let rewards = (0..g).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ratios = (0..g)
        .map(|_| {
            (0..rng.gen_range(1..=max_len))
                .map(|_| log_uniform_ratio(rng, 0.5))
                .collect()
        })
        .collect();
    Group { rewards, ratios }
}

/// Count-task reward for a literal token string.
pub fn count_reward(target: usize, eos: u32, tokens: &[u32]) -> f64 {
    let ok = tokens.len() == target + 1
        && tokens[..target].iter().all(|&t| t == 0)
        && tokens[target] == eos;
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Expected count-task reward of the uniform policy by enumerating every
/// sequence the sampler can emit: EOS-terminated strings of length at most
/// `t_max`, and EOS-free strings of length exactly `t_max`.
pub fn enumerate_uniform_reward(targets: &[usize], vocab: usize, t_max: usize) -> f64 {
    let eos = (vocab - 1) as u32;
    let p = 1.0 / vocab as f64;
    let mut total = 0.0;
    for &target in targets {
        let mut expected = 0.0;
        let mut mass = 0.0;
        let mut stack: Vec<Vec<u32>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            for s in 0..vocab as u32 {
                let mut seq = prefix.clone();
                seq.push(s);
                if s == eos || seq.len() == t_max {
                    let prob = p.powi(seq.len() as i32);
                    mass += prob;
                    expected += prob * count_reward(target, eos, &seq);
                } else {
                    stack.push(seq);
                }
            }
        }
        assert!(
            (mass - 1.0).abs() < 1e-12,
            "enumeration covers the sample space"
        );
        total += expected;
    }
    total / targets.len() as f64
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-response weight `w_i` such that the rule's objective is
/// `sum_i w_i sum_t rho_{i,t} A_i` when no clipping is active.
pub fn unclipped_weights(rule: Rule, lengths: &[usize], adv: &[f64]) -> Vec<f64> {
    let g = lengths.len() as f64;
    let n: usize = lengths.iter().sum();
    match rule {
        Rule::Token => vec![1.0 / n as f64; lengths.len()],
        Rule::Seq => lengths.iter().map(|&t| 1.0 / (g * t as f64)).collect(),
        Rule::Balanced => {
            let count = |f: &dyn Fn(f64) -> bool| adv.iter().filter(|&&a| f(a)).count() as f64;
            let toks = |f: &dyn Fn(f64) -> bool| {
                lengths
                    .iter()
                    .zip(adv)
                    .filter(|(_, &a)| f(a))
                    .map(|(&t, _)| t)
                    .sum::<usize>() as f64
            };
            let (kp, kn) = (count(&|a| a > 0.0), count(&|a| a < 0.0));
            let (np, nn) = (toks(&|a| a > 0.0), toks(&|a| a < 0.0));
            adv.iter()
                .map(|&a| {
                    if a > 0.0 {
                        kp / g / np
                    } else if a < 0.0 {
                        kn / g / nn
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Rule::BalancedGen => {
            let mp: f64 = adv.iter().filter(|&&a| a > 0.0).sum();
            let mn: f64 = -adv.iter().filter(|&&a| a < 0.0).sum::<f64>();
            let zp: f64 = lengths
                .iter()
                .zip(adv)
                .filter(|(_, &a)| a > 0.0)
                .map(|(&t, &a)| a * t as f64)
                .sum();
            let zn: f64 = -lengths
                .iter()
                .zip(adv)
                .filter(|(_, &a)| a < 0.0)
                .map(|(&t, &a)| a * t as f64)
                .sum::<f64>();
            adv.iter()
                .map(|&a| {
                    if a > 0.0 {
                        mp / g / zp
                    } else if a < 0.0 {
                        mn / g / zn
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    }
}

/// REINFORCE-with-baseline direction at ratios 1: the batch mean over groups
/// of `sum_i w_i A_i sum_t grad log pi(o_t)`, computed from scratch on the
/// logit table.
pub fn reinforce_direction(policy: &PolicyTable, batch: &[SampledGroup], rule: Rule) -> Vec<f64> {
    let v = policy.vocab();
    let mut grad = vec![0.0; policy.n_params()];
    for s in batch {
        let lengths = s.group.lengths();
        let adv = s.advantages.advantages();
        let w = unclipped_weights(rule, &lengths, adv);
        for i in 0..lengths.len() {
            let tokens = s.tokens(i);
            for (pos, &o) in tokens.iter().enumerate() {
                let base = (s.prompt * policy.t_max() + pos) * v;
                let pi = softmax(&policy.logits()[base..base + v]);
                for sym in 0..v {
                    let ind = if sym as u32 == o { 1.0 } else { 0.0 };
                    grad[base + sym] += w[i] * adv[i] * (ind - pi[sym]) / batch.len() as f64;
                }
            }
        }
    }
    grad
}
