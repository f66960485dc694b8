//! Clipped token contributions and the four group-level aggregation rules.
//!
//! Every rule has the form `J = sum_i w_i * sum_t phi_{i,t}` with a
//! per-response weight `w_i` that depends only on lengths and advantages:
//!
//! | rule           | `w_i` for `i` in S+      | `w_i` for `i` in S-      |
//! |----------------|--------------------------|--------------------------|
//! | `token`        | `1/N`                    | `1/N`                    |
//! | `seq`          | `1/(G T_i)`              | `1/(G T_i)`              |
//! | `balanced`     | `(k/G) / N+`             | `(|S-|/G) / N-`          |
//! | `balanced_gen` | `(M+/G) / Z+`            | `(M-/G) / Z-`            |
//!
//! Hence `dJ/drho_{i,t} = w_i * dphi/drho`. Zero-advantage responses have
//! `phi = 0` and contribute nothing under any rule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decomposition::DecompositionReport;
use crate::error::{AggError, Result};
use crate::group::{AdvantageSet, RolloutGroup, Sign};

/// Width of the clip-boundary exclusion zone in units of the step `h`.
pub const GRAD_CHECK_MARGIN_STEPS: f64 = 10.0;

/// Denominator floor for relative errors when both gradients are ~0.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

/// An aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Token,
    Seq,
    Balanced,
    BalancedGen,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Token, Rule::Seq, Rule::Balanced, Rule::BalancedGen];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Token => "token",
            Rule::Seq => "seq",
            Rule::Balanced => "balanced",
            Rule::BalancedGen => "balanced_gen",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = AggError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Rule::Token),
            "seq" => Ok(Rule::Seq),
            "balanced" => Ok(Rule::Balanced),
            "balanced_gen" | "balanced-gen" => Ok(Rule::BalancedGen),
            other => Err(AggError::InvalidConfig(format!("unknown rule '{other}'"))),
        }
    }
}

/// PPO clip bounds: ratios are clamped to `[1 - clip_low, 1 + clip_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    clip_low: f64,
    clip_high: f64,
}

impl ClipConfig {
    pub fn new(clip_low: f64, clip_high: f64) -> Result<Self> {
        if !(clip_low.is_finite() && clip_low > 0.0 && clip_low < 1.0) {
            return Err(AggError::InvalidClip(format!(
                "clip_low must lie in (0, 1), got {clip_low}"
            )));
        }
        if !(clip_high.is_finite() && clip_high > 0.0) {
            return Err(AggError::InvalidClip(format!(
                "clip_high must be positive, got {clip_high}"
            )));
        }
        Ok(Self {
            clip_low,
            clip_high,
        })
    }

    /// Symmetric band `[1 - eps, 1 + eps]`.
    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps)
    }

    pub fn clip_low(&self) -> f64 {
        self.clip_low
    }

    pub fn clip_high(&self) -> f64 {
        self.clip_high
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.clip_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.clip_high
    }
}

impl Default for ClipConfig {
    /// The asymmetric 0.2 / 0.28 pair.
    fn default() -> Self {
        Self {
            clip_low: 0.2,
            clip_high: 0.28,
        }
    }
}

/// Clipped PPO contribution `min(rho*A, clamp(rho, 1-lo, 1+hi)*A)`.
pub fn phi(ratio: f64, advantage: f64, clip: &ClipConfig) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(AggError::NonPositiveRatio(ratio));
    }
    Ok(phi_unchecked(ratio, advantage, clip))
}

#[inline]
fn phi_unchecked(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(clip.lower(), clip.upper()) * advantage;
    unclipped.min(clipped)
}

/// True when the clipped branch is strictly active, i.e. `phi` is flat in `rho`.
#[inline]
pub fn is_clipped(ratio: f64, advantage: f64, clip: &ClipConfig) -> bool {
    (advantage > 0.0 && ratio > clip.upper()) || (advantage < 0.0 && ratio < clip.lower())
}

/// `d phi / d rho`. At a tie between branches the unclipped branch is taken.
#[inline]
pub fn phi_grad(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    if is_clipped(ratio, advantage, clip) {
        0.0
    } else {
        advantage
    }
}

/// Value and ratio gradient of one aggregation rule on one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub rule: Rule,
    pub objective: f64,
    /// `dJ/drho_{i,t}`, laid out like the group's ratios.
    pub grad_ratios: Vec<Vec<f64>>,
    /// Set when every advantage is zero; the objective is then 0.
    pub degenerate: bool,
    /// Fraction of the group's tokens whose clipped branch is active.
    pub clip_fraction: f64,
    pub decomposition: Option<DecompositionReport>,
}

/// Sign-wise advantage masses `M+ = sum_{S+} A_i` and `M- = sum_{S-} (-A_i)`.
pub fn advantage_masses(adv: &AdvantageSet) -> (f64, f64) {
    let a = adv.advantages();
    let m_pos = adv.pos_indices().iter().map(|&i| a[i]).sum();
    let m_neg = adv.neg_indices().iter().map(|&i| -a[i]).sum();
    (m_pos, m_neg)
}

/// Advantage-weighted token masses `Z+ = sum_{S+} A_i T_i` and `Z- = sum_{S-} (-A_i) T_i`.
pub fn token_masses(lengths: &[usize], adv: &AdvantageSet) -> (f64, f64) {
    let a = adv.advantages();
    let z_pos = adv
        .pos_indices()
        .iter()
        .map(|&i| a[i] * lengths[i] as f64)
        .sum();
    let z_neg = adv
        .neg_indices()
        .iter()
        .map(|&i| -a[i] * lengths[i] as f64)
        .sum();
    (z_pos, z_neg)
}

/// Per-response weights `w_i` such that `J = sum_i w_i * sum_t phi_{i,t}`.
pub fn response_weights(rule: Rule, lengths: &[usize], adv: &AdvantageSet) -> Vec<f64> {
    let g = lengths.len() as f64;
    match rule {
        Rule::Token => {
            let n: usize = lengths.iter().sum();
            vec![1.0 / n as f64; lengths.len()]
        }
        Rule::Seq => lengths.iter().map(|&t| 1.0 / (g * t as f64)).collect(),
        Rule::Balanced => {
            let n_pos: usize = adv.pos_indices().iter().map(|&i| lengths[i]).sum();
            let n_neg: usize = adv.neg_indices().iter().map(|&i| lengths[i]).sum();
            let w_pos = adv.pos_indices().len() as f64 / g / n_pos.max(1) as f64;
            let w_neg = adv.neg_indices().len() as f64 / g / n_neg.max(1) as f64;
            (0..lengths.len())
                .map(|i| match adv.sign(i) {
                    Sign::Pos => w_pos,
                    Sign::Neg => w_neg,
                    Sign::Zero => 0.0,
                })
                .collect()
        }
        Rule::BalancedGen => {
            let (m_pos, m_neg) = advantage_masses(adv);
            let (z_pos, z_neg) = token_masses(lengths, adv);
            let w_pos = if z_pos > 0.0 { m_pos / g / z_pos } else { 0.0 };
            let w_neg = if z_neg > 0.0 { m_neg / g / z_neg } else { 0.0 };
            (0..lengths.len())
                .map(|i| match adv.sign(i) {
                    Sign::Pos => w_pos,
                    Sign::Neg => w_neg,
                    Sign::Zero => 0.0,
                })
                .collect()
        }
    }
}

/// Objective from per-response sums `sum_t phi_{i,t}`.
pub fn objective_from_phi_sums(
    rule: Rule,
    lengths: &[usize],
    adv: &AdvantageSet,
    phi_sums: &[f64],
) -> f64 {
    response_weights(rule, lengths, adv)
        .iter()
        .zip(phi_sums)
        .map(|(w, s)| w * s)
        .sum()
}

/// Per-token `phi_{i,t}` for a group with ratios.
pub fn phi_matrix(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<Vec<Vec<f64>>> {
    adv.check_shape(group)?;
    let ratios = group.ratios()?;
    Ok(ratios
        .iter()
        .zip(adv.advantages())
        .map(|(rho, &a)| rho.iter().map(|&r| phi_unchecked(r, a, clip)).collect())
        .collect())
}

pub(crate) fn phi_sums(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<Vec<f64>> {
    Ok(phi_matrix(group, adv, clip)?
        .iter()
        .map(|row| row.iter().sum())
        .collect())
}

/// Objective value only.
pub fn objective_value(
    rule: Rule,
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<f64> {
    let sums = phi_sums(group, adv, clip)?;
    Ok(objective_from_phi_sums(rule, &group.lengths(), adv, &sums))
}

/// Value and analytic ratio gradient under `rule`.
pub fn evaluate(
    rule: Rule,
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<AggregationResult> {
    adv.check_shape(group)?;
    let ratios = group.ratios()?;
    let lengths = group.lengths();
    let weights = response_weights(rule, &lengths, adv);
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut grad_ratios = Vec::with_capacity(ratios.len());
    for ((rho, &a), &w) in ratios.iter().zip(adv.advantages()).zip(&weights) {
        let s: f64 = rho.iter().map(|&r| phi_unchecked(r, a, clip)).sum();
        objective += w * s;
        clipped += rho.iter().filter(|&&r| is_clipped(r, a, clip)).count();
        grad_ratios.push(rho.iter().map(|&r| w * phi_grad(r, a, clip)).collect());
    }
    Ok(AggregationResult {
        rule,
        objective,
        grad_ratios,
        degenerate: adv.all_zero(),
        clip_fraction: clipped as f64 / group.total_tokens() as f64,
        decomposition: None,
    })
}

/// Token aggregation: mean of `phi` over all `N` tokens of the group.
pub fn objective_token(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<AggregationResult> {
    evaluate(Rule::Token, group, adv, clip)
}

/// Sequence aggregation: per-response token mean, then mean over responses.
pub fn objective_seq(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<AggregationResult> {
    evaluate(Rule::Seq, group, adv, clip)
}

/// Balanced aggregation: token means within each sign subset, combined
/// with sequence-count weights. An empty subset contributes 0.
pub fn objective_balanced(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<AggregationResult> {
    evaluate(Rule::Balanced, group, adv, clip)
}

/// Generalized balanced aggregation: subsets normalized by advantage-weighted
/// token mass `Z+-` and combined with advantage-mass weights `M+-/G`.
pub fn objective_balanced_gen(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<AggregationResult> {
    evaluate(Rule::BalancedGen, group, adv, clip)
}

/// Central finite-difference check of `result.grad_ratios`. Returns the
/// maximum relative error over all tokens.
pub fn gradient_check(
    result: &AggregationResult,
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
    h: f64,
) -> Result<f64> {
    adv.check_shape(group)?;
    let ratios = group.ratios()?;
    if result.grad_ratios.len() != ratios.len()
        || result
            .grad_ratios
            .iter()
            .zip(&ratios)
            .any(|(g, r)| g.len() != r.len())
    {
        return Err(AggError::ShapeMismatch(
            "gradient layout differs from the group's token layout".into(),
        ));
    }
    let margin = GRAD_CHECK_MARGIN_STEPS * h;
    let offending: Vec<(usize, usize)> = ratios
        .iter()
        .enumerate()
        .flat_map(|(i, rho)| {
            rho.iter().enumerate().filter_map(move |(t, &r)| {
                let near = (r - clip.lower()).abs() < margin || (r - clip.upper()).abs() < margin;
                near.then_some((i, t))
            })
        })
        .collect();
    if !offending.is_empty() {
        return Err(AggError::BoundaryProximity {
            margin,
            tokens: offending,
        });
    }

    let lengths = group.lengths();
    let base = phi_sums(group, adv, clip)?;
    let mut max_rel = 0.0f64;
    for (i, rho) in ratios.iter().enumerate() {
        let a = adv.advantages()[i];
        for (t, &r) in rho.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut sums = base.clone();
                sums[i] += phi_unchecked(r + delta, a, clip) - phi_unchecked(r, a, clip);
                objective_from_phi_sums(result.rule, &lengths, adv, &sums)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let analytic = result.grad_ratios[i][t];
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_FLOOR);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
