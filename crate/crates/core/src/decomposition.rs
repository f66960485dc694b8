//! Sign-split rearrangements of the aggregation objectives and pooled
//! response-length statistics.
//!
//! Writing `phi_{i,t} = A_i * delta_{i,t}` and using the binary closed form
//! `a+ = sqrt((G-k)/k)`, `a- = sqrt(k/(G-k))`:
//!
//! ```text
//! J_token = sqrt(k(G-k))/N * (T+ d+tok - T- d-tok)      d+-tok = token mean of delta in S+-
//! J_seq   = sqrt(k(G-k))/G * (d+seq - d-seq)            d+-seq = response mean of per-response delta means
//! J_BA    = sqrt(k(G-k))/G * (d+BA  - d-BA)             d+-BA  = token mean of delta in S+-
//! J_gen   = M+/G * d+gen - M-/G * d-gen                 d+-gen = (1/Z+-) sum |A_i| sum_t delta_{i,t}
//! ```
//!
//! Delta sums are recovered from phi sums by dividing by the closed-form
//! advantage, never by a per-response `A_i` that could be zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    advantage_masses, objective_from_phi_sums, phi_sums, token_masses, AggregationResult,
    ClipConfig, Rule,
};
use crate::error::{AggError, Result};
use crate::group::{binary_closed_form, AdvantageSet, RolloutGroup};

/// Tolerance for the exact algebraic identities, scaled by `max(1, |x|)`.
pub const IDENTITY_TOL: f64 = 1e-12;

pub(crate) fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Sign-split terms of one rule's objective on one group.
///
/// Subset-level fields of an empty subset are reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub rule: Rule,
    /// `sqrt(k(G-k))/N` for token, `sqrt(k(G-k))/G` for seq and balanced,
    /// `M+/G` for balanced_gen.
    pub prefactor: f64,
    pub tbar_pos: f64,
    pub tbar_neg: f64,
    pub delta_pos: f64,
    pub delta_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_zero: usize,
    pub m_pos: f64,
    pub m_neg: f64,
    pub z_pos: f64,
    pub z_neg: f64,
    pub reconstructed_objective: f64,
}

struct SignSplit {
    g: usize,
    k: usize,
    n_total: usize,
    n_pos: usize,
    n_neg: usize,
    n_zero: usize,
    tbar_pos: f64,
    tbar_neg: f64,
}

fn sign_split(lengths: &[usize], adv: &AdvantageSet) -> SignSplit {
    let sum_over = |idx: &[usize]| idx.iter().map(|&i| lengths[i]).sum::<usize>();
    let n_pos = sum_over(adv.pos_indices());
    let n_neg = sum_over(adv.neg_indices());
    let n_total: usize = lengths.iter().sum();
    let mean = |n: usize, c: usize| if c == 0 { 0.0 } else { n as f64 / c as f64 };
    SignSplit {
        g: lengths.len(),
        k: adv.k(),
        n_total,
        n_pos,
        n_neg,
        n_zero: n_total - n_pos - n_neg,
        tbar_pos: mean(n_pos, adv.pos_indices().len()),
        tbar_neg: mean(n_neg, adv.neg_indices().len()),
    }
}

fn require_binary(rule: Rule, group: &RolloutGroup, adv: &AdvantageSet) -> Result<(f64, f64)> {
    let fail = |reason: String| AggError::NotBinary {
        rule: rule.name(),
        reason,
    };
    if !group.is_binary() {
        return Err(fail("rewards are not all in {0, 1}".into()));
    }
    if group.eps_var() != 0.0 {
        return Err(fail(format!("eps_var = {}", group.eps_var())));
    }
    if adv.k() + adv.neg_indices().len() != group.size() {
        return Err(fail("zero-advantage responses present".into()));
    }
    binary_closed_form(group.size(), adv.k())
}

/// Rearranged sign-split form of `rule` on `group`.
pub fn decompose(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
    rule: Rule,
) -> Result<DecompositionReport> {
    adv.check_shape(group)?;
    let lengths = group.lengths();
    let sums = phi_sums(group, adv, clip)?;
    let split = sign_split(&lengths, adv);
    let (m_pos, m_neg) = advantage_masses(adv);
    let (z_pos, z_neg) = token_masses(&lengths, adv);
    let g = split.g as f64;
    let pos = adv.pos_indices();
    let neg = adv.neg_indices();

    let (prefactor, delta_pos, delta_neg, reconstructed) = match rule {
        Rule::Token | Rule::Seq | Rule::Balanced => {
            let (a_pos, a_neg) = require_binary(rule, group, adv)?;
            let delta_sum = |i: usize, a: f64| sums[i] / a;
            let kf = split.k as f64;
            let root = (kf * (g - kf)).sqrt();
            match rule {
                Rule::Seq => {
                    let dp = pos
                        .iter()
                        .map(|&i| delta_sum(i, a_pos) / lengths[i] as f64)
                        .sum::<f64>()
                        / pos.len() as f64;
                    let dn = neg
                        .iter()
                        .map(|&i| delta_sum(i, a_neg) / lengths[i] as f64)
                        .sum::<f64>()
                        / neg.len() as f64;
                    let pre = root / g;
                    (pre, dp, dn, pre * (dp - dn))
                }
                _ => {
                    let dp =
                        pos.iter().map(|&i| delta_sum(i, a_pos)).sum::<f64>() / split.n_pos as f64;
                    let dn =
                        neg.iter().map(|&i| delta_sum(i, a_neg)).sum::<f64>() / split.n_neg as f64;
                    if rule == Rule::Token {
                        let pre = root / split.n_total as f64;
                        (
                            pre,
                            dp,
                            dn,
                            pre * (split.tbar_pos * dp - split.tbar_neg * dn),
                        )
                    } else {
                        let pre = root / g;
                        (pre, dp, dn, pre * (dp - dn))
                    }
                }
            }
        }
        Rule::BalancedGen => {
            // A_i * sum_t delta = sum_t phi on S+, and (-A_i) * sum_t delta = -sum_t phi on S-.
            let dp = if z_pos > 0.0 {
                pos.iter().map(|&i| sums[i]).sum::<f64>() / z_pos
            } else {
                0.0
            };
            let dn = if z_neg > 0.0 {
                -neg.iter().map(|&i| sums[i]).sum::<f64>() / z_neg
            } else {
                0.0
            };
            (m_pos / g, dp, dn, m_pos / g * dp - m_neg / g * dn)
        }
    };

    Ok(DecompositionReport {
        rule,
        prefactor,
        tbar_pos: split.tbar_pos,
        tbar_neg: split.tbar_neg,
        delta_pos,
        delta_neg,
        n_pos: split.n_pos,
        n_neg: split.n_neg,
        n_zero: split.n_zero,
        m_pos,
        m_neg,
        z_pos,
        z_neg,
        reconstructed_objective: reconstructed,
    })
}

/// Fills `result.decomposition` for the result's rule.
pub fn attach_decomposition(
    mut result: AggregationResult,
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<AggregationResult> {
    result.decomposition = Some(decompose(group, adv, clip, result.rule)?);
    Ok(result)
}

/// Outcome of the balanced-vs-sequence inter-sign prefactor comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaWeightIdentity {
    /// `(k/G) * a+`, the coefficient balanced aggregation puts on `d+BA`.
    pub ba_prefactor: f64,
    /// `sqrt(k(G-k))/G`, the sequence-aggregation inter-sign prefactor.
    pub seq_prefactor: f64,
    /// `|J_BA - prefactor * (d+BA - d-BA)|`.
    pub reconstruction_error: f64,
    pub matches: bool,
}

/// Checks that the sequence-count weights `k/G`, `(G-k)/G` give balanced
/// aggregation the same inter-sign prefactor as sequence aggregation, and
/// that the balanced objective equals `prefactor * (d+BA - d-BA)`.
pub fn ba_weight_identity(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<BaWeightIdentity> {
    adv.check_shape(group)?;
    let (a_pos, a_neg) = require_binary(Rule::Balanced, group, adv).map_err(|e| match e {
        AggError::KOutOfRange { g, k } => AggError::DegenerateSubset(format!("k = {k} of G = {g}")),
        other => other,
    })?;
    let g = group.size() as f64;
    let k = adv.k() as f64;
    let ba_pos = k / g * a_pos;
    let ba_neg = (g - k) / g * (-a_neg);
    let seq_prefactor = (k * (g - k)).sqrt() / g;

    let sums = phi_sums(group, adv, clip)?;
    let lengths = group.lengths();
    let direct = objective_from_phi_sums(Rule::Balanced, &lengths, adv, &sums);
    let report = decompose(group, adv, clip, Rule::Balanced)?;
    let rebuilt = seq_prefactor * (report.delta_pos - report.delta_neg);
    let reconstruction_error = (direct - rebuilt).abs();

    let matches = close(ba_pos, seq_prefactor, IDENTITY_TOL)
        && close(ba_neg, seq_prefactor, IDENTITY_TOL)
        && close(direct, rebuilt, IDENTITY_TOL);
    Ok(BaWeightIdentity {
        ba_prefactor: ba_pos,
        seq_prefactor,
        reconstruction_error,
        matches,
    })
}

/// Pooled response-length statistics over a batch of groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub n_responses: usize,
    pub mean_len: f64,
    /// Population coefficient of variation of response lengths.
    pub len_cv: f64,
    pub tbar_pos: Option<f64>,
    pub tbar_neg: Option<f64>,
    /// `(T- - T+) / mean_len`; present only when both subsets are non-empty.
    pub len_gap: Option<f64>,
}

/// Pools every response in `groups`; `advs[j]` must belong to `groups[j]`.
pub fn length_stats(groups: &[RolloutGroup], advs: &[AdvantageSet]) -> Result<LengthStats> {
    if groups.is_empty() {
        return Err(AggError::ShapeMismatch("empty batch".into()));
    }
    if groups.len() != advs.len() {
        return Err(AggError::ShapeMismatch(format!(
            "{} groups but {} advantage sets",
            groups.len(),
            advs.len()
        )));
    }
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let (mut pos_len, mut pos_count, mut neg_len, mut neg_count) = (0usize, 0usize, 0usize, 0usize);
    for (group, adv) in groups.iter().zip(advs) {
        adv.check_shape(group)?;
        for (i, resp) in group.responses().iter().enumerate() {
            let t = resp.len();
            count += 1;
            sum += t as f64;
            sum_sq += (t * t) as f64;
            match adv.sign(i) {
                crate::group::Sign::Pos => {
                    pos_len += t;
                    pos_count += 1;
                }
                crate::group::Sign::Neg => {
                    neg_len += t;
                    neg_count += 1;
                }
                crate::group::Sign::Zero => {}
            }
        }
    }
    let n = count as f64;
    let mean_len = sum / n;
    let var = (sum_sq / n - mean_len * mean_len).max(0.0);
    let len_cv = var.sqrt() / mean_len;
    let tbar_pos = (pos_count > 0).then(|| pos_len as f64 / pos_count as f64);
    let tbar_neg = (neg_count > 0).then(|| neg_len as f64 / neg_count as f64);
    let len_gap = match (tbar_pos, tbar_neg) {
        (Some(p), Some(q)) => Some((q - p) / mean_len),
        _ => None,
    };
    Ok(LengthStats {
        n_responses: count,
        mean_len,
        len_cv,
        tbar_pos,
        tbar_neg,
        len_gap,
    })
}

/// Length regime a batch falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FavorsToken,
    FavorsSeq,
    Mixed,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::FavorsToken => "favors-token",
            Regime::FavorsSeq => "favors-seq",
            Regime::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeThresholds {
    pub cv: f64,
    pub gap: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self { cv: 0.5, gap: 0.2 }
    }
}

/// High length variation with a mild sign gap favors token aggregation; low
/// variation with a large gap favors sequence aggregation. Advisory only.
pub fn regime_report(stats: &LengthStats, thresholds: &RegimeThresholds) -> Regime {
    let Some(gap) = stats.len_gap else {
        return Regime::Mixed;
    };
    let high_cv = stats.len_cv >= thresholds.cv;
    let large_gap = gap.abs() >= thresholds.gap;
    match (high_cv, large_gap) {
        (true, false) => Regime::FavorsToken,
        (false, true) => Regime::FavorsSeq,
        _ => Regime::Mixed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{evaluate, objective_balanced, objective_seq, objective_token};
    use crate::group::normalize_advantages;

    fn ones(lens: &[usize]) -> Vec<Vec<f64>> {
        lens.iter().map(|&t| vec![1.0; t]).collect()
    }

    fn example_group() -> RolloutGroup {
        RolloutGroup::from_ratios(&[1.0, 1.0, 0.0, 0.0], ones(&[2, 4, 1, 1]), 0.0).unwrap()
    }

    #[test]
    fn token_rule_example() {
        let g = example_group();
        let adv = normalize_advantages(&g).unwrap();
        let clip = ClipConfig::default();
        let d = decompose(&g, &adv, &clip, Rule::Token).unwrap();
        assert!((d.prefactor - 2.0 / 8.0).abs() < 1e-15);
        assert!((d.delta_pos - 1.0).abs() < 1e-15);
        assert!((d.delta_neg - 1.0).abs() < 1e-15);
        assert_eq!((d.tbar_pos, d.tbar_neg), (3.0, 1.0));
        assert!((d.reconstructed_objective - 0.5).abs() < 1e-15);
        let direct = objective_token(&g, &adv, &clip).unwrap().objective;
        assert!((d.reconstructed_objective - direct).abs() < 1e-12);
    }

    #[test]
    fn seq_rule_example() {
        let g = example_group();
        let adv = normalize_advantages(&g).unwrap();
        let d = decompose(&g, &adv, &ClipConfig::default(), Rule::Seq).unwrap();
        assert!((d.prefactor - 0.5).abs() < 1e-15);
        assert!((d.delta_pos - 1.0).abs() < 1e-15);
        assert!((d.delta_neg - 1.0).abs() < 1e-15);
        assert!(d.reconstructed_objective.abs() < 1e-15);
        assert_eq!(d.n_pos + d.n_neg + d.n_zero, g.total_tokens());
    }

    #[test]
    fn generalized_example() {
        // rewards chosen so that A = [2, 1, -3] up to the common scale sigma
        let g = RolloutGroup::from_ratios(&[2.0, 1.0, -3.0], ones(&[1, 2, 3]), 0.0).unwrap();
        let adv = AdvantageSet::from_advantages(vec![2.0, 1.0, -3.0], 0.0, 1.0);
        let d = decompose(&g, &adv, &ClipConfig::default(), Rule::BalancedGen).unwrap();
        assert_eq!((d.m_pos, d.m_neg), (3.0, 3.0));
        assert_eq!((d.z_pos, d.z_neg), (4.0, 9.0));
        assert!(d.reconstructed_objective.abs() < 1e-15);
    }

    #[test]
    fn binary_rules_reject_real_rewards() {
        let g = RolloutGroup::from_ratios(&[2.0, 1.0, -3.0], ones(&[1, 2, 3]), 0.0).unwrap();
        let adv = normalize_advantages(&g).unwrap();
        for rule in [Rule::Token, Rule::Seq, Rule::Balanced] {
            assert!(matches!(
                decompose(&g, &adv, &ClipConfig::default(), rule),
                Err(AggError::NotBinary { .. })
            ));
        }
        let g = RolloutGroup::from_ratios(&[1.0, 0.0], ones(&[1, 2]), 1e-6).unwrap();
        let adv = normalize_advantages(&g).unwrap();
        assert!(decompose(&g, &adv, &ClipConfig::default(), Rule::Token).is_err());
    }

    #[test]
    fn reconstruction_with_clipping() {
        let g = RolloutGroup::from_ratios(
            &[1.0, 0.0, 0.0, 1.0, 0.0],
            vec![
                vec![1.5, 0.7],
                vec![0.5, 1.1, 1.0],
                vec![1.4],
                vec![0.95; 4],
                vec![0.6, 1.3],
            ],
            0.0,
        )
        .unwrap();
        let adv = normalize_advantages(&g).unwrap();
        let clip = ClipConfig::default();
        for rule in Rule::ALL {
            let d = decompose(&g, &adv, &clip, rule).unwrap();
            let direct = evaluate(rule, &g, &adv, &clip).unwrap().objective;
            assert!(
                close(d.reconstructed_objective, direct, IDENTITY_TOL),
                "{rule}"
            );
        }
        let attached =
            attach_decomposition(objective_seq(&g, &adv, &clip).unwrap(), &g, &adv, &clip).unwrap();
        assert_eq!(attached.decomposition.unwrap().rule, Rule::Seq);
    }

    #[test]
    fn weight_identity_examples() {
        let clip = ClipConfig::default();
        let mut rewards = vec![1.0; 8];
        rewards.extend([0.0; 8]);
        let g = RolloutGroup::from_ratios(&rewards, ones(&[3; 16]), 0.0).unwrap();
        let adv = normalize_advantages(&g).unwrap();
        let id = ba_weight_identity(&g, &adv, &clip).unwrap();
        assert!((id.ba_prefactor - 0.5).abs() < 1e-15 && (id.seq_prefactor - 0.5).abs() < 1e-15);
        assert!(id.matches);

        let g = RolloutGroup::from_ratios(&[1.0, 0.0, 0.0, 0.0], ones(&[2, 5, 1, 3]), 0.0).unwrap();
        let adv = normalize_advantages(&g).unwrap();
        let id = ba_weight_identity(&g, &adv, &clip).unwrap();
        let expected = 3f64.sqrt() / 4.0;
        assert!((id.ba_prefactor - expected).abs() < 1e-15);
        assert!((id.seq_prefactor - expected).abs() < 1e-15);
        assert!(id.matches);
        let ba = objective_balanced(&g, &adv, &clip).unwrap().objective;
        assert!(ba.abs() < 1e-15);
    }

    #[test]
    fn length_stats_example() {
        let g = example_group();
        let adv = normalize_advantages(&g).unwrap();
        let s = length_stats(std::slice::from_ref(&g), std::slice::from_ref(&adv)).unwrap();
        assert_eq!(s.mean_len, 2.0);
        assert!((s.len_cv - 1.5f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(s.len_gap, Some(-1.0));
        let twice = length_stats(&[g.clone(), g.clone()], &[adv.clone(), adv.clone()]).unwrap();
        assert_eq!(twice.mean_len, s.mean_len);
        assert_eq!(twice.len_cv, s.len_cv);
        assert_eq!(twice.len_gap, s.len_gap);
        assert_eq!(twice.n_responses, 8);
    }

    #[test]
    fn uniform_lengths_have_no_spread() {
        let g = RolloutGroup::from_ratios(&[1.0, 0.0, 1.0], ones(&[4, 4, 4]), 0.0).unwrap();
        let adv = normalize_advantages(&g).unwrap();
        let s = length_stats(&[g], &[adv]).unwrap();
        assert_eq!(s.len_cv, 0.0);
        assert_eq!(s.len_gap, Some(0.0));
    }

    #[test]
    fn gap_absent_without_both_signs() {
        let g = RolloutGroup::from_ratios(&[1.0, 1.0], ones(&[1, 3]), 1e-6).unwrap();
        let adv = normalize_advantages(&g).unwrap();
        let s = length_stats(&[g], &[adv]).unwrap();
        assert_eq!(s.len_gap, None);
        assert_eq!(
            regime_report(&s, &RegimeThresholds::default()),
            Regime::Mixed
        );
        assert!(length_stats(&[], &[]).is_err());
    }

    #[test]
    fn regime_examples() {
        let t = RegimeThresholds::default();
        let stats = |cv: f64, gap: f64| LengthStats {
            n_responses: 1,
            mean_len: 1.0,
            len_cv: cv,
            tbar_pos: Some(1.0),
            tbar_neg: Some(1.0),
            len_gap: Some(gap),
        };
        assert_eq!(regime_report(&stats(0.9, 0.05), &t), Regime::FavorsToken);
        assert_eq!(regime_report(&stats(0.1, 0.6), &t), Regime::FavorsSeq);
        assert_eq!(regime_report(&stats(0.0, 0.0), &t), Regime::Mixed);
        assert_eq!(regime_report(&stats(0.9, -0.6), &t), Regime::Mixed);
        assert_eq!(Regime::FavorsSeq.to_string(), "favors-seq");
    }
}
