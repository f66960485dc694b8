//! Seeded identity suite behind the `verify` command.
//!
//! Each identity runs on a batch of random instances and reports its
//! maximum error against a fixed tolerance. [`MANIFEST`] lists which
//! exported operations each identity exercises.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    advantage_masses, evaluate, gradient_check, objective_balanced, objective_balanced_gen,
    objective_seq, objective_token, phi, ClipConfig, Rule,
};
use crate::decomposition::{
    ba_weight_identity, decompose, length_stats, regime_report, LengthStats, Regime,
    RegimeThresholds,
};
use crate::error::Result;
use crate::group::{binary_closed_form, normalize_advantages, RolloutGroup};
use crate::sim::train::derive_seed;

/// Every public operation of the group, aggregation and decomposition modules.
pub const EXPORTED_OPERATIONS: &[&str] = &[
    "normalize_advantages",
    "binary_closed_form",
    "phi",
    "objective_token",
    "objective_seq",
    "objective_balanced",
    "objective_balanced_gen",
    "gradient_check",
    "decompose",
    "ba_weight_identity",
    "length_stats",
    "regime_report",
];

/// One entry of the suite.
#[derive(Debug, Clone, Copy)]
pub struct Identity {
    pub name: &'static str,
    pub tolerance: f64,
    /// Instances at the default suite size of 1000; gradient checks run a tenth.
    pub instances: usize,
    pub covers: &'static [&'static str],
}

pub const MANIFEST: &[Identity] = &[
    Identity {
        name: "closed_form_advantages",
        tolerance: 1e-10,
        instances: 1000,
        covers: &["normalize_advantages", "binary_closed_form"],
    },
    Identity {
        name: "token_decomposition",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["phi", "objective_token", "decompose"],
    },
    Identity {
        name: "seq_decomposition",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["objective_seq", "decompose"],
    },
    Identity {
        name: "balanced_decomposition",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["objective_balanced", "decompose"],
    },
    Identity {
        name: "ba_weight_identity",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["ba_weight_identity"],
    },
    Identity {
        name: "generalized_reduction",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["objective_balanced_gen", "objective_balanced"],
    },
    Identity {
        name: "generalized_decomposition",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["objective_balanced_gen", "decompose"],
    },
    Identity {
        name: "mass_symmetry",
        tolerance: 1e-10,
        instances: 1000,
        covers: &["normalize_advantages"],
    },
    Identity {
        name: "seq_ba_coincidence",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["objective_seq", "objective_balanced"],
    },
    Identity {
        name: "phi_concavity",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["phi"],
    },
    Identity {
        name: "ratio_gradient",
        tolerance: 1e-5,
        instances: 100,
        covers: &[
            "gradient_check",
            "objective_token",
            "objective_seq",
            "objective_balanced",
            "objective_balanced_gen",
        ],
    },
    Identity {
        name: "length_stats_pooling",
        tolerance: 1e-12,
        instances: 1000,
        covers: &["length_stats", "regime_report"],
    },
];

/// Step size for the ratio-level finite differences.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Multiplier on each identity's instance count, in thousandths: 1000 runs the full suite.
    pub scale_permille: usize,
    pub clip: ClipConfig,
    /// Name of an identity whose errors are perturbed so that it fails.
    pub inject_fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            scale_permille: 1000,
            clip: ClipConfig::default(),
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Index and seed of the first failing instance.
    pub first_failure: Option<(usize, u64)>,
}

impl IdentityOutcome {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub outcomes: Vec<IdentityOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(IdentityOutcome::passed)
    }

    /// Deterministic text report, one line per identity.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let status = if o.passed() { "PASS" } else { "FAIL" };
            let _ = write!(
                out,
                "{status} {:<26} instances={:<5} max_err={:.3e} tol={:.0e}",
                o.name, o.instances, o.max_error, o.tolerance
            );
            if let Some((idx, seed)) = o.first_failure {
                let _ = write!(out, " first_failure=instance {idx} (instance seed {seed})");
            }
            out.push('\n');
        }
        let failed: Vec<&str> = self
            .outcomes
            .iter()
            .filter(|o| !o.passed())
            .map(|o| o.name)
            .collect();
        if failed.is_empty() {
            let _ = writeln!(
                out,
                "all {} identities passed (seed {})",
                self.outcomes.len(),
                self.seed
            );
        } else {
            let _ = writeln!(
                out,
                "FAILED: {} (reproduce with --seed {})",
                failed.join(", "),
                self.seed
            );
        }
        out
    }
}

/// Random generators for suite instances.
pub mod synth {
    use super::*;

    /// Log-uniform ratios in `[e^-0.6, e^0.6]`, which straddle the default clip band.
    pub fn ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        rng.gen_range(-0.6f64..0.6).exp()
    }

    /// Ratio at least `margin` away from both clip boundaries.
    pub fn smooth_ratio<R: Rng + ?Sized>(rng: &mut R, clip: &ClipConfig, margin: f64) -> f64 {
        loop {
            let r = ratio(rng);
            if (r - clip.lower()).abs() > margin && (r - clip.upper()).abs() > margin {
                return r;
            }
        }
    }

    /// Binary-reward group with `G` in `[2, 32]`, `1 <= k <= G-1`, lengths in
    /// `[1, max_len]`, shuffled order, `eps_var = 0`.
    pub fn binary_group<R: Rng>(
        rng: &mut R,
        max_len: usize,
        mut ratio_fn: impl FnMut(&mut dyn rand::RngCore) -> f64,
    ) -> RolloutGroup {
        let g = rng.gen_range(2..=32usize);
        let k = rng.gen_range(1..g);
        let mut rewards: Vec<f64> = (0..g).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
        rewards.shuffle(rng);
        let ratios = (0..g)
            .map(|_| {
                let t = rng.gen_range(1..=max_len);
                (0..t).map(|_| ratio_fn(rng)).collect()
            })
            .collect();
        RolloutGroup::from_ratios(&rewards, ratios, 0.0).expect("valid synthetic group")
    }

    /// Real-valued rewards (standard-normal-ish, not all equal).
    pub fn real_group<R: Rng>(rng: &mut R, max_len: usize) -> RolloutGroup {
        let g = rng.gen_range(2..=32usize);
        let rewards: Vec<f64> = (0..g)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0f64..1.0)).sum::<f64>())
            .collect();
        let ratios = (0..g)
            .map(|_| {
                let t = rng.gen_range(1..=max_len);
                (0..t).map(|_| ratio(rng)).collect()
            })
            .collect();
        RolloutGroup::from_ratios(&rewards, ratios, 0.0).expect("valid synthetic group")
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn identity_error(name: &str, rng: &mut ChaCha8Rng, clip: &ClipConfig) -> Result<f64> {
    let any_ratio = |r: &mut dyn rand::RngCore| synth::ratio(r);
    Ok(match name {
        "closed_form_advantages" => {
            let g = synth::binary_group(rng, 8, any_ratio);
            let adv = normalize_advantages(&g)?;
            let (pos, neg) = binary_closed_form(g.size(), adv.k())?;
            g.rewards()
                .iter()
                .zip(adv.advantages())
                .map(|(&r, &a)| (a - if r == 1.0 { pos } else { neg }).abs())
                .fold(0.0, f64::max)
        }
        "token_decomposition" | "seq_decomposition" | "balanced_decomposition" => {
            let rule = match name {
                "token_decomposition" => Rule::Token,
                "seq_decomposition" => Rule::Seq,
                _ => Rule::Balanced,
            };
            let g = synth::binary_group(rng, 64, any_ratio);
            let adv = normalize_advantages(&g)?;
            let direct = match rule {
                Rule::Token => objective_token(&g, &adv, clip)?,
                Rule::Seq => objective_seq(&g, &adv, clip)?,
                _ => objective_balanced(&g, &adv, clip)?,
            };
            let d = decompose(&g, &adv, clip, rule)?;
            rel_err(direct.objective, d.reconstructed_objective)
        }
        "ba_weight_identity" => {
            let g = synth::binary_group(rng, 64, any_ratio);
            let adv = normalize_advantages(&g)?;
            let id = ba_weight_identity(&g, &adv, clip)?;
            let e = rel_err(id.ba_prefactor, id.seq_prefactor).max(id.reconstruction_error);
            if id.matches {
                e
            } else {
                f64::INFINITY
            }
        }
        "generalized_reduction" => {
            let g = synth::binary_group(rng, 64, any_ratio);
            let adv = normalize_advantages(&g)?;
            let gen = objective_balanced_gen(&g, &adv, clip)?.objective;
            let ba = objective_balanced(&g, &adv, clip)?.objective;
            rel_err(gen, ba)
        }
        "generalized_decomposition" => {
            let g = synth::real_group(rng, 64);
            let adv = normalize_advantages(&g)?;
            let direct = objective_balanced_gen(&g, &adv, clip)?.objective;
            rel_err(
                direct,
                decompose(&g, &adv, clip, Rule::BalancedGen)?.reconstructed_objective,
            )
        }
        "mass_symmetry" => {
            let g = synth::real_group(rng, 4);
            let adv = normalize_advantages(&g)?;
            let (mp, mn) = advantage_masses(&adv);
            let half = 0.5 * adv.advantages().iter().map(|a| a.abs()).sum::<f64>();
            (mp - mn).abs().max((mp - half).abs())
        }
        "seq_ba_coincidence" => {
            let gsize = rng.gen_range(2..=32usize);
            let k = rng.gen_range(1..gsize);
            let (tp, tn) = (rng.gen_range(1..=32usize), rng.gen_range(1..=32usize));
            let rewards: Vec<f64> = (0..gsize).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
            let ratios = (0..gsize)
                .map(|i| {
                    (0..if i < k { tp } else { tn })
                        .map(|_| synth::ratio(rng))
                        .collect()
                })
                .collect();
            let g = RolloutGroup::from_ratios(&rewards, ratios, 0.0)?;
            let adv = normalize_advantages(&g)?;
            rel_err(
                objective_seq(&g, &adv, clip)?.objective,
                objective_balanced(&g, &adv, clip)?.objective,
            )
        }
        "phi_concavity" => {
            let a = rng.gen_range(-3.0f64..3.0);
            let mut r = [synth::ratio(rng), synth::ratio(rng), synth::ratio(rng)];
            r.sort_by(|x, y| x.partial_cmp(y).expect("finite ratios"));
            let lam = if r[2] > r[0] {
                (r[1] - r[0]) / (r[2] - r[0])
            } else {
                0.5
            };
            let chord = (1.0 - lam) * phi(r[0], a, clip)? + lam * phi(r[2], a, clip)?;
            (chord - phi(r[1], a, clip)?).max(0.0)
        }
        "ratio_gradient" => {
            let margin = 100.0 * FD_STEP;
            let g = if rng.gen_bool(0.5) {
                synth::binary_group(rng, 16, |r| synth::smooth_ratio(r, clip, margin))
            } else {
                let base = synth::real_group(rng, 16);
                let ratios = base
                    .lengths()
                    .iter()
                    .map(|&t| {
                        (0..t)
                            .map(|_| synth::smooth_ratio(rng, clip, margin))
                            .collect()
                    })
                    .collect();
                base.with_ratios(ratios)?
            };
            let adv = normalize_advantages(&g)?;
            let mut worst = 0.0f64;
            for rule in Rule::ALL {
                let res = evaluate(rule, &g, &adv, clip)?;
                worst = worst.max(gradient_check(&res, &g, &adv, clip, FD_STEP)?);
            }
            worst
        }
        "length_stats_pooling" => {
            let g = synth::binary_group(rng, 32, any_ratio);
            let adv = normalize_advantages(&g)?;
            let one = length_stats(std::slice::from_ref(&g), std::slice::from_ref(&adv))?;
            let two = length_stats(&[g.clone(), g.clone()], &[adv.clone(), adv.clone()])?;
            let gap_err = match (one.len_gap, two.len_gap) {
                (Some(a), Some(b)) => rel_err(a, b),
                _ => f64::INFINITY,
            };
            let regime_ok = regime_check();
            let mut e = rel_err(one.mean_len, two.mean_len)
                .max(rel_err(one.len_cv, two.len_cv))
                .max(gap_err);
            if !regime_ok {
                e = f64::INFINITY;
            }
            e
        }
        other => unreachable!("identity {other} missing from the dispatcher"),
    })
}

fn regime_check() -> bool {
    let t = RegimeThresholds::default();
    let s = |cv, gap| LengthStats {
        n_responses: 1,
        mean_len: 1.0,
        len_cv: cv,
        tbar_pos: Some(1.0),
        tbar_neg: Some(1.0),
        len_gap: Some(gap),
    };
    regime_report(&s(0.9, 0.05), &t) == Regime::FavorsToken
        && regime_report(&s(0.1, 0.6), &t) == Regime::FavorsSeq
        && regime_report(&s(0.0, 0.0), &t) == Regime::Mixed
}

/// Runs one identity.
pub fn run_identity(idx: usize, identity: &Identity, opts: &SuiteOptions) -> IdentityOutcome {
    let n = (identity.instances * opts.scale_permille / 1000).max(1);
    let faulty = opts.inject_fault.as_deref() == Some(identity.name);
    let mut max_error = 0.0f64;
    let mut first_failure = None;
    for j in 0..n {
        let seed = derive_seed(opts.seed, idx, j);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut err = identity_error(identity.name, &mut rng, &opts.clip).unwrap_or(f64::INFINITY);
        if faulty {
            err += 1e3 * identity.tolerance;
        }
        if err.is_nan() {
            err = f64::INFINITY;
        }
        max_error = max_error.max(err);
        if err > identity.tolerance && first_failure.is_none() {
            first_failure = Some((j, seed));
        }
    }
    IdentityOutcome {
        name: identity.name,
        instances: n,
        max_error,
        tolerance: identity.tolerance,
        first_failure,
    }
}

pub fn run_suite(opts: &SuiteOptions) -> SuiteReport {
    SuiteReport {
        seed: opts.seed,
        outcomes: MANIFEST
            .iter()
            .enumerate()
            .map(|(i, id)| run_identity(i, id, opts))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_covers_every_operation() {
        for op in EXPORTED_OPERATIONS {
            assert!(
                MANIFEST.iter().any(|id| id.covers.contains(op)),
                "{op} not exercised"
            );
        }
    }

    #[test]
    fn small_suite_passes_and_is_deterministic() {
        let opts = SuiteOptions {
            seed: 7,
            scale_permille: 50,
            ..SuiteOptions::default()
        };
        let a = run_suite(&opts);
        assert!(a.passed(), "{}", a.render());
        assert_eq!(a.render(), run_suite(&opts).render());
    }

    #[test]
    fn injected_fault_fails_the_named_identity() {
        let opts = SuiteOptions {
            scale_permille: 10,
            inject_fault: Some("mass_symmetry".into()),
            ..SuiteOptions::default()
        };
        let r = run_suite(&opts);
        assert!(!r.passed());
        let failed: Vec<_> = r
            .outcomes
            .iter()
            .filter(|o| !o.passed())
            .map(|o| o.name)
            .collect();
        assert_eq!(failed, vec!["mass_symmetry"]);
        assert!(r.render().contains("FAILED: mass_symmetry"));
    }
}
