//! Loss aggregation for GRPO-style reinforcement learning with verifiable
//! rewards.
//!
//! The crate implements the clipped token-level PPO contribution and four
//! ways of aggregating it over a sampled group (token, sequence, balanced,
//! generalized balanced), the sign-split rearrangements that expose each
//! rule's length bias, pooled length diagnostics, a tabular-softmax toy
//! training loop, and JSONL/CSV interchange for rollout logs and metrics.

pub mod aggregation;
pub mod decomposition;
pub mod error;
pub mod group;
pub mod io;
pub mod sim;
pub mod verify;

pub use aggregation::{
    evaluate, gradient_check, objective_balanced, objective_balanced_gen, objective_seq,
    objective_token, phi, AggregationResult, ClipConfig, Rule,
};
pub use decomposition::{
    ba_weight_identity, decompose, length_stats, regime_report, DecompositionReport, LengthStats,
    Regime, RegimeThresholds,
};
pub use error::{AggError, Result};
pub use group::{
    binary_closed_form, normalize_advantages, AdvantageSet, Response, RolloutGroup, Sign,
};
