//! Desk-scale RLVR loop: a tabular softmax policy trained on toy tasks with
//! verifiable 0/1 rewards under any aggregation rule.

pub mod policy;
pub mod task;
pub mod train;

pub use policy::PolicyTable;
pub use task::{expected_mean_reward, expected_reward, verify_reward, TaskKind, TaskSpec};
pub use train::{
    derive_seed, run_training, run_training_from, sample_group, surrogate_gradient,
    surrogate_objective, train_step, Optimizer, OptimizerKind, SampledGroup, StepReport,
    TrainConfig, TrainingRun,
};
