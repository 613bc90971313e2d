//! Reinforcement alignment: ensemble reward model, group sampling with
//! advantage normalization, DPO and GRPO objectives, and the combined
//! training loop against a periodically synced reference policy.

pub mod group;
pub mod losses;
pub mod reward;
pub mod rl;

pub use group::{compute_advantages, group_sample, GroupResponse, GroupSample};
pub use losses::{dpo_loss_tape, grpo_loss_tape, sequence_logp_tape};
pub use reward::{
    batch_features as reward_batch_features, train_reward, RewardConfig, RewardModel,
};
pub use rl::{
    mean_reward_topk, run_alignment, AlignmentInputs, RlConfig, RlObjective, RlTraceEntry,
};
