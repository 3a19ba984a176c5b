//! Δ-aware token merging: scoring, bipartite matching, size-weighted merging
//! and token arrangement.

pub mod arrange;
pub mod layer;
pub mod matching;
pub mod score;
pub mod sequence;

pub use arrange::{arrange, group_pairs, merge_tokens, Group, MergePlan, Strategy};
pub use layer::{mame_layer, plan_layer, residual_merge, LayerTrace, MergeConfig, MergeDecision, ScoreMode};
pub use matching::{bipartite_match, bipartite_split};
pub use score::{
    channel_mean, delta_weight, delta_weight_matrix, integrate_delta, merge_score,
    similarity_matrix, similarity_weight, Integration,
};
pub use sequence::{TokenLayout, TokenSequence};
