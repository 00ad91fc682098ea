//! Multi-head attentive feature learning with a Hellinger diversity term and a
//! visual-to-semantic projector ensemble.

mod export;
mod head;
mod types;

pub use export::{attention_csv, export_attention, parse_attention_csv, read_attention};
pub use head::{
    attentive_features, diversity_loss, diversity_loss_grad, mean_pairwise_hellinger, HeadForward,
    LossTerms,
};
pub(crate) use head::argmax_class;
pub(crate) use types::uniform_fan_in;
pub use types::{AttentionStack, FeatureMap, ProjectorEnsemble, SemanticTable, SetNetModel};
