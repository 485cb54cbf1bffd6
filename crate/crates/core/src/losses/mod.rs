//! Training objectives over soft part masks.

pub mod consistency;
pub mod contrastive;
pub mod equivariance;
pub mod objective;
pub mod pool;

pub use consistency::{feature_loss, part_descriptor, visual_loss, ImageDescriptors, PartWeights};
pub use contrastive::{
    contrastive_loss, l2_descriptor_loss, BatchDescriptors, ContrastiveOptions, DescriptorLossOutput, TargetAssignment,
};
pub use equivariance::{equivariance_loss, EquivarianceOutput, KL_EPS};
pub use objective::{
    evaluate, total_loss, DescriptorObjective, ItemGrads, LossBreakdown, LossWeights, ObjectiveConfig, ObjectiveItem,
    ObjectiveOutput, TransformedView,
};
