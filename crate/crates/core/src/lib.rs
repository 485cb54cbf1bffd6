//! Self-supervised discovery of object parts from image collections.
//!
//! A small segmenter predicts a soft assignment of foreground pixels to `K`
//! parts. It is trained from feature consistency, a cross-image contrastive
//! loss on part descriptors, colour consistency and equivariance under
//! random warps. The crate also provides the evaluation metrics (NMI, ARI,
//! keypoint regression), a k-means baseline and a synthetic dataset
//! generator.

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod segmenter;
pub mod trainer;
pub mod transforms;
pub mod types;
pub mod visualize;

pub use datasets::{Sample, Split};
pub use error::{Error, Result};
pub use features::{FeatureProvider, FeatureProviderSpec, Provider};
pub use losses::objective::{LossBreakdown, LossWeights};
pub use metrics::MetricReport;
pub use segmenter::{Segmenter, SegmenterSpec};
pub use trainer::{TrainConfig, Trainer};
pub use transforms::{AugmentConfig, TransformSpec};
pub use types::{
    FeatureMap, ForegroundMask, Image, Keypoint, KeypointSet, LabelGrid, PartDescriptor, SoftMask, SparseLabels, Tensor3,
};
