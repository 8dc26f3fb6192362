//! Anchor-based 3D lesion detection toolkit.
//!
//! - [`geometry`]: boxes, anchor grids, regression targets
//! - [`assignment`]: anchor labeling against ground truth
//! - [`losses`]: IoU-balanced classification, similarity, smooth L1 and the composite loss
//! - [`inference`]: tiled test-time pipeline and NMS
//! - [`metrics`]: sensitivity, FPs per volume, mIoU, FROC, ROC AUC
//! - [`synthetic`]: phantom volumes and a linear toy scorer for end-to-end runs
//! - [`gradcheck`]: finite-difference verification of the loss gradients

pub mod assignment;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod synthetic;

pub use assignment::{assign_anchors, AnchorAssignment, AssignmentConfig, Category, GroundTruth, Label};
pub use error::{Error, Result};
pub use geometry::{clip_box, decode, encode, generate_anchors, iou3d, AnchorSpec, Box3, BoxDelta, Shape3};
pub use inference::{nms, run_inference, size_filter, tile_volume, Detection, PipelineConfig};
pub use losses::{rpn_loss, ClassScores, Embedding, LossBundle, LossParams, ModelOutputs, RpnBatch, SimilarityPairs};
pub use metrics::{aggregate, froc, roc_auc, MatchConfig, MetricsReport, VolumeResult};
