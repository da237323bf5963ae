//! Two-stage detector over a feature-pyramid backbone: anchors, region
//! proposals, ROI classification and box refinement.

mod anchors;
mod coder;
mod model;
mod nms;
mod targets;

pub use anchors::AnchorSet;
pub use coder::{decode, encode, MAX_LOG_SCALE};
pub use model::{BackboneKind, DetInput, DetectionLosses, Detector, DetectorCheckpoint, DetectorConfig, DETECTOR_CHECKPOINT_VERSION};
pub use nms::{batched_nms, nms};
pub use targets::{assign_rpn_targets, sample_pos_neg, RpnTargets};
