//! Verifiable-reward reinforcement fine-tuning for referring-expression tasks.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: boxes, keypoints, RLE masks and their IoU arithmetic.
//! - [`structured_output`]: think/answer tag grammar, answer parsers and emitters.
//! - [`rewards`]: format and task metrics rewards (box IoU, penalized mAP, mask IoU).
//! - [`grpo`]: group-relative advantages, the clipped KL-regularized surrogate
//!   and the gradient-ascent policy update (GRPO and DAPO variants).
//! - [`toy`]: a synthetic referring world with an exactly differentiable policy.
//! - [`evalkit`]: Acc@tau, COCO-style mAP, gIoU, the nested few-shot sampler.
//! - [`dataset`], [`config`], [`checkpoint`], [`train`], [`scoring`]: the
//!   operational layer behind the `georef` command line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evalkit;
pub mod geometry;
pub mod grpo;
pub mod prompt;
pub mod rewards;
pub mod scoring;
pub mod structured_output;
pub mod toy;
pub mod train;

pub use geometry::{box_iou, mask_iou, mask_union, rasterize_box, trim_mask_to_box, BBox, BinaryMask, Keypoint};
pub use structured_output::{extract_tagged, format_reward, FormatMode, ParsedAnswer, Task};
