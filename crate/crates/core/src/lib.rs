//! FlyNet: an encoder-decoder heart segmentation network trained from scratch with a
//! soft-IOU loss, plus the cardiac readouts derived from its masks.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cardio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

pub use data::{FlyDataset, FramePair, Stage};
pub use error::{Error, Result};
pub use loss::{hard_iou, soft_iou_loss, BinaryMask};
pub use net::{Arch, NetworkSpec, ParamSet};
pub use optim::{AdamHyper, AdamState};
pub use tensor::{Precision, Scalar, Shape4, Tensor4, ZipOp};
