//! Small-object point detection at desk scale: a UNet detector trained with a
//! weighted Hausdorff distance plus count regression, R-CNN-style patch
//! classifiers, a synthetic aerial scene generator, and the full evaluation
//! suite (precision/recall/F1, count-error statistics, localization RMSE,
//! time per image).

pub mod diff;
pub mod error;
pub mod geom;
pub mod losses;
pub mod metrics;
pub mod postprocess;
pub mod proposals;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
