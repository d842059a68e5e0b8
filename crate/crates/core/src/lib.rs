//! Multi-level similarity Siamese network for person re-identification.
//!
//! Two images are encoded by a shared convolutional trunk. At several trunk
//! depths a spatial transformer extracts three attended parts per image,
//! and each part is cross-correlated depth-wise against the whole feature
//! map of the other image. The stacked score maps feed a small
//! classification head; the attended parts also feed a ranking net whose
//! descriptors are trained with a contrastive loss.

pub mod checkpoint;
pub mod checks;
pub mod csn;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod stn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
