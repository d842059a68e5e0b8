//! Neural-network primitives recorded on a [`Graph`](crate::Graph).

mod conv;
mod dense;
mod norm;
mod pool;

pub use conv::Padding;
pub use norm::{BatchNormState, Mode};
