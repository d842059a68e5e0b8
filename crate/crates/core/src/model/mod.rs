//! The full Siamese network: shared trunk, one similarity network per
//! level, decision head and ranking net, plus losses and the inference
//! score.

mod complexity;
mod config;
mod loss;
mod network;

pub use complexity::{count_flops, count_params, count_params_closed_form};
pub use config::{Level, ModelConfig, Widths};
pub use loss::{classification_loss, combined_loss, contrastive_loss, pair_distances, simi_score};
pub use network::{
    architecture, decision_head, embed_images, feature_extract, forward_batch, forward_indexed, forward_pair,
    pair_logits, ranking_descriptor, Embedding, Features, PairOutput,
};

use rand::Rng;

use crate::error::Result;
use crate::params::Weights;
use crate::tensor::Scalar;

/// Configuration plus the weights it describes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&architecture(&config), rng);
        Ok(Model { config, weights })
    }

    pub fn num_params(&self) -> usize {
        count_params(&self.weights)
    }
}
