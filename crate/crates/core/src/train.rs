//! Mini-batch training of a [`Model`] on a pool of labelled images.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{assemble_batch, make_pairs, PairBatch, PositivePolicy, Sample};
use crate::error::Result;
use crate::model::{classification_loss, combined_loss, contrastive_loss, forward_indexed, Model};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig};
use crate::params::Forward;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per batch; a multiple of 3.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub positives: PositivePolicy,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128 / 3 * 3,
            adam: AdamConfig::default(),
            seed: 0,
            positives: PositivePolicy::All,
            augment: true,
        }
    }
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub classification: f64,
    pub contrastive: f64,
    pub rotation: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLoss>,
    pub epoch_mean: Vec<f64>,
    pub seconds: f64,
}

/// Forward, backward and one Adam update on a batch.
pub fn train_step(model: &mut Model<f32>, opt: &mut Adam<f32>, batch: &PairBatch) -> Result<StepLoss> {
    let cfg = model.config.clone();
    let mut fwd = Forward::new(&mut model.weights, Mode::Train, true);
    let images = fwd.graph.constant(batch.images.clone());
    let out = forward_indexed(&mut fwd, &cfg, images, &batch.left, &batch.right)?;
    let cls = classification_loss(&mut fwd.graph, out.logits, &batch.labels)?;
    let ctr = match out.descriptors {
        Some((r1, r2)) => Some(contrastive_loss(&mut fwd.graph, r1, r2, &batch.labels, cfg.margin)?),
        None => None,
    };
    let total = combined_loss(&mut fwd.graph, cls, ctr, out.rotation_penalty)?;
    let value = |v: Option<crate::Var>, fwd: &Forward<'_, f32>| v.map_or(0.0, |v| fwd.graph.value(v).item() as f64);
    let loss = StepLoss {
        total: value(Some(total), &fwd),
        classification: value(Some(cls), &fwd),
        contrastive: value(ctr, &fwd),
        rotation: value(out.rotation_penalty, &fwd),
    };
    fwd.graph.backward(total)?;
    let grads = fwd.grads();
    drop(fwd);
    opt.step(&mut model.weights, &grads)?;
    Ok(loss)
}

/// Trains on every sample in `pool`. Deterministic for a fixed seed.
pub fn train(model: &mut Model<f32>, pool: &[Sample], tc: &TrainConfig) -> Result<TrainLog> {
    let start = Instant::now();
    let mut opt = Adam::new(tc.adam);
    let mut log = TrainLog::default();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xA5A5_5A5A);
    let (mean, std) = (model.config.input_mean, model.config.input_std);
    for epoch in 0..tc.epochs {
        let batches = make_pairs(pool, tc.positives, tc.batch_size, tc.seed.wrapping_add(epoch as u64 * 7919))?;
        let mut sum = 0.0;
        for (i, pairs) in batches.iter().enumerate() {
            let batch = assemble_batch(pool, pairs, &mean, &std, tc.augment.then_some(&mut aug_rng))?;
            let loss = train_step(model, &mut opt, &batch)?;
            log::debug!("epoch {epoch} batch {i}: loss {:.4} (cls {:.4}, ctr {:.4})", loss.total, loss.classification, loss.contrastive);
            sum += loss.total;
            log.steps.push(loss);
        }
        let mean_loss = sum / batches.len() as f64;
        log::info!("epoch {} mean loss {:.4} ({:.0}s)", epoch + 1, mean_loss, start.elapsed().as_secs_f64());
        log.epoch_mean.push(mean_loss);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}
