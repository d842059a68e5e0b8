//! Named finite-difference checks of every differentiable op, in 64-bit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{classification_loss, combined_loss, contrastive_loss, forward_indexed, Level, Model, ModelConfig, Widths};
use crate::nn::{BatchNormState, Mode, Padding};
use crate::params::{Activation, Forward, Weights};
use crate::tensor::{finite_diff_check, Graph, Tensor, Var};

/// Tolerance for a single op.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the composed network loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

const EPS: f64 = 1e-6;
/// Relative-error denominator floor for the composed check. Biases feeding
/// batch norm have an exactly zero gradient, where central differences of a
/// loss near 1 leave round-off of about 1e-10.
const NOISE_FLOOR: f64 = 1e-6;

pub const CHECKS: [&str; 8] = [
    "conv2d",
    "depthwise_corr",
    "bilinear_sample",
    "batch_norm",
    "dense",
    "softmax_nll",
    "contrastive",
    "combined",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Worst error over each operand of `loss`, the others held constant.
fn each_operand<F>(operands: &[Tensor<f64>], loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for k in 0..operands.len() {
        let e = finite_diff_check(
            |g, x| {
                let vars: Vec<Var> = operands
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { g.constant(t.clone()) })
                    .collect();
                loss(g, &vars)
            },
            &operands[k],
            EPS,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// `Σ y ⊙ probe`, so every output element carries a distinct weight.
fn probed(g: &mut Graph<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let p = g.constant(random(&mut rng, g.shape(y)));
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let ops = [random(rng, &[2, 3, 5, 4]), random(rng, &[4, 3, 3, 3]), random(rng, &[4])];
    each_operand(&ops, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?;
        probed(g, y, 1)
    })
}

fn check_depthwise(rng: &mut ChaCha8Rng) -> Result<f64> {
    let ops = [random(rng, &[2, 3, 6, 5]), random(rng, &[2, 3, 3, 3])];
    each_operand(&ops, |g, v| {
        let y = g.depthwise_corr(v[0], v[1])?;
        probed(g, y, 2)
    })
}

fn check_sampler(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (5, 6);
    // Sample points sit strictly inside pixel cells, away from the kinks of
    // the interpolation kernel.
    let grid = Tensor::from_fn(vec![2, 3, 4, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h } as f64;
        let cell = rng.random_range(0..extent as usize - 1) as f64 + rng.random_range(0.2..0.8);
        cell / (extent - 1.0) * 2.0 - 1.0
    });
    let ops = [random(rng, &[2, 2, h, w]), grid];
    each_operand(&ops, |g, v| {
        let y = g.bilinear_sample(v[0], v[1])?;
        probed(g, y, 3)
    })
}

fn check_batch_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let ops = [random(rng, &[3, 2, 3, 2]), random(rng, &[2]), random(rng, &[2])];
    each_operand(&ops, |g, v| {
        let mut state = BatchNormState::new(2);
        let y = g.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train)?;
        probed(g, y, 4)
    })
}

fn check_dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let ops = [random(rng, &[3, 5]), random(rng, &[4, 5]), random(rng, &[4])];
    each_operand(&ops, |g, v| {
        let y = g.dense(v[0], v[1], v[2])?;
        probed(g, y, 5)
    })
}

fn check_softmax_nll(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = Tensor::from_fn(vec![4, 2], |_| rng.random_range(-3.0..3.0));
    each_operand(&[logits], |g, v| g.softmax_cross_entropy(v[0], &[0, 1, 1, 0]))
}

fn check_contrastive(rng: &mut ChaCha8Rng) -> Result<f64> {
    // Rows are unit vectors; negatives are placed at d ∈ [0.3, 0.8], inside
    // the hinge and away from d = 0.
    let dim = 5;
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..4 {
        let x = unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let dir = unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let step = if i % 2 == 0 { rng.random_range(0.05..1.5) } else { rng.random_range(0.3..0.8) };
        b.extend(x.iter().zip(&dir).map(|(p, q)| p + step * q));
        a.extend(x);
    }
    let ops = [Tensor::new(vec![4, dim], a)?, Tensor::new(vec![4, dim], b)?];
    each_operand(&ops, |g, v| contrastive_loss(g, v[0], v[1], &[1, 0, 1, 0], 1.0))
}

/// A scaled-down {L2, L3} network on 3×32×12 inputs with smooth
/// activations, small enough to difference every weight.
pub fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::with_levels(&[Level::L2, Level::L3]);
    cfg.input_h = 32;
    cfg.input_w = 12;
    cfg.sampler_sizes = vec![4, 3];
    cfg.activation = Activation::Tanh;
    cfg.widths = Widths {
        conv1: 3,
        trunk: 4,
        loc1: 3,
        loc3: 4,
        head: 3,
        head_out: 5,
        embed: 4,
    };
    cfg
}

/// Combined loss of a two-pair batch (one match, one mismatch) drawn from
/// three images.
fn micro_loss(weights: &mut Weights<f64>, cfg: &ModelConfig, images: &Tensor<f64>, track: bool) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let (left, right, labels) = ([0, 0], [1, 2], [1, 0]);
    let mut fwd = Forward::new(weights, Mode::Train, track);
    let x = fwd.graph.constant(images.clone());
    let out = forward_indexed(&mut fwd, cfg, x, &left, &right)?;
    let cls = classification_loss(&mut fwd.graph, out.logits, &labels)?;
    let (r1, r2) = out
        .descriptors
        .ok_or_else(|| Error::contract("micro_loss", "ranking net disabled"))?;
    let ctr = contrastive_loss(&mut fwd.graph, r1, r2, &labels, cfg.margin)?;
    let total = combined_loss(&mut fwd.graph, cls, Some(ctr), out.rotation_penalty)?;
    let value = fwd.graph.value(total).item();
    if !track {
        return Ok((value, BTreeMap::new()));
    }
    fwd.graph.backward(total)?;
    Ok((value, fwd.grads()))
}

/// Worst relative error over every trainable scalar of the micro-model.
pub fn check_end_to_end(seed: u64) -> Result<f64> {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::init(cfg.clone(), &mut rng)?;
    // Zero-initialized heads would pin every transform to the same crop,
    // whose sample points land on kernel kinks.
    let names: Vec<String> = model.weights.params().keys().cloned().collect();
    for name in &names {
        for v in model.weights.param_mut(name).expect("known tensor").data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let images = Tensor::from_fn(vec![3, 3, cfg.input_h, cfg.input_w], |_| rng.random_range(-1.0..1.0));
    let (_, analytic) = micro_loss(&mut model.weights.clone(), &cfg, &images, true)?;
    let mut worst = 0.0f64;
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::contract("check_end_to_end", format!("no gradient for {name}")))?;
        for i in 0..grad.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut w = model.weights.clone();
                w.param_mut(&name).expect("known tensor").data_mut()[i] += delta;
                Ok(micro_loss(&mut w, &cfg, &images, false)?.0)
            };
            let numeric = (probe(EPS)? - probe(-EPS)?) / (2.0 * EPS);
            let e = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(NOISE_FLOOR);
            if e > worst {
                log::debug!("{name}[{i}]: analytic {} numeric {numeric}", grad[i]);
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Runs the check called `name`; see [`CHECKS`].
pub fn run_check(name: &str, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (name, err, tolerance) = match name {
        "conv2d" => ("conv2d", check_conv2d(&mut rng)?, OP_TOLERANCE),
        "depthwise_corr" => ("depthwise_corr", check_depthwise(&mut rng)?, OP_TOLERANCE),
        "bilinear_sample" => ("bilinear_sample", check_sampler(&mut rng)?, OP_TOLERANCE),
        "batch_norm" => ("batch_norm", check_batch_norm(&mut rng)?, OP_TOLERANCE),
        "dense" => ("dense", check_dense(&mut rng)?, OP_TOLERANCE),
        "softmax_nll" => ("softmax_nll", check_softmax_nll(&mut rng)?, OP_TOLERANCE),
        "contrastive" => ("contrastive", check_contrastive(&mut rng)?, OP_TOLERANCE),
        "combined" => ("combined", check_end_to_end(seed)?, END_TO_END_TOLERANCE),
        other => return Err(Error::contract("run_check", format!("unknown check {other:?}"))),
    };
    Ok(CheckResult {
        name,
        max_rel_error: err,
        tolerance,
    })
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|n| run_check(n, seed)).collect()
}
