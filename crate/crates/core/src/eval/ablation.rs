use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{channel_stats, Sample};
use crate::error::{Error, Result};
use crate::model::{count_flops, Level, Model, ModelConfig};
use crate::train::{train, TrainConfig, TrainLog};

use super::cmc::CmcCurve;
use super::protocol::evaluate_single_shot;

pub const CSV_HEADER: &str = "config,seed,rank1,rank5,rank10,params,flops";

/// A named model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub config: ModelConfig,
}

impl AblationCell {
    pub fn new(name: impl Into<String>, config: ModelConfig) -> Self {
        AblationCell {
            name: name.into(),
            config,
        }
    }
}

/// The full {L2, L3} model and its four reductions: classification loss
/// only, each level alone, and a fixed central crop instead of the STN.
pub fn standard_grid(base: &ModelConfig) -> Vec<AblationCell> {
    let levels = |ls: &[Level]| {
        let mut c = base.clone();
        c.levels = ls.to_vec();
        c.sampler_sizes = ls.iter().map(|l| l.default_sampler_size()).collect();
        c
    };
    let full = levels(&[Level::L2, Level::L3]);
    let mut cls = full.clone();
    cls.use_ranking_loss = false;
    let mut crop = full.clone();
    crop.use_stn = false;
    vec![
        AblationCell::new("l2l3", full),
        AblationCell::new("cls", cls),
        AblationCell::new("l2", levels(&[Level::L2])),
        AblationCell::new("l3", levels(&[Level::L3])),
        AblationCell::new("fixed-crop", crop),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub params: usize,
    pub flops: u64,
}

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{},{}",
            self.config, self.seed, self.rank1, self.rank5, self.rank10, self.params, self.flops
        )
    }
}

/// Training and evaluation pools plus the protocol shared by every cell.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    pub train_config: TrainConfig,
    pub trials: usize,
    pub eval_seed: u64,
}

/// Outcome of training and evaluating one configuration.
#[derive(Clone, Debug)]
pub struct Fit {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub curve: CmcCurve,
}

/// Trains `config` from a `seed`-initialized model on the training pool,
/// then evaluates it on the test pool.
pub fn fit(config: &ModelConfig, exp: &Experiment<'_>, seed: u64) -> Result<Fit> {
    let mut config = config.clone();
    let (mean, std) = channel_stats(exp.train);
    config.input_mean = mean;
    config.input_std = std;
    let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tc = TrainConfig {
        seed,
        ..exp.train_config.clone()
    };
    let log = train(&mut model, exp.train, &tc)?;
    let curve = evaluate_single_shot(&model, exp.test, exp.trials, exp.eval_seed)?;
    Ok(Fit { model, log, curve })
}

/// Trains and evaluates every cell under every seed, reporting each row
/// to `on_row` as it completes.
pub fn run_ablation(
    cells: &[AblationCell],
    exp: &Experiment<'_>,
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::contract("run_ablation", "need at least one cell and one seed"));
    }
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for &seed in seeds {
        for cell in cells {
            let f = fit(&cell.config, exp, seed)?;
            let row = AblationRow {
                config: cell.name.clone(),
                seed,
                rank1: f.curve.rank(1),
                rank5: f.curve.rank(5),
                rank10: f.curve.rank(10),
                params: f.model.num_params(),
                flops: count_flops(&f.model.config),
            };
            log::info!("{} ({:.0}s)", row.to_csv(), f.log.seconds);
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[AblationRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}
