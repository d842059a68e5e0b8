use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlsim::checkpoint::{load_checkpoint, save_checkpoint};
use mlsim::checks::{run_check, CHECKS};
use mlsim::csn::export_score_map;
use mlsim::data::{channel_stats, load_dataset, read_ppm, write_dataset, PositivePolicy, SynthSpec};
use mlsim::eval::{
    evaluate_single_shot, pair_similarity_maps, score_pairs, embed_all, write_csv, AblationRow,
};
use mlsim::model::{count_flops, Level, Model, ModelConfig};
use mlsim::optim::AdamConfig;
use mlsim::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "mlsim", version, about = "Multi-level similarity Siamese network for person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic pedestrian dataset as PPM files.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Single-shot CMC of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score one image pair.
    Infer(InferArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Parameter and FLOP counts of a configuration.
    Bench(BenchArgs),
    /// Write the similarity score maps of a pair as PGM images.
    ExportSimmaps(ExportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 30)]
    identities: usize,
    #[arg(long, default_value_t = 4)]
    views_per_camera: u32,
    #[arg(long, default_value_t = 2)]
    cameras: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Positives {
    All,
    CrossCamera,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "l2,l3")]
    levels: Vec<Level>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Pairs per batch, rounded down to a multiple of 3.
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Replace the spatial transformers with a fixed central crop.
    #[arg(long)]
    no_stn: bool,
    /// Train with the classification loss only.
    #[arg(long)]
    no_ranking_loss: bool,
    #[arg(long, value_enum, default_value = "cross-camera")]
    positives: Positives,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Random single-shot draws to average.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// A check name or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "l2,l3")]
    levels: Vec<Level>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Channels to export within each of the six part groups.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    channels: Vec<usize>,
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = SynthSpec {
        identities: a.identities,
        cameras: a.cameras,
        views_per_camera: a.views_per_camera,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let n = write_dataset(&spec, &a.out)?;
    println!("wrote {n} images to {}", a.out.display());
    Ok(())
}

fn load(data: &Path) -> Result<Vec<mlsim::data::Sample>> {
    let (samples, report) = load_dataset(data)?;
    for (path, why) in &report.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    Ok(samples)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let samples = load(&a.data)?;
    let mut cfg = ModelConfig::with_levels(&a.levels);
    cfg.use_stn = !a.no_stn;
    cfg.use_ranking_loss = !a.no_ranking_loss;
    (cfg.input_mean, cfg.input_std) = channel_stats(&samples);
    let mut model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: (a.batch / 3 * 3).max(3),
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed: a.seed,
        positives: match a.positives {
            Positives::All => PositivePolicy::All,
            Positives::CrossCamera => PositivePolicy::CrossCamera,
        },
        augment: !a.no_augment,
    };
    let log = train(&mut model, &samples, &tc)?;
    for (i, l) in log.epoch_mean.iter().enumerate() {
        println!("epoch {} loss {l:.4}", i + 1);
    }
    save_checkpoint(&model, &a.out)?;
    println!("saved {} ({} parameters, {:.0}s)", a.out.display(), model.num_params(), log.seconds);
    Ok(())
}

fn config_name(cfg: &ModelConfig) -> String {
    let mut name: String = cfg.levels.iter().map(|l| l.tag()).collect();
    if !cfg.use_stn {
        name.push_str("-fixed-crop");
    }
    if !cfg.use_ranking_loss {
        name.push_str("-cls");
    }
    name
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let samples = load(&a.data)?;
    let curve = evaluate_single_shot(&model, &samples, a.trials, a.seed)?;
    let row = AblationRow {
        config: config_name(&model.config),
        seed: a.seed,
        rank1: curve.rank(1),
        rank5: curve.rank(5),
        rank10: curve.rank(10),
        params: model.num_params(),
        flops: count_flops(&model.config),
    };
    let mut buf = Vec::new();
    write_csv(std::slice::from_ref(&row), &mut buf)?;
    fs::write(&a.report, &buf).with_context(|| format!("writing {}", a.report.display()))?;
    println!(
        "rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  ({} identities, {} trials)",
        row.rank1, row.rank5, row.rank10, curve.gallery_size, a.trials
    );
    Ok(())
}

fn read_input(path: &Path, cfg: &ModelConfig) -> Result<mlsim::Tensor<f32>> {
    let img = read_ppm(path)?;
    if img.shape()[1..] != [cfg.input_h, cfg.input_w] {
        bail!(
            "{}: image is {}×{}, the model expects {}×{}",
            path.display(),
            img.shape()[1],
            img.shape()[2],
            cfg.input_h,
            cfg.input_w
        );
    }
    Ok(img)
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let imgs = [read_input(&a.a, &model.config)?, read_input(&a.b, &model.config)?];
    let cache = embed_all(&model, &imgs)?;
    let s = score_pairs(&model, &cache, &[(0, 1)])?[0];
    println!("simi_score {:.6}", s.score);
    println!("match_probability {:.6}", s.prob);
    if let Some(d) = s.distance {
        println!("descriptor_distance {d:.6}");
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let names: Vec<&str> = if a.op == "all" {
        CHECKS.to_vec()
    } else if CHECKS.contains(&a.op.as_str()) {
        vec![a.op.as_str()]
    } else {
        bail!("unknown op {:?}; expected one of {} or all", a.op, CHECKS.join(", "));
    };
    let mut ok = true;
    for name in names {
        let r = run_check(name, a.seed)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:16} max rel error {:.3e} (tol {:.0e}) {verdict}", r.name, r.max_rel_error, r.tolerance);
        ok &= r.passed();
    }
    Ok(ok)
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let cfg = ModelConfig::with_levels(&a.levels);
    cfg.validate()?;
    let params = mlsim::model::count_params_closed_form(&cfg);
    let flops = count_flops(&cfg);
    println!("levels {}", config_name(&cfg));
    println!("params {params} ({:.3}M)", params as f64 / 1e6);
    println!("flops {flops} ({:.3}G)", flops as f64 / 1e9);
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let (x, y) = (read_input(&a.a, &model.config)?, read_input(&a.b, &model.config)?);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let groups = ["a-upper", "a-middle", "a-bottom", "b-upper", "b-middle", "b-bottom"];
    let mut written = 0;
    for (lv, maps) in pair_similarity_maps(&model, &x, &y)? {
        let per_group = maps.shape()[0] / groups.len();
        for (gi, group) in groups.iter().enumerate() {
            for &c in &a.channels {
                if c >= per_group {
                    bail!("channel {c} out of range; each group has {per_group} channels");
                }
                let path = a.out.join(format!("{}_{group}_{c}.pgm", lv.tag()));
                export_score_map(&maps, gi * per_group + c, &path)?;
                written += 1;
            }
        }
    }
    println!("wrote {written} maps to {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Infer(a) => infer_cmd(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
        Command::Bench(a) => bench_cmd(a)?,
        Command::ExportSimmaps(a) => export_cmd(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
