//! Acceptance gate: one PASS/FAIL line per criterion on stderr.
//!
//! Run with `cargo test -p mlsim --test acceptance -- --nocapture` to also
//! see per-run progress. Criteria 5 and 6 train 25 full-size models and
//! take a few hours on one core.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlsim::checkpoint::{load_checkpoint, save_checkpoint};
use mlsim::checks::{run_all, END_TO_END_TOLERANCE, OP_TOLERANCE};
use mlsim::csn::{fuse_levels, similarity_maps};
use mlsim::data::{split_by_identity, synthesize, PositivePolicy, Sample, SynthSpec};
use mlsim::eval::{cmc, embed_all, fit, run_ablation, score_matrix, standard_grid, write_csv, Experiment};
use mlsim::model::{count_flops, count_params, count_params_closed_form, embed_images, feature_extract, Level, Model, ModelConfig};
use mlsim::nn::{BatchNormState, Mode, Padding};
use mlsim::params::Forward;
use mlsim::train::{train, TrainConfig};
use mlsim::{Graph, Tensor};

fn report(criterion: u32, pass: bool, detail: &str) {
    // Written to the raw handle so the line survives libtest's capture.
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance criterion {criterion}: {verdict} ({detail})");
}

fn progress(msg: &str) {
    let _ = writeln!(std::io::stderr(), "  {msg}");
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let results = run_all(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut detail = Vec::new();
    let mut pass = secs < 120.0;
    for r in &results {
        let tol = if r.name == "combined" { END_TO_END_TOLERANCE } else { OP_TOLERANCE };
        assert_eq!(r.tolerance, tol);
        pass &= r.max_rel_error < tol;
        detail.push(format!("{} {:.1e}", r.name, r.max_rel_error));
    }
    report(1, pass, &format!("{}; {secs:.1}s of 120s", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
    let mut out = Vec::new();
    for img in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (sy, sx) = ((y + i) as isize - pad as isize, (xx + j) as isize - pad as isize);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((img * c + ic) * h + sy as usize) * wd + sx as usize]
                                    * w.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn naive_depthwise(s: &Tensor<f64>, f: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = s.shape().try_into().unwrap();
    let [_, _, fh, fw] = f.shape().try_into().unwrap();
    let (top, left) = ((fh - 1) / 2, (fw - 1) / 2);
    let mut out = Vec::new();
    for q in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..fh {
                    for j in 0..fw {
                        let (sy, sx) = ((y + i) as isize - top as isize, (x + j) as isize - left as isize);
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            acc += s.data()[(q * h + sy as usize) * w + sx as usize] * f.data()[(q * fh + i) * fw + j];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Tent-kernel sum over every input pixel.
fn naive_sample(input: &Tensor<f64>, grid: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = input.shape().try_into().unwrap();
    let [_, oh, ow, _] = grid.shape().try_into().unwrap();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for k in 0..oh * ow {
                let g = &grid.data()[(b * oh * ow + k) * 2..(b * oh * ow + k) * 2 + 2];
                let px = (g[0] + 1.0) / 2.0 * (w as f64 - 1.0);
                let py = (g[1] + 1.0) / 2.0 * (h as f64 - 1.0);
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        let kern = (1.0 - (px - j as f64).abs()).max(0.0) * (1.0 - (py - i as f64).abs()).max(0.0);
                        acc += kern * input.data()[((b * c + ch) * h + i) * w + j];
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn naive_maxpool(x: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let mut out = Vec::new();
    for q in 0..n * c {
        for oy in 0..h.div_ceil(2) {
            for ox in 0..w.div_ceil(2) {
                let mut best = f64::NEG_INFINITY;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        best = best.max(x.data()[(q * h + y) * w + xx]);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn naive_batch_norm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let s = h * w;
    let mut out = vec![0.0; x.numel()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|i| x.data()[(i * c + ch) * s..(i * c + ch + 1) * s].to_vec()).collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64)
            }
        };
        for i in 0..n {
            for k in 0..s {
                let idx = (i * c + ch) * s + k;
                out[idx] = gamma[ch] * (x.data()[idx] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

fn naive_rank1(scores: &[f64], ids: &[u32]) -> f64 {
    let g = ids.len();
    let mut hits = 0;
    for (q, &id) in ids.iter().enumerate() {
        let row = &scores[q * g..(q + 1) * g];
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        hits += (ids[order[0]] == id) as usize;
    }
    hits as f64 / ids.len() as f64
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_2_oracle_equivalence() {
    const INSTANCES: usize = 200;
    const TOL: f64 = 1e-6;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 6];
    for _ in 0..INSTANCES {
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..9), rng.random_range(2..9));
        let mut g = Graph::<f64>::new();

        let k = [1, 3, 5][rng.random_range(0..3)];
        let (o, same) = (rng.random_range(1..4), rng.random_bool(0.5));
        let (xt, wt, bt) = (random(&mut rng, &[n, c, h, w]), random(&mut rng, &[o, c, k, k]), random(&mut rng, &[o]));
        if same || (h >= k && w >= k) {
            let (x, wv, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
            let pad = if same { Padding::Same } else { Padding::Valid };
            let y = g.conv2d(x, wv, Some(b), 1, pad).unwrap();
            let want = naive_conv2d(&xt, &wt, &bt, if same { (k - 1) / 2 } else { 0 });
            worst[0] = worst[0].max(max_diff(g.value(y).data(), &want));
        }

        let (fh, fw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let (st, ft) = (random(&mut rng, &[n, c, h, w]), random(&mut rng, &[n, c, fh, fw]));
        let (s, f) = (g.constant(st.clone()), g.constant(ft.clone()));
        let y = g.depthwise_corr(s, f).unwrap();
        worst[1] = worst[1].max(max_diff(g.value(y).data(), &naive_depthwise(&st, &ft)));

        let (oh, ow) = (rng.random_range(1..5), rng.random_range(1..5));
        let gt = random(&mut rng, &[n, oh, ow, 2]);
        let it = random(&mut rng, &[n, c, h, w]);
        let (iv, gv) = (g.constant(it.clone()), g.constant(gt.clone()));
        let y = g.bilinear_sample(iv, gv).unwrap();
        worst[2] = worst[2].max(max_diff(g.value(y).data(), &naive_sample(&it, &gt)));

        let xt = random(&mut rng, &[n, c, h, w]);
        let x = g.constant(xt.clone());
        let y = g.maxpool2x2(x).unwrap();
        worst[3] = worst[3].max(max_diff(g.value(y).data(), &naive_maxpool(&xt)));

        let nb = n + 1;
        let xt = random(&mut rng, &[nb, c, h, w]);
        let (gm, bt) = (random(&mut rng, &[c]), random(&mut rng, &[c]));
        let mut state = BatchNormState::new(c);
        let (x, gmv, bv) = (g.constant(xt.clone()), g.constant(gm.clone()), g.constant(bt.clone()));
        let y = g.batch_norm(x, gmv, bv, &mut state, Mode::Train).unwrap();
        let want = naive_batch_norm(&xt, gm.data(), bt.data(), None, state.eps);
        worst[4] = worst[4].max(max_diff(g.value(y).data(), &want));
        let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
        state.running_mean = Tensor::new(vec![c], rm.clone()).unwrap();
        state.running_var = Tensor::new(vec![c], rv.clone()).unwrap();
        let y = g.batch_norm(x, gmv, bv, &mut state, Mode::Infer).unwrap();
        let want = naive_batch_norm(&xt, gm.data(), bt.data(), Some((&rm, &rv)), state.eps);
        worst[4] = worst[4].max(max_diff(g.value(y).data(), &want));

        let gsize = rng.random_range(1..12);
        let ids: Vec<u32> = (0..gsize as u32).collect();
        let scores: Vec<f64> = (0..gsize * gsize).map(|_| rng.random_range(0..5) as f64).collect();
        let curve = cmc(&scores, &ids, &ids).unwrap();
        worst[5] = worst[5].max((curve.rank(1) - naive_rank1(&scores, &ids)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let names = ["conv2d", "depthwise_corr", "bilinear_sample", "maxpool", "batch_norm", "cmc"];
    let pass = worst.iter().all(|&e| e <= TOL) && secs < 60.0;
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(2, pass, &format!("{INSTANCES} instances each; {}; {secs:.1}s of 60s", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_shape_ledger() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (levels, fused) in [(&[Level::L2, Level::L3][..], 1152), (&[Level::L2, Level::L3, Level::L4][..], 1728)] {
        let cfg = ModelConfig::with_levels(levels);
        let mut model = Model::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut fwd = Forward::new(&mut model.weights, Mode::Infer, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = fwd.graph.constant(Tensor::from_fn(vec![2, 3, 160, 60], |_| rng.random_range(0.0..1.0)));
        let feats = feature_extract(&mut fwd, &cfg, x).unwrap();
        let x2 = fwd.graph.shape(feats.get(Level::L2).unwrap()).to_vec();
        let x3 = fwd.graph.shape(feats.get(Level::L3).unwrap()).to_vec();
        ok &= x2 == [2, 96, 40, 15] && x3 == [2, 96, 20, 8];
        let emb = embed_images(&mut fwd, &cfg, x).unwrap();
        let g = &mut fwd.graph;
        let mut sims = Vec::new();
        for (&(_, m), &(_, ps)) in emb.maps.iter().zip(&emb.parts) {
            let m1 = g.gather_rows(m, &[0]).unwrap();
            let m2 = g.gather_rows(m, &[1]).unwrap();
            let p1 = ps.map(|p| g.gather_rows(p, &[0]).unwrap());
            let p2 = ps.map(|p| g.gather_rows(p, &[1]).unwrap());
            sims.push(similarity_maps(g, m1, m2, &p1, &p2).unwrap());
        }
        let f = fuse_levels(g, &sims, cfg.fused_hw()).unwrap();
        let fs = g.shape(f)[1..].to_vec();
        ok &= fs == [fused, 10, 4];
        detail.push(format!("{levels:?}: x2 {:?} x3 {:?} fused {fs:?}", &x2[1..], &x3[1..]));
    }
    report(3, ok, &detail.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_complexity() {
    let start = Instant::now();
    let band = |got: f64, want: f64, tol: f64| (got - want).abs() <= tol * want;
    let mut ok = true;
    let mut detail = Vec::new();
    for (levels, params, flops) in [(&[Level::L2, Level::L3][..], 0.5e6, 0.96e9), (&[Level::L2, Level::L3, Level::L4][..], 0.8e6, 1.31e9)] {
        let cfg = ModelConfig::with_levels(levels);
        let model = Model::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = count_params(&model.weights);
        let fl = count_flops(&cfg);
        ok &= p == count_params_closed_form(&cfg);
        ok &= band(p as f64, params, 0.15) && band(fl as f64, flops, 0.35);
        detail.push(format!(
            "{levels:?}: {p} params ({:+.1}%), {:.3} GFLOPs ({:+.1}%)",
            (p as f64 / params - 1.0) * 100.0,
            fl as f64 / 1e9,
            (fl as f64 / flops - 1.0) * 100.0
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 5.0;
    report(4, ok, &detail.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------- 5, 6

fn desk_scale_pools() -> (Vec<Sample>, Vec<Sample>) {
    let (_, samples) = synthesize(&SynthSpec {
        identities: 30,
        cameras: 2,
        views_per_camera: 4,
        seed: 0,
        ..SynthSpec::default()
    });
    let split = split_by_identity(&samples, 0, 10, 0).unwrap();
    let (test, train) = samples.into_iter().partition(|s| split.test.contains(&s.id));
    (train, test)
}

fn desk_scale_training() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 24,
        positives: PositivePolicy::CrossCamera,
        ..TrainConfig::default()
    }
}

#[test]
fn criteria_5_and_6_training_and_ablations() {
    let (train_pool, test_pool) = desk_scale_pools();
    assert_eq!(test_pool.len(), 10 * 8);
    let exp = Experiment {
        train: &train_pool,
        test: &test_pool,
        train_config: desk_scale_training(),
        trials: 10,
        eval_seed: 1,
    };
    let grid = standard_grid(&ModelConfig::default());
    assert_eq!(grid[0].name, "l2l3");

    let start = Instant::now();
    let full = fit(&grid[0].config, &exp, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rank1 = full.curve.rank(1);
    let pass5 = rank1 >= 0.80 && secs <= 30.0 * 60.0;
    report(5, pass5, &format!("{{L2,L3}} rank-1 {rank1:.3} (need >= 0.80), {:.1} min of 30", secs / 60.0));

    let seeds = [0u64, 1, 2, 3, 4];
    let start = Instant::now();
    let rows = run_ablation(&grid, &exp, &seeds, |r| progress(&r.to_csv())).unwrap();
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    let csv = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation.csv");
    write_csv(&rows, std::fs::File::create(&csv).unwrap()).unwrap();

    let r1 = |cell: &str, seed: u64| rows.iter().find(|r| r.config == cell && r.seed == seed).unwrap().rank1;
    let wins = |other: &str| seeds.iter().filter(|&&s| r1("l2l3", s) >= r1(other, s)).count();
    let (cls, l2, l3, crop) = (wins("cls"), wins("l2"), wins("l3"), wins("fixed-crop"));
    let pass6 = cls >= 4 && l2 >= 4 && l3 >= 4 && crop >= 3 && hours <= 4.0;
    report(
        6,
        pass6,
        &format!(
            "l2l3 >= cls {cls}/5 (need 4), >= l2 {l2}/5 (need 4), >= l3 {l3}/5 (need 4), >= fixed-crop {crop}/5 (need 3); {hours:.2} h of 4; rows in {}",
            csv.display()
        ),
    );
    assert!(pass5, "criterion 5");
    assert!(pass6, "criterion 6");
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_cmc_sanity() {
    const QUERIES: usize = 10_000;
    const GALLERY: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gallery: Vec<u32> = (0..GALLERY as u32).collect();
    let queries: Vec<u32> = (0..QUERIES).map(|_| rng.random_range(0..GALLERY as u32)).collect();
    let scores: Vec<f64> = (0..QUERIES * GALLERY).map(|_| rng.random()).collect();
    let curve = cmc(&scores, &queries, &gallery).unwrap();
    let mut ok = true;
    let mut worst_z = 0.0f64;
    for k in 1..=GALLERY {
        let p = k as f64 / GALLERY as f64;
        let sigma = (p * (1.0 - p) / QUERIES as f64).sqrt();
        let dev = (curve.rank(k) - p).abs();
        if sigma > 0.0 {
            worst_z = worst_z.max(dev / sigma);
            ok &= dev <= 3.0 * sigma;
        } else {
            ok &= dev == 0.0;
        }
    }
    let oracle: Vec<f64> = queries
        .iter()
        .flat_map(|&q| gallery.iter().map(move |&g| if g == q { 2.0 } else { 1.0 }))
        .collect();
    let oracle_r1 = cmc(&oracle, &queries, &gallery).unwrap().rank(1);
    ok &= oracle_r1 == 1.0;
    report(7, ok, &format!("worst |rank-k - k/G| = {worst_z:.2} sigma over {QUERIES} queries; oracle rank-1 {oracle_r1}"));
    assert!(ok);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_determinism_and_persistence() {
    let (train_pool, test_pool) = desk_scale_pools();
    let train_pool: Vec<Sample> = train_pool.into_iter().filter(|s| s.id < 8).collect();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 24,
        positives: PositivePolicy::CrossCamera,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::<f32>::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let log = train(&mut m, &train_pool, &tc).unwrap();
        (m, log)
    };
    let (model, a) = run();
    let (_, b) = run();
    let curves_equal = a.steps.len() > 1 && a.steps == b.steps;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let queries: Vec<Tensor<f32>> = test_pool.iter().filter(|s| s.camera == 0).take(4).map(|s| s.image.clone()).collect();
    let gallery: Vec<Tensor<f32>> = test_pool.iter().filter(|s| s.camera == 1).take(6).map(|s| s.image.clone()).collect();
    let before = score_matrix(&model, &queries, &gallery).unwrap();
    let after = score_matrix(&loaded, &queries, &gallery).unwrap();
    let bits = |m: &mlsim::eval::ScoreMatrix| m.scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>();
    let scores_equal = bits(&before) == bits(&after);
    let embeddings_equal = embed_all(&model, &queries).unwrap() == embed_all(&loaded, &queries).unwrap();
    let ok = curves_equal && scores_equal && embeddings_equal && loaded == model;
    report(
        8,
        ok,
        &format!(
            "{} training steps identical across runs: {curves_equal}; {}x{} score matrix bit-identical after reload: {scores_equal}",
            a.steps.len(),
            before.rows,
            before.cols
        ),
    );
    assert!(ok);
}
