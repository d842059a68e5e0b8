use crate::csn::{extract_parts, fuse_levels, similarity_maps, StripeSpec};
use crate::error::{Error, Result};
use crate::params::{Forward, Init, LayerSpec};
use crate::stn::localization_layers;
use crate::tensor::{Scalar, Var};

use super::{Level, ModelConfig};

/// Every layer of the network described by `cfg`, in build order.
pub fn architecture(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let w = &cfg.widths;
    let t = w.trunk;
    let mut l = vec![
        LayerSpec::conv("conv1", w.conv1, 3, 5),
        LayerSpec::batch_norm("conv1.bn", w.conv1),
        LayerSpec::conv("conv2", t, w.conv1, 3),
        LayerSpec::batch_norm("conv2.bn", t),
    ];
    if cfg.deepest() >= Level::L3 {
        l.push(LayerSpec::conv("conv3", t, t, 3));
        l.push(LayerSpec::batch_norm("conv3.bn", t));
    }
    if cfg.deepest() >= Level::L4 {
        l.push(LayerSpec::conv("conv3b", t, t, 3));
        l.push(LayerSpec::batch_norm("conv3b.bn", t));
    }
    if cfg.use_stn {
        for &lv in &cfg.levels {
            l.extend(localization_layers(&format!("loc.{lv}"), t, w.loc1, w.loc3));
        }
    }
    let fused = cfg.fused_channels();
    l.extend([
        LayerSpec::conv("conv4", w.head, fused, 1),
        LayerSpec::batch_norm("conv4.bn", w.head),
        LayerSpec::conv("conv5", w.head, w.head, 3),
        LayerSpec::batch_norm("conv5.bn", w.head),
        LayerSpec::conv("conv6", w.head_out, w.head, 1),
        LayerSpec::batch_norm("conv6.bn", w.head_out),
        LayerSpec::dense("fc", 2, w.head_out, Init::Glorot),
    ]);
    if cfg.use_ranking_loss {
        l.push(LayerSpec::conv("rank.conv1", t, t, 3));
        for &lv in &cfg.levels {
            l.push(LayerSpec::batch_norm(format!("rank.conv1.bn_{lv}"), t));
        }
        for &lv in &cfg.levels {
            l.push(LayerSpec::conv(format!("rank.conv2_{lv}"), t, t, 3));
            l.push(LayerSpec::batch_norm(format!("rank.conv2_{lv}.bn"), t));
        }
        l.push(LayerSpec::dense("rank.fc", w.embed, t * cfg.levels.len(), Init::Glorot));
    }
    l
}

/// Trunk maps at each configured level, for a standardized N×3×H×W batch.
#[derive(Clone, Debug)]
pub struct Features {
    pub maps: Vec<(Level, Var)>,
}

impl Features {
    pub fn get(&self, l: Level) -> Option<Var> {
        self.maps.iter().find(|(x, _)| *x == l).map(|&(_, v)| v)
    }
}

/// conv1 (5×5) → pool → conv2 → pool = x2 → conv3 → pool = x3 →
/// conv3b → pool = x4, stopping at the deepest configured level.
pub fn feature_extract<T: Scalar>(fwd: &mut Forward<'_, T>, cfg: &ModelConfig, images: Var) -> Result<Features> {
    let s = fwd.graph.shape(images);
    if s.len() != 4 || s[1..] != [3, cfg.input_h, cfg.input_w] {
        return Err(Error::shape("feature_extract", s, &[0, 3, cfg.input_h, cfg.input_w]));
    }
    let act = Some(cfg.activation);
    let mut x = fwd.conv_block("conv1", images, act)?;
    x = fwd.graph.maxpool2x2(x)?;
    let mut maps = Vec::new();
    for (lv, layer) in [(Level::L2, "conv2"), (Level::L3, "conv3"), (Level::L4, "conv3b")] {
        if lv > cfg.deepest() {
            break;
        }
        x = fwd.conv_block(layer, x, act)?;
        x = fwd.graph.maxpool2x2(x)?;
        if cfg.has_level(lv) {
            maps.push((lv, x));
        }
    }
    Ok(Features { maps })
}

/// conv4 (1×1) → conv5 (3×3) → pool → conv6 (1×1, no activation) → GAP →
/// dense to two logits; class 1 means "same person".
pub fn decision_head<T: Scalar>(fwd: &mut Forward<'_, T>, cfg: &ModelConfig, fused: Var) -> Result<Var> {
    let act = Some(cfg.activation);
    let x = fwd.conv_block("conv4", fused, act)?;
    let x = fwd.conv_block("conv5", x, act)?;
    let x = fwd.graph.maxpool2x2(x)?;
    let x = fwd.conv_block("conv6", x, None)?;
    let x = fwd.graph.global_avg_pool(x)?;
    fwd.dense("fc", x)
}

/// Unit-norm N×embed descriptors from the parts of every level.
///
/// Each part goes through the shared 3×3 conv (batch norm per level) and a
/// pool; the three stripes are stacked vertically and pass a per-level
/// 3×3 conv; levels are globally averaged, concatenated and embedded.
pub fn ranking_descriptor<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &ModelConfig,
    parts: &[(Level, [Var; 3])],
) -> Result<Var> {
    let act = cfg.activation;
    let mut pooled = Vec::with_capacity(parts.len());
    for &(lv, ps) in parts {
        let n = fwd.graph.shape(ps[0])[0];
        let stacked = fwd.graph.concat(&ps, 0)?;
        let y = fwd.conv("rank.conv1", stacked)?;
        let y = fwd.batch_norm(&format!("rank.conv1.bn_{lv}"), y)?;
        let y = fwd.activate(y, act);
        let y = fwd.graph.maxpool2x2(y)?;
        let stripes = [0, 1, 2].map(|k| fwd.graph.slice(y, 0, k * n, n));
        let stripes = stripes.into_iter().collect::<Result<Vec<_>>>()?;
        let tall = fwd.graph.concat(&stripes, 2)?;
        let y = fwd.conv_block(&format!("rank.conv2_{lv}"), tall, Some(act))?;
        pooled.push(fwd.graph.global_avg_pool(y)?);
    }
    let joined = fwd.graph.concat(&pooled, 1)?;
    let e = fwd.dense("rank.fc", joined)?;
    Ok(fwd.graph.l2_normalize(e)?.0)
}

/// Everything the network computes from one image alone, for a batch
/// of U images.
#[derive(Clone, Debug)]
pub struct Embedding {
    /// U×C×H×W trunk map per level.
    pub maps: Vec<(Level, Var)>,
    /// U×C×f×f parts per level: upper, middle, bottom.
    pub parts: Vec<(Level, [Var; 3])>,
    /// Constrained U×6 transforms, one per level and stripe.
    pub transforms: Vec<Var>,
    /// U×embed unit-norm descriptors.
    pub descriptors: Option<Var>,
}

/// Trunk, part extraction and ranking descriptors for U images.
pub fn embed_images<T: Scalar>(fwd: &mut Forward<'_, T>, cfg: &ModelConfig, images: Var) -> Result<Embedding> {
    let feats = feature_extract(fwd, cfg, images)?;
    let mut parts = Vec::new();
    let mut transforms = Vec::new();
    for &(lv, x) in &feats.maps {
        let spec = StripeSpec::for_level(cfg, lv)?;
        let p = extract_parts(fwd, cfg, &spec, x)?;
        transforms.extend(p.transforms.into_iter().flatten());
        parts.push((lv, p.parts));
    }
    let descriptors = if cfg.use_ranking_loss {
        Some(ranking_descriptor(fwd, cfg, &parts)?)
    } else {
        None
    };
    Ok(Embedding {
        maps: feats.maps,
        parts,
        transforms,
        descriptors,
    })
}

/// Logits B×2 for the pairs `(left[k], right[k])` of embedded images.
pub fn pair_logits<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &ModelConfig,
    emb: &Embedding,
    left: &[usize],
    right: &[usize],
) -> Result<Var> {
    if left.len() != right.len() {
        return Err(Error::shape("pair_logits", &[left.len()], &[right.len()]));
    }
    let g = &mut fwd.graph;
    let mut sims = Vec::with_capacity(emb.maps.len());
    for (&(_, x), &(_, ps)) in emb.maps.iter().zip(&emb.parts) {
        let x1 = g.gather_rows(x, left)?;
        let x2 = g.gather_rows(x, right)?;
        let mut p1 = ps;
        let mut p2 = ps;
        for k in 0..3 {
            p1[k] = g.gather_rows(ps[k], left)?;
            p2[k] = g.gather_rows(ps[k], right)?;
        }
        sims.push(similarity_maps(g, x1, x2, &p1, &p2)?);
    }
    let fused = fuse_levels(g, &sims, cfg.fused_hw())?;
    decision_head(fwd, cfg, fused)
}

/// Outputs for a batch of B pairs.
#[derive(Clone, Copy, Debug)]
pub struct PairOutput {
    /// B×2.
    pub logits: Var,
    /// B×embed descriptors of the first and second images.
    pub descriptors: Option<(Var, Var)>,
    /// Rotation penalty of both images' transforms, averaged over pairs.
    pub rotation_penalty: Option<Var>,
}

/// Runs the pairs `(left[k], right[k])` over a batch of distinct images,
/// embedding each image once.
pub fn forward_indexed<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &ModelConfig,
    images: Var,
    left: &[usize],
    right: &[usize],
) -> Result<PairOutput> {
    let emb = embed_images(fwd, cfg, images)?;
    let logits = pair_logits(fwd, cfg, &emb, left, right)?;
    let g = &mut fwd.graph;
    let descriptors = match emb.descriptors {
        Some(r) => Some((g.gather_rows(r, left)?, g.gather_rows(r, right)?)),
        None => None,
    };
    let both: Vec<usize> = left.iter().chain(right).copied().collect();
    let weight = cfg.rotation_weight / left.len() as f64;
    let mut penalty = None;
    for &t in &emb.transforms {
        let rows = g.gather_rows(t, &both)?;
        let p = g.rotation_l1_penalty(rows, weight)?;
        penalty = Some(match penalty {
            Some(acc) => g.add(acc, p)?,
            None => p,
        });
    }
    Ok(PairOutput {
        logits,
        descriptors,
        rotation_penalty: penalty,
    })
}

/// Runs B pairs given as two B×3×H×W batches.
pub fn forward_batch<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &ModelConfig,
    images1: Var,
    images2: Var,
) -> Result<PairOutput> {
    if fwd.graph.shape(images1) != fwd.graph.shape(images2) {
        return Err(Error::shape("forward_batch", fwd.graph.shape(images1), fwd.graph.shape(images2)));
    }
    let b = fwd.graph.shape(images1)[0];
    let both = fwd.graph.concat(&[images1, images2], 0)?;
    let left: Vec<usize> = (0..b).collect();
    let right: Vec<usize> = (b..2 * b).collect();
    forward_indexed(fwd, cfg, both, &left, &right)
}

/// Single-pair convenience over 3×H×W images.
pub fn forward_pair<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &ModelConfig,
    image1: Var,
    image2: Var,
) -> Result<PairOutput> {
    let mut s = fwd.graph.shape(image1).to_vec();
    s.insert(0, 1);
    let a = fwd.graph.reshape(image1, &s)?;
    let b = fwd.graph.reshape(image2, &s)?;
    forward_batch(fwd, cfg, a, b)
}
