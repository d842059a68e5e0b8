use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::synth::Sample;

/// Which same-identity pairs count as positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositivePolicy {
    /// Every unordered pair of images of one identity.
    All,
    /// Only pairs seen by different cameras.
    CrossCamera,
}

/// Indices into a sample pool plus the match label (1 = same identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub a: usize,
    pub b: usize,
    pub label: usize,
}

/// One epoch of pairs grouped into batches. Each positive is followed by
/// two negatives, one per side, against a uniformly drawn other identity,
/// so every batch holds exactly twice as many negatives as positives.
pub fn make_pairs(
    pool: &[Sample],
    policy: PositivePolicy,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<PairIndex>>> {
    if batch_size == 0 || !batch_size.is_multiple_of(3) {
        return Err(Error::contract(
            "make_pairs",
            format!("batch size must be a positive multiple of 3, got {batch_size}"),
        ));
    }
    let mut ids: Vec<u32> = pool.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::contract("make_pairs", "need at least two identities"));
    }
    let by_id: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| (0..pool.len()).filter(|&i| pool[i].id == id).collect())
        .collect();

    let mut positives = Vec::new();
    for members in &by_id {
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                if policy == PositivePolicy::All || pool[a].camera != pool[b].camera {
                    positives.push((a, b));
                }
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::contract("make_pairs", "no positive pairs under this policy"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    let negative_for = |anchor: usize, rng: &mut ChaCha8Rng| {
        let own = ids.binary_search(&pool[anchor].id).expect("known id");
        let mut other = rng.random_range(0..ids.len() - 1);
        if other >= own {
            other += 1;
        }
        let members = &by_id[other];
        members[rng.random_range(0..members.len())]
    };
    let mut triples = Vec::with_capacity(positives.len() * 3);
    for &(a, b) in &positives {
        let (a, b) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let na = negative_for(a, &mut rng);
        let nb = negative_for(b, &mut rng);
        triples.push(PairIndex { a, b, label: 1 });
        triples.push(PairIndex { a, b: na, label: 0 });
        triples.push(PairIndex { a: nb, b, label: 0 });
    }
    Ok(triples.chunks(batch_size).map(<[_]>::to_vec).collect())
}

/// Mirrors a 3×H×W image left to right.
pub fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    let w = img.shape()[2];
    let mut out = img.clone();
    for (row_out, row_in) in out.data_mut().chunks_mut(w).zip(img.data().chunks(w)) {
        for (o, v) in row_out.iter_mut().zip(row_in.iter().rev()) {
            *o = *v;
        }
    }
    out
}

/// Bilinear resample of the window `(y0, x0, ch, cw)` back to the full
/// image size.
fn crop_resize(img: &Tensor<f32>, y0: f64, x0: f64, ch: f64, cw: f64) -> Tensor<f32> {
    let [c, h, w] = *img.shape() else { unreachable!("3-d image") };
    let d = img.data();
    let mut out = vec![0.0f32; c * h * w];
    for i in 0..h {
        let sy = (y0 + (i as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (iy, fy) = (sy.floor() as usize, sy.fract());
        let iy1 = (iy + 1).min(h - 1);
        for j in 0..w {
            let sx = (x0 + (j as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (ix, fx) = (sx.floor() as usize, sx.fract());
            let ix1 = (ix + 1).min(w - 1);
            for k in 0..c {
                let p = |y: usize, x: usize| d[(k * h + y) * w + x] as f64;
                let top = p(iy, ix) * (1.0 - fx) + p(iy, ix1) * fx;
                let bot = p(iy1, ix) * (1.0 - fx) + p(iy1, ix1) * fx;
                out[(k * h + i) * w + j] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("same shape")
}

/// Random crop covering 90–100% of the area at the original aspect
/// ratio, resized back, then a fair-coin horizontal flip.
pub fn augment(img: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let [_, h, w] = *img.shape() else { unreachable!("3-d image") };
    let side = rng.random_range(0.9f64..=1.0).sqrt();
    let (ch, cw) = (h as f64 * side, w as f64 * side);
    let y0 = rng.random_range(0.0..=h as f64 - ch);
    let x0 = rng.random_range(0.0..=w as f64 - cw);
    let cropped = crop_resize(img, y0, x0, ch, cw);
    if rng.random_bool(0.5) {
        flip_horizontal(&cropped)
    } else {
        cropped
    }
}

/// `(x − mean) / std` per channel, in place.
pub fn standardize(img: &mut Tensor<f32>, mean: &[f64; 3], std: &[f64; 3]) {
    let plane = img.numel() / 3;
    for (c, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        for v in chunk {
            *v = (*v - m) / s;
        }
    }
}

/// Batched image pairs ready for the network.
#[derive(Clone, Debug)]
pub struct PairBatch {
    /// U×3×H×W, each pool image of the batch once.
    pub images: Tensor<f32>,
    /// Pair k is `(images[left[k]], images[right[k]])`.
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub labels: Vec<usize>,
    pub ids: Vec<(u32, u32)>,
}

pub fn assemble_batch(
    pool: &[Sample],
    pairs: &[PairIndex],
    mean: &[f64; 3],
    std: &[f64; 3],
    augment_rng: Option<&mut ChaCha8Rng>,
) -> Result<PairBatch> {
    let mut slot = std::collections::HashMap::new();
    let mut order = Vec::new();
    let mut index = |i: usize| {
        *slot.entry(i).or_insert_with(|| {
            order.push(i);
            order.len() - 1
        })
    };
    let mut left = Vec::with_capacity(pairs.len());
    let mut right = Vec::with_capacity(pairs.len());
    for p in pairs {
        left.push(index(p.a));
        right.push(index(p.b));
    }
    let mut rng = augment_rng;
    let mut images = Vec::with_capacity(order.len());
    for &idx in &order {
        let mut img = match rng.as_deref_mut() {
            Some(r) => augment(&pool[idx].image, r),
            None => pool[idx].image.clone(),
        };
        standardize(&mut img, mean, std);
        images.push(img);
    }
    Ok(PairBatch {
        images: Tensor::stack(&images)?,
        left,
        right,
        labels: pairs.iter().map(|p| p.label).collect(),
        ids: pairs.iter().map(|p| (pool[p.a].id, pool[p.b].id)).collect(),
    })
}
