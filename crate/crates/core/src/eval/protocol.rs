use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;

use super::cmc::{cmc, CmcCurve};
use super::score::{embed_all, score_pairs};

/// One single-shot draw: per identity a query and its gallery match, as
/// indices into the sample pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub ids: Vec<u32>,
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Draws `trials` single-shot splits. Query and gallery come from two
/// different cameras when the identity has them, otherwise from two
/// different images.
pub fn single_shot_trials(pool: &[Sample], trials: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut by_id: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_id.entry(s.id).or_default().entry(s.camera).or_default().push(i);
    }
    if let Some((id, _)) = by_id.iter().find(|(_, cams)| cams.values().map(Vec::len).sum::<usize>() < 2) {
        return Err(Error::contract("single_shot_trials", format!("identity {id} has a single image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut t = Trial {
            ids: Vec::new(),
            queries: Vec::new(),
            gallery: Vec::new(),
        };
        for (&id, cams) in &by_id {
            let (q, g) = if cams.len() >= 2 {
                let keys: Vec<u32> = cams.keys().copied().collect();
                let picked: Vec<u32> = keys.choose_multiple(&mut rng, 2).copied().collect();
                let q = *cams[&picked[0]].choose(&mut rng).expect("nonempty");
                let g = *cams[&picked[1]].choose(&mut rng).expect("nonempty");
                (q, g)
            } else {
                let all = cams.values().next().expect("one camera");
                let two: Vec<usize> = all.choose_multiple(&mut rng, 2).copied().collect();
                (two[0], two[1])
            };
            t.ids.push(id);
            t.queries.push(q);
            t.gallery.push(g);
        }
        out.push(t);
    }
    Ok(out)
}

/// Mean single-shot CMC over `trials` random draws from `pool`. Each
/// image is embedded once and each distinct pair scored once.
pub fn evaluate_single_shot(model: &Model<f32>, pool: &[Sample], trials: usize, seed: u64) -> Result<CmcCurve> {
    let draws = single_shot_trials(pool, trials, seed)?;
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut images = Vec::new();
    for t in &draws {
        for &i in t.queries.iter().chain(&t.gallery) {
            slot.entry(i).or_insert_with(|| {
                images.push(pool[i].image.clone());
                images.len() - 1
            });
        }
    }
    let cache = embed_all(model, &images)?;
    let mut pairs = Vec::new();
    for t in &draws {
        for q in &t.queries {
            pairs.extend(t.gallery.iter().map(|g| (slot[q], slot[g])));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let scores: HashMap<(usize, usize), f64> = pairs
        .iter()
        .copied()
        .zip(score_pairs(model, &cache, &pairs)?.into_iter().map(|s| s.score))
        .collect();
    let mut curves = Vec::with_capacity(draws.len());
    for t in &draws {
        let matrix: Vec<f64> = t
            .queries
            .iter()
            .flat_map(|q| t.gallery.iter().map(|g| scores[&(slot[q], slot[g])]).collect::<Vec<_>>())
            .collect();
        let curve = cmc(&matrix, &t.ids, &t.ids)?;
        log::debug!("trial rank-1 {:.3}", curve.rank(1));
        curves.push(curve);
    }
    CmcCurve::mean(&curves)
}
