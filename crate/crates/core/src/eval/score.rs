use crate::csn::similarity_maps;
use crate::data::standardize;
use crate::error::{Error, Result};
use crate::model::{embed_images, pair_distances, pair_logits, simi_score, Embedding, Level, Model};
use crate::nn::Mode;
use crate::params::{Forward, Weights};
use crate::tensor::Tensor;

const EMBED_CHUNK: usize = 16;
const PAIR_CHUNK: usize = 32;

/// Per-image network outputs of a set of images, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    pub maps: Vec<(Level, Tensor<f32>)>,
    pub parts: Vec<(Level, [Tensor<f32>; 3])>,
    pub descriptors: Option<Tensor<f32>>,
    len: usize,
}

impl EmbeddingCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Embeds raw `[0, 1]` images with the model's input standardization.
pub fn embed_all(model: &Model<f32>, images: &[Tensor<f32>]) -> Result<EmbeddingCache> {
    if images.is_empty() {
        return Err(Error::contract("embed_all", "no images"));
    }
    let cfg = &model.config;
    let mut weights = model.weights.clone();
    let mut chunks = Vec::new();
    for chunk in images.chunks(EMBED_CHUNK) {
        let mut items = chunk.to_vec();
        for img in &mut items {
            standardize(img, &cfg.input_mean, &cfg.input_std);
        }
        let batch = Tensor::stack(&items)?;
        let mut fwd = Forward::new(&mut weights, Mode::Infer, false);
        let x = fwd.graph.constant(batch);
        let emb = embed_images(&mut fwd, cfg, x)?;
        let g = &fwd.graph;
        let maps: Vec<_> = emb.maps.iter().map(|&(l, v)| (l, g.value(v).clone())).collect();
        let parts: Vec<_> = emb.parts.iter().map(|&(l, ps)| (l, ps.map(|p| g.value(p).clone()))).collect();
        let desc = emb.descriptors.map(|d| g.value(d).clone());
        chunks.push((maps, parts, desc));
    }
    let cat = |pick: &dyn Fn(usize) -> Tensor<f32>| -> Result<Tensor<f32>> {
        Tensor::cat_rows(&(0..chunks.len()).map(pick).collect::<Vec<_>>())
    };
    let mut maps = Vec::new();
    let mut parts = Vec::new();
    for (i, &(lv, _)) in chunks[0].0.iter().enumerate() {
        maps.push((lv, cat(&|c| chunks[c].0[i].1.clone())?));
        let mut stripes = Vec::with_capacity(3);
        for k in 0..3 {
            stripes.push(cat(&|c| chunks[c].1[i].1[k].clone())?);
        }
        let [a, b, c]: [Tensor<f32>; 3] = stripes.try_into().expect("three stripes");
        parts.push((lv, [a, b, c]));
    }
    let descriptors = match chunks[0].2 {
        Some(_) => Some(cat(&|c| chunks[c].2.clone().expect("uniform across chunks"))?),
        None => None,
    };
    Ok(EmbeddingCache {
        maps,
        parts,
        descriptors,
        len: images.len(),
    })
}

/// Inference outputs for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    /// Softmax probability of a match.
    pub prob: f64,
    /// Descriptor distance, when the ranking net is present.
    pub distance: Option<f64>,
    /// Similarity score used for ranking: `prob + λ/(d + ε)`, or `prob`
    /// alone without the ranking net.
    pub score: f64,
}

fn score_chunk(
    weights: &mut Weights<f32>,
    model: &Model<f32>,
    cache: &EmbeddingCache,
    pairs: &[(usize, usize)],
) -> Result<Vec<PairScore>> {
    let cfg = &model.config;
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
    let b = pairs.len();
    let mut fwd = Forward::new(weights, Mode::Infer, false);
    let g = &mut fwd.graph;
    let mut maps = Vec::new();
    let mut parts = Vec::new();
    for ((lv, m), (_, ps)) in cache.maps.iter().zip(&cache.parts) {
        maps.push((*lv, g.constant(m.select_rows(&rows)?)));
        let mut vs = Vec::with_capacity(3);
        for p in ps {
            vs.push(g.constant(p.select_rows(&rows)?));
        }
        parts.push((*lv, [vs[0], vs[1], vs[2]]));
    }
    let emb = Embedding {
        maps,
        parts,
        transforms: Vec::new(),
        descriptors: None,
    };
    let left: Vec<usize> = (0..b).collect();
    let right: Vec<usize> = (b..2 * b).collect();
    let logits = pair_logits(&mut fwd, cfg, &emb, &left, &right)?;
    let probs = fwd.graph.softmax(logits)?;
    let probs = fwd.graph.value(probs).to_f64_vec();
    let distances = match &cache.descriptors {
        Some(d) => {
            let r1 = d.select_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
            let r2 = d.select_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
            Some(pair_distances(&r1, &r2))
        }
        None => None,
    };
    Ok((0..b)
        .map(|k| {
            let prob = probs[2 * k + 1];
            let distance = distances.as_ref().map(|d| d[k]);
            let score = match distance {
                Some(d) => simi_score([probs[2 * k], prob], d, cfg.lambda, cfg.epsilon),
                None => prob,
            };
            PairScore { prob, distance, score }
        })
        .collect())
}

/// Scores `(cache[a], cache[b])` for every listed pair.
pub fn score_pairs(model: &Model<f32>, cache: &EmbeddingCache, pairs: &[(usize, usize)]) -> Result<Vec<PairScore>> {
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= cache.len() || b >= cache.len()) {
        return Err(Error::contract("score_pairs", format!("pair ({a}, {b}) outside {} images", cache.len())));
    }
    let mut weights = model.weights.clone();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(PAIR_CHUNK) {
        out.extend(score_chunk(&mut weights, model, cache, chunk)?);
    }
    Ok(out)
}

/// Row-major `queries × gallery` similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.cols..(q + 1) * self.cols]
    }
}

/// Similarity of every query against every gallery image.
pub fn score_matrix(model: &Model<f32>, queries: &[Tensor<f32>], gallery: &[Tensor<f32>]) -> Result<ScoreMatrix> {
    let all: Vec<Tensor<f32>> = queries.iter().chain(gallery).cloned().collect();
    let cache = embed_all(model, &all)?;
    let (nq, ng) = (queries.len(), gallery.len());
    let pairs: Vec<(usize, usize)> = (0..nq).flat_map(|q| (0..ng).map(move |g| (q, nq + g))).collect();
    let scores = score_pairs(model, &cache, &pairs)?.into_iter().map(|s| s.score).collect();
    Ok(ScoreMatrix {
        rows: nq,
        cols: ng,
        scores,
    })
}

/// Per-level similarity maps 6C×H×W of one pair of raw images, before
/// fusion.
pub fn pair_similarity_maps(model: &Model<f32>, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<(Level, Tensor<f32>)>> {
    let cache = embed_all(model, &[a.clone(), b.clone()])?;
    let mut weights = model.weights.clone();
    let mut fwd = Forward::new(&mut weights, Mode::Infer, false);
    let g = &mut fwd.graph;
    let mut out = Vec::new();
    for ((lv, m), (_, ps)) in cache.maps.iter().zip(&cache.parts) {
        let side = |g: &mut crate::tensor::Graph<f32>, row: usize| -> Result<_> {
            let x = g.constant(m.select_rows(&[row])?);
            let mut p = Vec::with_capacity(3);
            for t in ps {
                p.push(g.constant(t.select_rows(&[row])?));
            }
            Ok((x, [p[0], p[1], p[2]]))
        };
        let (x1, p1) = side(g, 0)?;
        let (x2, p2) = side(g, 1)?;
        let s = similarity_maps(g, x1, x2, &p1, &p2)?;
        let shape = g.shape(s)[1..].to_vec();
        out.push((*lv, g.value(s).clone().reshape(shape)?));
    }
    Ok(out)
}
