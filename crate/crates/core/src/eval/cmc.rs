use crate::error::{Error, Result};

/// Cumulative matching characteristic of a single-shot evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    /// `accuracy[k - 1]` is the fraction of queries whose match ranks
    /// within the top k.
    pub accuracy: Vec<f64>,
    pub gallery_size: usize,
    pub queries: usize,
}

impl CmcCurve {
    /// Rank-k accuracy for k ≥ 1; 1.0 past the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.accuracy.get(k - 1).copied().unwrap_or(1.0)
    }

    /// Pointwise mean of curves over galleries of equal size.
    pub fn mean(curves: &[CmcCurve]) -> Result<CmcCurve> {
        let first = curves
            .first()
            .ok_or_else(|| Error::contract("CmcCurve::mean", "no curves"))?;
        if curves.iter().any(|c| c.gallery_size != first.gallery_size) {
            return Err(Error::contract("CmcCurve::mean", "gallery sizes differ"));
        }
        let n = curves.len() as f64;
        let accuracy = (0..first.gallery_size)
            .map(|k| curves.iter().map(|c| c.accuracy[k]).sum::<f64>() / n)
            .collect();
        Ok(CmcCurve {
            accuracy,
            gallery_size: first.gallery_size,
            queries: curves.iter().map(|c| c.queries).sum(),
        })
    }
}

/// 1-based rank of each query's true match. Higher scores rank first;
/// equal scores rank by gallery index.
pub fn match_ranks(scores: &[f64], query_ids: &[u32], gallery_ids: &[u32]) -> Result<Vec<usize>> {
    let (nq, ng) = (query_ids.len(), gallery_ids.len());
    if ng == 0 || scores.len() != nq * ng {
        return Err(Error::shape("cmc", &[scores.len()], &[nq, ng]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("cmc", "NaN score"));
    }
    let mut ranks = Vec::with_capacity(nq);
    for (q, &id) in query_ids.iter().enumerate() {
        let mut hits = gallery_ids.iter().enumerate().filter(|&(_, &g)| g == id).map(|(i, _)| i);
        let t = match (hits.next(), hits.next()) {
            (Some(t), None) => t,
            (None, _) => return Err(Error::contract("cmc", format!("query {q} (id {id}) has no gallery match"))),
            (Some(_), Some(_)) => {
                return Err(Error::contract("cmc", format!("query {q} (id {id}) has several gallery matches")))
            }
        };
        let row = &scores[q * ng..(q + 1) * ng];
        let st = row[t];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > st || (s == st && j < t))
            .count();
        ranks.push(ahead + 1);
    }
    Ok(ranks)
}

/// Single-shot CMC of a row-major `queries × gallery` score matrix.
pub fn cmc(scores: &[f64], query_ids: &[u32], gallery_ids: &[u32]) -> Result<CmcCurve> {
    let ranks = match_ranks(scores, query_ids, gallery_ids)?;
    let ng = gallery_ids.len();
    let mut counts = vec![0usize; ng];
    for r in &ranks {
        counts[r - 1] += 1;
    }
    let n = ranks.len().max(1) as f64;
    let mut acc = 0;
    let accuracy = counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / n
        })
        .collect();
    Ok(CmcCurve {
        accuracy,
        gallery_size: ng,
        queries: ranks.len(),
    })
}
