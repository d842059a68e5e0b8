use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Mean negative log-likelihood of `labels` (1 = match) under softmax.
pub fn classification_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() || labels.iter().any(|&y| y > 1) {
        return Err(Error::contract("classification_loss", "labels must be a nonempty list of 0/1"));
    }
    g.softmax_cross_entropy(logits, labels)
}

/// Euclidean distance between matching rows of two m×D descriptor tensors.
pub fn pair_distances<T: Scalar>(r1: &Tensor<T>, r2: &Tensor<T>) -> Vec<f64> {
    let d = *r1.shape().last().expect("rank >= 1");
    r1.data()
        .chunks(d)
        .zip(r2.data().chunks(d))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// `(1/2m)·Σ [y·d² + (1−y)·max(0, α−d)²]` over m descriptor pairs.
///
/// At d = 0 on a negative pair the direction of d is undefined and the
/// gradient is taken as zero.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    r1: Var,
    r2: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let s = g.shape(r1);
    if s.len() != 2 || s != g.shape(r2) || s[0] != labels.len() {
        return Err(Error::shape("contrastive_loss", g.shape(r1), g.shape(r2)));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::contract("contrastive_loss", "labels must be 0/1"));
    }
    let (m, dim) = (s[0], s[1]);
    let dist = pair_distances(g.value(r1), g.value(r2));
    let total: f64 = dist
        .iter()
        .zip(labels)
        .map(|(&d, &y)| if y == 1 { d * d } else { (margin - d).max(0.0).powi(2) })
        .sum();
    let labels = labels.to_vec();
    let out = Tensor::scalar(T::from_f64(total / (2.0 * m as f64)));
    Ok(g.record("contrastive_loss", &[r1, r2], out, move |ctx| {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let go = ctx.grad[0].as_f64() / (2.0 * m as f64);
        let mut ga = vec![T::zero(); m * dim];
        for i in 0..m {
            let row = i * dim..(i + 1) * dim;
            let coef = if labels[i] == 1 {
                2.0
            } else if dist[i] > 0.0 && dist[i] < margin {
                -2.0 * (margin - dist[i]) / dist[i]
            } else {
                0.0
            };
            if coef == 0.0 {
                continue;
            }
            for ((o, &x), &y) in ga[row.clone()].iter_mut().zip(&a[row.clone()]).zip(&b[row]) {
                *o = T::from_f64(go * coef * (x.as_f64() - y.as_f64()));
            }
        }
        let gb = ga.iter().map(|&v| -v).collect();
        vec![Some(ga), Some(gb)]
    }))
}

/// Classification loss plus whichever of the contrastive loss and
/// rotation penalty are present.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, cls: Var, ctr: Option<Var>, penalty: Option<Var>) -> Result<Var> {
    let mut acc = cls;
    for v in [ctr, penalty].into_iter().flatten() {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Inference score of a pair: match probability plus `λ/(d + ε)`.
pub fn simi_score(probs: [f64; 2], d: f64, lambda: f64, epsilon: f64) -> f64 {
    probs[1] + lambda / (d + epsilon)
}
