//! Fully connected layer, softmax, cross-entropy, and row normalization.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

fn rows(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n, k] => Ok((n, k)),
        _ => Err(Error::contract(op, format!("expected N×K, got {shape:?}"))),
    }
}

fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - mx).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// `x · Wᵀ + b` for x: N×in, W: out×in, b: out.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, fan_in) = rows("dense", self.shape(x))?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::shape("dense", self.shape(x), &ws));
        }
        let fan_out = ws[0];
        if self.shape(bias) != [fan_out] {
            return Err(Error::shape("dense", &ws, self.shape(bias)));
        }
        let mut out = vec![T::zero(); n * fan_out];
        for row in out.chunks_mut(fan_out) {
            row.copy_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            T::one(),
            &mut out,
        );
        let out = Tensor::new(vec![n, fan_out], out)?;
        Ok(self.record("dense", &[x, weight, bias], out, move |ctx| {
            let g = ctx.grad;
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![T::zero(); n * fan_in];
                T::gemm(n, fan_out, fan_in, T::one(), g, false, ctx.inputs[1].data(), false, T::zero(), &mut gx);
                gx
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![T::zero(); fan_out * fan_in];
                T::gemm(fan_out, n, fan_in, T::one(), g, true, ctx.inputs[0].data(), false, T::zero(), &mut gw);
                gw
            });
            let gb = ctx.needs[2].then(|| {
                let mut gb = vec![T::zero(); fan_out];
                for row in g.chunks(fan_out) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                gb
            });
            vec![gx, gw, gb]
        }))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (_, k) = rows("softmax", self.shape(logits))?;
        let probs = softmax_rows(self.value(logits).data(), k);
        let out = Tensor::new(self.shape(logits).to_vec(), probs)?;
        Ok(self.record("softmax", &[logits], out, move |ctx| {
            let p = ctx.output.data();
            let mut gx = Vec::with_capacity(p.len());
            for (pr, gr) in p.chunks(k).zip(ctx.grad.chunks(k)) {
                let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                gx.extend(pr.iter().zip(gr).map(|(&pi, &gi)| pi * (gi - dot)));
            }
            vec![Some(gx)]
        }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = rows("softmax_cross_entropy", self.shape(logits))?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract("softmax_cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &y) in lv.chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += lse - row[y];
        }
        let inv_n = T::from_f64(1.0 / n as f64);
        let labels = labels.to_vec();
        Ok(self.record("softmax_cross_entropy", &[logits], Tensor::scalar(loss * inv_n), move |ctx| {
            let mut p = softmax_rows(ctx.inputs[0].data(), k);
            let scale = ctx.grad[0] * inv_n;
            for (row, &y) in p.chunks_mut(k).zip(&labels) {
                row[y] -= T::one();
                row.iter_mut().for_each(|v| *v *= scale);
            }
            vec![Some(p)]
        }))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are passed
    /// through unchanged; the returned flag reports whether any occurred.
    pub fn l2_normalize(&mut self, v: Var) -> Result<(Var, bool)> {
        let (_, k) = rows("l2_normalize", self.shape(v))?;
        let data = self.value(v).data();
        let norms: Vec<T> = data
            .chunks(k)
            .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let degenerate = norms.iter().any(|&n| n == T::zero());
        let mut out = Vec::with_capacity(data.len());
        for (r, &nrm) in data.chunks(k).zip(&norms) {
            if nrm == T::zero() {
                out.extend_from_slice(r);
            } else {
                out.extend(r.iter().map(|&x| x / nrm));
            }
        }
        let out = Tensor::new(self.shape(v).to_vec(), out)?;
        let var = self.record("l2_normalize", &[v], out, move |ctx| {
            let y = ctx.output.data();
            let mut gx = Vec::with_capacity(y.len());
            for ((yr, gr), &nrm) in y.chunks(k).zip(ctx.grad.chunks(k)).zip(&norms) {
                if nrm == T::zero() {
                    gx.extend_from_slice(gr);
                    continue;
                }
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                gx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / nrm));
            }
            vec![Some(gx)]
        });
        Ok((var, degenerate))
    }
}
