//! Elementwise arithmetic, reductions, and shape plumbing on graph nodes.

use crate::error::{Error, Result};

use super::value::numel;
use super::{Graph, Scalar, Tensor, Var};

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_fn(t.shape().to_vec(), |i| f(t.data()[i]))
}

/// Splits `shape` around `axis` into (outer, extent, inner) products.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Graph<T> {
    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).numel() == 1 && self.value(a).numel() != 1 {
            return self.add_scalar_var(a, b);
        }
        if self.value(a).numel() == 1 && self.value(b).numel() != 1 {
            return self.add_scalar_var(b, a);
        }
        self.binary_shapes("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + y.data()[i]);
        Ok(self.record("add", &[a, b], out, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.to_vec()),
            ]
        }))
    }

    fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item();
        let out = map(self.value(a), |v| v + sv);
        Ok(self.record("add", &[a, s], out, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| vec![ctx.grad.iter().copied().sum()]),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] - y.data()[i]);
        Ok(self.record("sub", &[a, b], out, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
            ]
        }))
    }

    /// Elementwise product; a one-element operand is broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 1 && na != 1 {
            return self.mul_scalar_var(a, b);
        }
        if na == 1 && nb != 1 {
            return self.mul_scalar_var(b, a);
        }
        self.binary_shapes("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * y.data()[i]);
        Ok(self.record("mul", &[a, b], out, |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(&g, &x)| g * x).collect()),
            ]
        }))
    }

    fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item();
        let out = map(self.value(a), |v| v * sv);
        Ok(self.record("mul", &[a, s], out, |ctx| {
            let s = ctx.inputs[1].item();
            let x = ctx.inputs[0].data();
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().map(|&g| g * s).collect()),
                ctx.needs[1].then(|| vec![ctx.grad.iter().zip(x).map(|(&g, &x)| g * x).sum()]),
            ]
        }))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::from_f64(k);
        let out = map(self.value(a), |v| v * k);
        self.record("scale", &[a], out, move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * k).collect())]
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| v * v);
        self.record("square", &[a], out, |ctx| {
            let x = ctx.inputs[0].data();
            let two = T::from_f64(2.0);
            vec![Some(ctx.grad.iter().zip(x).map(|(&g, &x)| two * g * x).collect())]
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| v.abs());
        self.record("abs", &[a], out, |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else if x < T::zero() { -g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| if v > T::zero() { v } else { T::zero() });
        self.record("relu", &[a], out, |ctx| {
            let y = ctx.output.data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| v.tanh());
        self.record("tanh", &[a], out, |ctx| {
            let y = ctx.output.data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect(),
            )]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record("sum", &[a], Tensor::scalar(s), |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.record("reshape", &[a], out, |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::contract(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = around(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record("slice", &[a], out, move |ctx| {
            let mut g = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                g[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(g)]
        }))
    }

    /// Rows of `a` (entries of axis 0) at `index`, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = shape[0];
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(Error::contract(
                "gather_rows",
                format!("indices must be in 0..{rows} and nonempty"),
            ));
        }
        let inner = numel(&shape[1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let out = Tensor::new(out_shape, data)?;
        let index = index.to_vec();
        Ok(self.record("gather_rows", &[a], out, move |ctx| {
            let mut g = vec![T::zero(); rows * inner];
            for (k, &i) in index.iter().enumerate() {
                let dst = &mut g[i * inner..(i + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&ctx.grad[k * inner..(k + 1) * inner]) {
                    *d += v;
                }
            }
            vec![Some(g)]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::contract("concat", format!("axis {axis} of {base_shape:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base_shape, s));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = around(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record("concat", parts, out, move |ctx| {
            let mut grads: Vec<Option<Vec<T>>> = extents
                .iter()
                .zip(&ctx.needs)
                .map(|(&e, &need)| need.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (g, &e) in grads.iter_mut().zip(&extents) {
                    if let Some(g) = g {
                        g.extend_from_slice(&ctx.grad[offset..offset + e * inner]);
                    }
                    offset += e * inner;
                }
            }
            grads
        }))
    }
}
