//! 2×2 max pooling (ceil mode) and global average pooling.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::contract(op, format!("expected N×C×H×W, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// Non-overlapping 2×2 max pooling. Odd extents round up: the missing
    /// row/column acts as −∞, so 15 pools to 8. Ties resolve to the first
    /// element in row-major order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("maxpool2x2", self.shape(x))?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for q in 0..n * c {
            let base = q * h * w;
            let plane = &xv[base..base + h * w];
            let o = q * oh * ow;
            for oy in 0..oh {
                let y0 = 2 * oy * w;
                let y1 = if 2 * oy + 1 < h { y0 + w } else { y0 };
                for ox in 0..ow {
                    let x0 = 2 * ox;
                    let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
                    // Row-major candidates; a clipped edge repeats an earlier
                    // candidate, which never wins a strict comparison.
                    let mut best = y0 + x0;
                    let mut bv = plane[best];
                    for i in [y0 + x1, y1 + x0, y1 + x1] {
                        let v = plane[i];
                        let win = v > bv;
                        best = if win { i } else { best };
                        bv = if win { v } else { bv };
                    }
                    out[o + oy * ow + ox] = bv;
                    argmax[o + oy * ow + ox] = (base + best) as u32;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let len = n * c * h * w;
        Ok(self.record("maxpool2x2", &[x], out, move |ctx| {
            let mut gx = vec![T::zero(); len];
            for (&i, &g) in argmax.iter().zip(ctx.grad) {
                gx[i as usize] += g;
            }
            vec![Some(gx)]
        }))
    }

    /// Spatial mean per channel: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.record("global_avg_pool", &[x], out, move |ctx| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &g in ctx.grad {
                gx.extend(std::iter::repeat_n(g * inv, hw));
            }
            vec![Some(gx)]
        }))
    }
}
