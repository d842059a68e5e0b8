//! Spatial transformer: constrained affine parameters, sampling grid, and
//! differentiable bilinear sampling.
//!
//! Coordinates are normalized to [−1, 1] on both axes, with −1 and +1
//! landing on the centres of the first and last pixel. An affine transform
//! maps every output lattice point (x, y) to the source location
//!
//! ```text
//! x_in = s_w·x + r_w·y + t_w
//! y_in = r_h·x + s_h·y + t_h
//! ```

mod localization;

pub use localization::{localization_forward, localization_layers};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Lowest admissible scale; keeps the sampler from collapsing to a point.
pub const MIN_SCALE: f64 = 0.05;
/// Raw rotation/shear outputs are multiplied by this before clamping.
pub const ROTATION_RANGE: f64 = 0.25;
/// Default weight of the L1 penalty on r_w and r_h.
pub const DEFAULT_ROTATION_WEIGHT: f64 = 0.01;

/// Row-major order of the six parameters in every N×6 tensor.
pub const PARAM_ORDER: [&str; 6] = ["s_w", "r_w", "t_w", "r_h", "s_h", "t_h"];

/// The transform after constraints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub s_w: f64,
    pub r_w: f64,
    pub t_w: f64,
    pub r_h: f64,
    pub s_h: f64,
    pub t_h: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        s_w: 1.0,
        r_w: 0.0,
        t_w: 0.0,
        r_h: 0.0,
        s_h: 1.0,
        t_h: 0.0,
    };

    /// Centred crop at half scale: what an untrained head produces and what
    /// the fixed-crop ablation uses.
    pub const CENTER_HALF: AffineParams = AffineParams {
        s_w: 0.5,
        r_w: 0.0,
        t_w: 0.0,
        r_h: 0.0,
        s_h: 0.5,
        t_h: 0.0,
    };

    pub fn to_array(self) -> [f64; 6] {
        [self.s_w, self.r_w, self.t_w, self.r_h, self.s_h, self.t_h]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        AffineParams {
            s_w: a[0],
            r_w: a[1],
            t_w: a[2],
            r_h: a[3],
            s_h: a[4],
            t_h: a[5],
        }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.s_w * x + self.r_w * y + self.t_w,
            self.r_h * x + self.s_h * y + self.t_h,
        )
    }
}

/// One axis of the constraint map together with the partials needed by
/// the backward pass.
#[derive(Clone, Copy, Debug)]
struct AxisMap {
    s: f64,
    r: f64,
    t: f64,
    s_free: bool,
    r_free: bool,
    t_free: bool,
}

impl AxisMap {
    fn new(raw_s: f64, raw_r: f64, raw_t: f64) -> Self {
        let s_lin = 0.5 * (raw_s + 1.0);
        let s = s_lin.clamp(MIN_SCALE, 1.0);
        let s_free = s_lin > MIN_SCALE && s_lin < 1.0;

        // |r| <= 1 - s keeps s + |r| <= 1, so some translation is admissible.
        let r_lin = ROTATION_RANGE * raw_r;
        let r_bound = 1.0 - s;
        let r = r_lin.clamp(-r_bound, r_bound);
        let r_free = r_lin.abs() < r_bound;

        let t_bound = (1.0 - s - r.abs()).max(0.0);
        let t = raw_t.clamp(-t_bound, t_bound);
        let t_free = raw_t.abs() < t_bound;
        AxisMap {
            s,
            r,
            t,
            s_free,
            r_free,
            t_free,
        }
    }

    /// Pulls output gradients (gs, gr, gt) back to the raw inputs.
    fn backward(&self, raw_r: f64, raw_t: f64, gs: f64, gr: f64, gt: f64) -> (f64, f64, f64) {
        let (mut gs, mut gr) = (gs, gr);
        let mut g_raw_t = 0.0;
        if self.t_free {
            g_raw_t = gt;
        } else if raw_t != 0.0 {
            // t = sign(raw_t) * (1 - s - |r|)
            let sg = raw_t.signum();
            gs -= gt * sg;
            gr -= gt * sg * self.r.signum();
        }
        let mut g_raw_r = 0.0;
        if self.r_free {
            g_raw_r = ROTATION_RANGE * gr;
        } else if raw_r != 0.0 {
            // r = sign(raw_r) * (1 - s)
            gs -= gr * raw_r.signum();
        }
        let g_raw_s = if self.s_free { 0.5 * gs } else { 0.0 };
        (g_raw_s, g_raw_r, g_raw_t)
    }
}

/// Maps raw localization outputs in (−1, 1)⁶ to a transform whose image of
/// [−1, 1]² stays inside [−1, 1]².
///
/// Scale is `(raw + 1) / 2` clamped to [0.05, 1]; rotation is `raw / 4`
/// clamped to ±(1 − s); translation is `raw` clamped to ±(1 − s − |r|).
pub fn constrain_params(raw: [f64; 6]) -> AffineParams {
    let w = AxisMap::new(raw[0], raw[1], raw[2]);
    let h = AxisMap::new(raw[4], raw[3], raw[5]);
    AffineParams {
        s_w: w.s,
        r_w: w.r,
        t_w: w.t,
        r_h: h.r,
        s_h: h.s,
        t_h: h.t,
    }
}

/// Normalized coordinate of lattice index `i` out of `n`.
pub fn lattice(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

impl<T: Scalar> Graph<T> {
    /// Applies [`constrain_params`] row-wise to an N×6 tensor.
    pub fn constrain_affine(&mut self, raw: Var) -> Result<Var> {
        let n = match *self.shape(raw) {
            [n, 6] => n,
            _ => return Err(Error::shape("constrain_affine", self.shape(raw), &[0, 6])),
        };
        let rv = self.value(raw).to_f64_vec();
        let mut out = Vec::with_capacity(n * 6);
        for row in rv.chunks(6) {
            let p = constrain_params(row.try_into().expect("row of 6"));
            out.extend(p.to_array().iter().map(|&v| T::from_f64(v)));
        }
        let out = Tensor::new(vec![n, 6], out)?;
        Ok(self.record("constrain_affine", &[raw], out, move |ctx| {
            let rv = ctx.inputs[0].to_f64_vec();
            let mut gx = Vec::with_capacity(n * 6);
            for (row, g) in rv.chunks(6).zip(ctx.grad.chunks(6)) {
                let g: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
                let w = AxisMap::new(row[0], row[1], row[2]);
                let h = AxisMap::new(row[4], row[3], row[5]);
                let (gsw, grw, gtw) = w.backward(row[1], row[2], g[0], g[1], g[2]);
                let (gsh, grh, gth) = h.backward(row[3], row[5], g[4], g[3], g[5]);
                gx.extend([gsw, grw, gtw, grh, gsh, gth].map(T::from_f64));
            }
            vec![Some(gx)]
        }))
    }

    /// Sampling grid N×out_h×out_w×2 (x then y) from N×6 affine parameters.
    pub fn affine_grid(&mut self, params: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let n = match *self.shape(params) {
            [n, 6] => n,
            _ => return Err(Error::shape("affine_grid", self.shape(params), &[0, 6])),
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::contract("affine_grid", "output extent must be positive"));
        }
        let pv = self.value(params).data();
        let mut out = Vec::with_capacity(n * out_h * out_w * 2);
        for p in pv.chunks(6) {
            for i in 0..out_h {
                let y = T::from_f64(lattice(i, out_h));
                for j in 0..out_w {
                    let x = T::from_f64(lattice(j, out_w));
                    out.push(p[0] * x + p[1] * y + p[2]);
                    out.push(p[3] * x + p[4] * y + p[5]);
                }
            }
        }
        let out = Tensor::new(vec![n, out_h, out_w, 2], out)?;
        Ok(self.record("affine_grid", &[params], out, move |ctx| {
            let mut gp = vec![T::zero(); n * 6];
            for (b, gb) in ctx.grad.chunks(out_h * out_w * 2).enumerate() {
                let acc = &mut gp[b * 6..b * 6 + 6];
                for i in 0..out_h {
                    let y = T::from_f64(lattice(i, out_h));
                    for j in 0..out_w {
                        let x = T::from_f64(lattice(j, out_w));
                        let (gx, gy) = (gb[(i * out_w + j) * 2], gb[(i * out_w + j) * 2 + 1]);
                        acc[0] += gx * x;
                        acc[1] += gx * y;
                        acc[2] += gx;
                        acc[3] += gy * x;
                        acc[4] += gy * y;
                        acc[5] += gy;
                    }
                }
            }
            vec![Some(gp)]
        }))
    }

    /// Bilinear interpolation of N×C×H×W `input` at the N×oh×ow×2 `grid`.
    ///
    /// Gradients flow to both the input values and the grid coordinates.
    pub fn bilinear_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let gs = self.shape(grid).to_vec();
        let ok = is.len() == 4 && gs.len() == 4 && gs[3] == 2 && is[0] == gs[0];
        if !ok {
            return Err(Error::shape("bilinear_sample", &is, &gs));
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (oh, ow) = (gs[1], gs[2]);
        let tol = T::from_f64(1e-6);
        if let Some(bad) = self
            .value(grid)
            .data()
            .iter()
            .find(|v| v.abs() > T::one() + tol || v.is_nan())
        {
            return Err(Error::contract(
                "bilinear_sample",
                format!("grid coordinate {bad} outside [-1, 1]"),
            ));
        }
        let taps = Taps::compute(self.value(grid).data(), h, w);
        let iv = self.value(input).data();
        let (hw, ohw) = (h * w, oh * ow);
        let mut out = vec![T::zero(); n * c * ohw];
        for b in 0..n {
            let tb = &taps[b * ohw..(b + 1) * ohw];
            for ch in 0..c {
                let plane = &iv[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let o = &mut out[(b * c + ch) * ohw..(b * c + ch + 1) * ohw];
                for (o, t) in o.iter_mut().zip(tb) {
                    *o = t.interpolate(plane);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record("bilinear_sample", &[input, grid], out, move |ctx| {
            let iv = ctx.inputs[0].data();
            let mut gin = ctx.needs[0].then(|| vec![T::zero(); n * c * hw]);
            let mut ggrid = ctx.needs[1].then(|| vec![T::zero(); n * ohw * 2]);
            let sx = T::from_f64(0.5 * (w as f64 - 1.0));
            let sy = T::from_f64(0.5 * (h as f64 - 1.0));
            for b in 0..n {
                let tb = &taps[b * ohw..(b + 1) * ohw];
                for ch in 0..c {
                    let q = b * c + ch;
                    let go = &ctx.grad[q * ohw..(q + 1) * ohw];
                    if let Some(gin) = gin.as_mut() {
                        let gp = &mut gin[q * hw..(q + 1) * hw];
                        for (t, &g) in tb.iter().zip(go) {
                            t.scatter(gp, g);
                        }
                    }
                    if let Some(gg) = ggrid.as_mut() {
                        let plane = &iv[q * hw..(q + 1) * hw];
                        let gg = &mut gg[b * ohw * 2..(b + 1) * ohw * 2];
                        for (k, (t, &g)) in tb.iter().zip(go).enumerate() {
                            let (dx, dy) = t.slopes(plane);
                            gg[2 * k] += g * dx * sx;
                            gg[2 * k + 1] += g * dy * sy;
                        }
                    }
                }
            }
            vec![gin, ggrid]
        }))
    }

    /// `weight · Σ(|r_w| + |r_h|)` over all rows of an N×6 parameter tensor.
    pub fn rotation_l1_penalty(&mut self, params: Var, weight: f64) -> Result<Var> {
        if !matches!(*self.shape(params), [_, 6]) {
            return Err(Error::shape("rotation_l1_penalty", self.shape(params), &[0, 6]));
        }
        let wt = T::from_f64(weight);
        let s: T = self
            .value(params)
            .data()
            .chunks(6)
            .map(|p| p[1].abs() + p[3].abs())
            .sum();
        Ok(self.record("rotation_l1_penalty", &[params], Tensor::scalar(wt * s), move |ctx| {
            let g = ctx.grad[0] * wt;
            let sign = |v: T| {
                if v > T::zero() {
                    g
                } else if v < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            };
            let mut gp = vec![T::zero(); ctx.inputs[0].numel()];
            for (d, p) in gp.chunks_mut(6).zip(ctx.inputs[0].data().chunks(6)) {
                d[1] = sign(p[1]);
                d[3] = sign(p[3]);
            }
            vec![Some(gp)]
        }))
    }
}

/// Interpolation stencil of one output point: flat indices of the four
/// neighbours and the fractional offsets.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    idx: [usize; 4],
    wx: T,
    wy: T,
}

struct Taps;

impl Taps {
    fn compute<T: Scalar>(grid: &[T], h: usize, w: usize) -> Vec<Tap<T>> {
        grid.chunks(2)
            .map(|p| {
                let (x0, x1, wx) = axis(p[0], w);
                let (y0, y1, wy) = axis(p[1], h);
                Tap {
                    idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                    wx,
                    wy,
                }
            })
            .collect()
    }
}

/// Lower/upper neighbour and fractional weight along one axis. Positions
/// within rounding of a pixel centre snap onto it, so the identity grid
/// reproduces its input exactly.
fn axis<T: Scalar>(coord: T, extent: usize) -> (usize, usize, T) {
    if extent == 1 {
        return (0, 0, T::zero());
    }
    let last = T::from_f64((extent - 1) as f64);
    let half = T::from_f64(0.5);
    let mut pos = ((coord + T::one()) * half * last).max(T::zero()).min(last);
    let nearest = pos.round();
    if (pos - nearest).abs() <= T::from_f64(16.0 * extent as f64) * T::epsilon() {
        pos = nearest;
    }
    let lo = pos.floor().min(last - T::one());
    let i0 = lo.as_f64() as usize;
    (i0, i0 + 1, pos - lo)
}

impl<T: Scalar> Tap<T> {
    fn weights(&self) -> [T; 4] {
        let (ax, ay) = (T::one() - self.wx, T::one() - self.wy);
        [ay * ax, ay * self.wx, self.wy * ax, self.wy * self.wx]
    }

    fn interpolate(&self, plane: &[T]) -> T {
        let [a, b, c, d] = self.idx.map(|i| plane[i]);
        let (ax, ay) = (T::one() - self.wx, T::one() - self.wy);
        ay * (ax * a + self.wx * b) + self.wy * (ax * c + self.wx * d)
    }

    fn scatter(&self, grad_plane: &mut [T], g: T) {
        for (&i, w) in self.idx.iter().zip(self.weights()) {
            grad_plane[i] += g * w;
        }
    }

    /// Partial derivatives of the interpolated value w.r.t. the pixel-space
    /// position.
    fn slopes(&self, plane: &[T]) -> (T, T) {
        let [a, b, c, d] = self.idx.map(|i| plane[i]);
        let (ax, ay) = (T::one() - self.wx, T::one() - self.wy);
        let dx = if self.idx[0] == self.idx[1] { T::zero() } else { ay * (b - a) + self.wy * (d - c) };
        let dy = if self.idx[0] == self.idx[2] { T::zero() } else { ax * (c - a) + self.wx * (d - b) };
        (dx, dy)
    }
}

#[cfg(test)]
mod tests;
