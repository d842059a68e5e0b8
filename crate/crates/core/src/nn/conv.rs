//! 2-D convolution (im2col + GEMM) and per-sample depth-wise correlation.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` per side; odd kernels only.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Unrolls one C×H×W image into a (C·kh·kw) × (oh·ow) matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad_h as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad_w as isize;
                        *o = if ix >= 0 && (ix as usize) < g.w {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad_w as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of an N×C×H×W batch with O×C×kh×kw filters plus
    /// optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", self.shape(b), &[o]));
            }
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::contract(
                        "conv2d",
                        format!("same padding needs odd kernel, got {kh}x{kw}"),
                    ));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            oh: (h + 2 * pad_h - kh) / stride + 1,
            ow: (w + 2 * pad_w - kw) / stride + 1,
        };
        let (k, p) = (geom.k(), geom.p());

        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for img in 0..n {
            let xi = &xv[img * c * h * w..(img + 1) * c * h * w];
            let b: &[T] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols
            };
            let oi = &mut out[img * o * p..(img + 1) * o * p];
            T::gemm(o, k, p, T::one(), wv, false, b, false, T::zero(), oi);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (chunk, &bo) in out.chunks_mut(p).zip(bv.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        let out = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;

        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record("conv2d", &inputs, out, move |ctx| {
            let xv = ctx.inputs[0].data();
            let wv = ctx.inputs[1].data();
            let gout = ctx.grad;
            let mut gx = ctx.needs[0].then(|| vec![T::zero(); n * c * h * w]);
            let mut gw = ctx.needs[1].then(|| vec![T::zero(); o * k]);
            let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { k * p }];
            let mut dcols = vec![T::zero(); k * p];
            for img in 0..n {
                let go = &gout[img * o * p..(img + 1) * o * p];
                let xi = &xv[img * c * h * w..(img + 1) * c * h * w];
                if let Some(gw) = gw.as_mut() {
                    let b: &[T] = if geom.is_pointwise() {
                        xi
                    } else {
                        im2col(xi, &geom, &mut cols);
                        &cols
                    };
                    // dW (o x k) += dY (o x p) * cols^T (p x k)
                    T::gemm(o, p, k, T::one(), go, false, b, true, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx[img * c * h * w..(img + 1) * c * h * w];
                    if geom.is_pointwise() {
                        T::gemm(k, o, p, T::one(), wv, true, go, false, T::zero(), gxi);
                    } else {
                        T::gemm(k, o, p, T::one(), wv, true, go, false, T::zero(), &mut dcols);
                        col2im(&dcols, &geom, gxi);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut gb = vec![T::zero(); o];
                    for (chunk, i) in gout.chunks(p).zip((0..o).cycle()) {
                        gb[i] += chunk.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Per-sample, per-channel cross-correlation of `signal` (N×C×H×W) with
    /// `filter` (N×C×fh×fw), zero padded so the output is N×C×H×W.
    ///
    /// The filter is an activation: gradients flow into both operands.
    /// Even filter extents pad one more row/column after than before.
    pub fn depthwise_corr(&mut self, signal: Var, filter: Var) -> Result<Var> {
        let ss = self.shape(signal).to_vec();
        let fs = self.shape(filter).to_vec();
        if ss.len() != 4 || fs.len() != 4 || ss[0] != fs[0] || ss[1] != fs[1] {
            return Err(Error::shape("depthwise_corr", &ss, &fs));
        }
        let geom = DwGeom::new(ss[2], ss[3], fs[2], fs[3]);
        let planes = ss[0] * ss[1];
        let sv = self.value(signal).data();
        let fv = self.value(filter).data();
        let mut out = vec![T::zero(); planes * geom.h * geom.w];
        let mut padded = vec![T::zero(); geom.padded_len()];
        let mut strided = vec![T::zero(); geom.strided_len()];
        for q in 0..planes {
            geom.pad_into(&sv[q * geom.h * geom.w..(q + 1) * geom.h * geom.w], &mut padded);
            let f = &fv[q * geom.fh * geom.fw..(q + 1) * geom.fh * geom.fw];
            geom.correlate(&padded, f, &mut strided);
            geom.narrow(&strided, &mut out[q * geom.h * geom.w..(q + 1) * geom.h * geom.w]);
        }
        let out = Tensor::new(ss.clone(), out)?;
        Ok(self.record("depthwise_corr", &[signal, filter], out, move |ctx| {
            let sv = ctx.inputs[0].data();
            let fv = ctx.inputs[1].data();
            let (hw, ff) = (geom.h * geom.w, geom.fh * geom.fw);
            let mut gs = ctx.needs[0].then(|| vec![T::zero(); planes * hw]);
            let mut gf = ctx.needs[1].then(|| vec![T::zero(); planes * ff]);
            let mut padded = vec![T::zero(); geom.padded_len()];
            let mut gpad = vec![T::zero(); geom.padded_len()];
            let mut go = vec![T::zero(); geom.strided_len()];
            for q in 0..planes {
                geom.widen(&ctx.grad[q * hw..(q + 1) * hw], &mut go);
                if let Some(gf) = gf.as_mut() {
                    geom.pad_into(&sv[q * hw..(q + 1) * hw], &mut padded);
                    geom.filter_grad(&padded, &go, &mut gf[q * ff..(q + 1) * ff]);
                }
                if let Some(gs) = gs.as_mut() {
                    gpad.fill(T::zero());
                    geom.signal_grad(&fv[q * ff..(q + 1) * ff], &go, &mut gpad);
                    geom.crop_from(&gpad, &mut gs[q * hw..(q + 1) * hw]);
                }
            }
            vec![gs, gf]
        }))
    }
}

#[derive(Clone, Copy, Debug)]
struct DwGeom {
    h: usize,
    w: usize,
    fh: usize,
    fw: usize,
    top: usize,
    left: usize,
    ph: usize,
    pw: usize,
}

impl DwGeom {
    fn new(h: usize, w: usize, fh: usize, fw: usize) -> Self {
        DwGeom {
            h,
            w,
            fh,
            fw,
            top: (fh - 1) / 2,
            left: (fw - 1) / 2,
            ph: h + fh - 1,
            pw: w + fw - 1,
        }
    }

    /// Padded buffer length: the zero-padded plane plus slack so every
    /// shifted window of `h * pw` elements stays in bounds.
    fn padded_len(&self) -> usize {
        self.ph * self.pw + self.fw - 1
    }

    /// Length of a plane laid out with the padded row stride.
    fn strided_len(&self) -> usize {
        self.h * self.pw
    }

    fn pad_into<T: Scalar>(&self, plane: &[T], padded: &mut [T]) {
        padded.fill(T::zero());
        for y in 0..self.h {
            let dst = (y + self.top) * self.pw + self.left;
            padded[dst..dst + self.w].copy_from_slice(&plane[y * self.w..(y + 1) * self.w]);
        }
    }

    fn crop_from<T: Scalar>(&self, padded: &[T], plane: &mut [T]) {
        for y in 0..self.h {
            let src = (y + self.top) * self.pw + self.left;
            plane[y * self.w..(y + 1) * self.w].copy_from_slice(&padded[src..src + self.w]);
        }
    }

    /// h×w plane to row stride `pw`, zeros in the extra columns.
    fn widen<T: Scalar>(&self, plane: &[T], strided: &mut [T]) {
        strided.fill(T::zero());
        for y in 0..self.h {
            strided[y * self.pw..y * self.pw + self.w].copy_from_slice(&plane[y * self.w..(y + 1) * self.w]);
        }
    }

    fn narrow<T: Scalar>(&self, strided: &[T], plane: &mut [T]) {
        for y in 0..self.h {
            plane[y * self.w..(y + 1) * self.w].copy_from_slice(&strided[y * self.pw..y * self.pw + self.w]);
        }
    }

    // out[y, x] = sum_ij f[i, j] * P[y + i, x + j], computed on the padded
    // stride so each tap is one long axpy; columns >= w are scratch.
    fn correlate<T: Scalar>(&self, padded: &[T], f: &[T], out_strided: &mut [T]) {
        out_strided.fill(T::zero());
        let n = self.strided_len();
        for i in 0..self.fh {
            for j in 0..self.fw {
                let shift = i * self.pw + j;
                axpy(f[i * self.fw + j], &padded[shift..shift + n], out_strided);
            }
        }
    }

    fn filter_grad<T: Scalar>(&self, padded: &[T], go_strided: &[T], gf: &mut [T]) {
        let n = self.strided_len();
        for i in 0..self.fh {
            for j in 0..self.fw {
                let shift = i * self.pw + j;
                gf[i * self.fw + j] += dot(go_strided, &padded[shift..shift + n]);
            }
        }
    }

    fn signal_grad<T: Scalar>(&self, f: &[T], go_strided: &[T], gpad: &mut [T]) {
        let n = self.strided_len();
        for i in 0..self.fh {
            for j in 0..self.fw {
                let shift = i * self.pw + j;
                axpy(f[i * self.fw + j], go_strided, &mut gpad[shift..shift + n]);
            }
        }
    }
}

fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
    acc.iter().copied().sum::<T>() + tail
}
