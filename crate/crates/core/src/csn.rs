//! Convolution similarity network: stripe division, attended part
//! extraction, bidirectional depth-wise similarity and multi-level fusion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Level, ModelConfig};
use crate::params::Forward;
use crate::stn::{localization_forward, AffineParams};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Three overlapping horizontal bands of one level's feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StripeSpec {
    pub level: Level,
    /// Expected feature-map height.
    pub height: usize,
    /// Inclusive 1-based row ranges: upper, middle, bottom.
    pub rows: [(usize, usize); 3],
    /// Sampler output size.
    pub f: usize,
}

impl StripeSpec {
    /// Upper half, central half and lower half of a map `height` rows tall,
    /// with boundaries rounded half up. Height 40 gives 1–20 / 10–30 / 20–40.
    pub fn new(level: Level, height: usize, f: usize) -> Result<Self> {
        if height < 4 || f == 0 {
            return Err(Error::contract(
                "stripe_spec",
                format!("height {height} and sampler size {f} too small"),
            ));
        }
        let half = height / 2;
        let quarter = (height + 2) / 4;
        let three_q = (3 * height + 2) / 4;
        Ok(StripeSpec {
            level,
            height,
            rows: [(1, half), (quarter, three_q), (half, height)],
            f,
        })
    }

    pub fn for_level(cfg: &ModelConfig, level: Level) -> Result<Self> {
        Self::new(level, cfg.level_hw(level).0, cfg.sampler_size(level))
    }

    pub fn heights(&self) -> [usize; 3] {
        self.rows.map(|(a, b)| b - a + 1)
    }
}

/// Row slices of an N×C×H×W map, one per stripe.
pub fn split_stripes<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &StripeSpec) -> Result<[Var; 3]> {
    let s = g.shape(x);
    if s.len() != 4 || s[2] != spec.height {
        return Err(Error::shape("split_stripes", s, &[0, 0, spec.height, 0]));
    }
    let mut out = [x; 3];
    for (o, &(a, b)) in out.iter_mut().zip(&spec.rows) {
        *o = g.slice(x, 2, a - 1, b - a + 1)?;
    }
    Ok(out)
}

/// Attended parts of one level.
pub struct Parts {
    /// N×C×f×f per stripe.
    pub parts: [Var; 3],
    /// Constrained N×6 transform per stripe; `None` for the fixed crop.
    pub transforms: Option<[Var; 3]>,
}

/// Localization → constraint → grid → sampler, per stripe, with one
/// localization net shared by the three stripes of a level. With
/// `use_stn` off every stripe is cropped at [`AffineParams::CENTER_HALF`].
pub fn extract_parts<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    cfg: &ModelConfig,
    spec: &StripeSpec,
    x: Var,
) -> Result<Parts> {
    let regions = split_stripes(&mut fwd.graph, x, spec)?;
    let n = fwd.graph.shape(x)[0];
    let prefix = format!("loc.{}", spec.level);
    let mut parts = [x; 3];
    let mut transforms = [x; 3];
    for (k, &region) in regions.iter().enumerate() {
        let p = if cfg.use_stn {
            let raw = localization_forward(fwd, &prefix, region, cfg.activation)?;
            fwd.graph.constrain_affine(raw)?
        } else {
            let row = AffineParams::CENTER_HALF.to_array();
            fwd.graph.constant(Tensor::from_f64(vec![n, 6], &row.repeat(n))?)
        };
        let grid = fwd.graph.affine_grid(p, spec.f, spec.f)?;
        parts[k] = fwd.graph.bilinear_sample(region, grid)?;
        transforms[k] = p;
    }
    Ok(Parts {
        parts,
        transforms: cfg.use_stn.then_some(transforms),
    })
}

/// Six groups stacked on the channel axis: `x1` against each part of the
/// second image (upper, middle, bottom), then `x2` against each part of
/// the first.
pub fn similarity_maps<T: Scalar>(
    g: &mut Graph<T>,
    x1: Var,
    x2: Var,
    parts1: &[Var; 3],
    parts2: &[Var; 3],
) -> Result<Var> {
    if g.shape(x1) != g.shape(x2) {
        return Err(Error::shape("similarity_maps", g.shape(x1), g.shape(x2)));
    }
    let mut groups = Vec::with_capacity(6);
    for &p in parts2 {
        groups.push(g.depthwise_corr(x1, p)?);
    }
    for &p in parts1 {
        groups.push(g.depthwise_corr(x2, p)?);
    }
    g.concat(&groups, 1)
}

fn pool_to<T: Scalar>(g: &mut Graph<T>, mut x: Var, hw: (usize, usize)) -> Result<Var> {
    loop {
        let s = g.shape(x);
        let cur = (s[2], s[3]);
        if cur == hw {
            return Ok(x);
        }
        if cur.0 < hw.0 || cur.1 < hw.1 || cur.0 <= 1 && cur.1 <= 1 {
            return Err(Error::shape("fuse_levels", s, &[s[0], s[1], hw.0, hw.1]));
        }
        x = g.maxpool2x2(x)?;
    }
}

/// Pools the running stack down to each next level's size before
/// concatenating it, then pools the result to `out_hw`.
///
/// For levels {2, 3}: pool(sim2) ‖ sim3, pooled once more to 10×4.
pub fn fuse_levels<T: Scalar>(g: &mut Graph<T>, sims: &[Var], out_hw: (usize, usize)) -> Result<Var> {
    let (&first, rest) = sims
        .split_first()
        .ok_or_else(|| Error::contract("fuse_levels", "no similarity maps"))?;
    let mut acc = first;
    for &s in rest {
        let sh = g.shape(s);
        if sh.len() != 4 {
            return Err(Error::shape("fuse_levels", g.shape(acc), sh));
        }
        let hw = (sh[2], sh[3]);
        acc = pool_to(g, acc, hw)?;
        acc = g.concat(&[acc, s], 1)?;
    }
    pool_to(g, acc, out_hw)
}

/// Writes one channel of a C×H×W (or 1×C×H×W) map as an 8-bit PGM,
/// min-max normalized. A constant channel is written as mid-grey.
pub fn export_score_map<T: Scalar>(map: &Tensor<T>, channel: usize, path: &Path) -> Result<()> {
    let s = map.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::contract("export_score_map", format!("expected C×H×W, got {s:?}"))),
    };
    if channel >= c {
        return Err(Error::contract(
            "export_score_map",
            format!("channel {channel} out of range for {c} channels"),
        ));
    }
    let plane: Vec<f64> = map.data()[channel * h * w..(channel + 1) * h * w]
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels: Vec<u8> = plane
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    crate::data::write_pgm(path, w, h, &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn published_stripe_rows() {
        let l2 = StripeSpec::new(Level::L2, 40, 10).unwrap();
        assert_eq!(l2.rows, [(1, 20), (10, 30), (20, 40)]);
        assert_eq!(l2.heights(), [20, 21, 21]);
        let l3 = StripeSpec::new(Level::L3, 20, 5).unwrap();
        assert_eq!(l3.rows, [(1, 10), (5, 15), (10, 20)]);
        assert_eq!(l3.heights(), [10, 11, 11]);
        let l4 = StripeSpec::new(Level::L4, 10, 3).unwrap();
        assert_eq!(l4.rows, [(1, 5), (3, 8), (5, 10)]);
    }

    #[test]
    fn stripes_overlap() {
        for h in 4..64 {
            let s = StripeSpec::new(Level::L2, h, 2).unwrap();
            assert!(s.rows[1].0 <= s.rows[0].1 && s.rows[2].0 <= s.rows[1].1, "{h}: {:?}", s.rows);
            assert_eq!((s.rows[0].0, s.rows[2].1), (1, h));
        }
    }

    #[test]
    fn split_checks_height() {
        let mut g = Graph::<f32>::new();
        let spec = StripeSpec::new(Level::L2, 40, 10).unwrap();
        let x = g.constant(Tensor::zeros(vec![1, 2, 40, 15]));
        let r = split_stripes(&mut g, x, &spec).unwrap();
        assert_eq!(g.shape(r[1]), &[1, 2, 21, 15]);
        let bad = g.constant(Tensor::zeros(vec![1, 2, 39, 15]));
        assert!(split_stripes(&mut g, bad, &spec).is_err());
    }

    #[test]
    fn fixed_crop_parts_are_centred_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = ModelConfig::default();
        cfg.use_stn = false;
        let spec = StripeSpec::new(Level::L3, 20, 5).unwrap();
        let mut w = Weights::<f64>::init(&[], &mut rng);
        let mut fwd = Forward::new(&mut w, crate::nn::Mode::Infer, false);
        let xt = random(&[1, 2, 20, 9], &mut rng);
        let x = fwd.graph.constant(xt.clone());
        let parts = extract_parts(&mut fwd, &cfg, &spec, x).unwrap();
        assert!(parts.transforms.is_none());
        // Upper stripe rows 0..10, width 9: half-scale samples land on
        // x = 2, 3, 4, 5, 6 and y = 2.25 + 1.125·i.
        let p = fwd.graph.value(parts.parts[0]).data();
        let at = |c: usize, r: f64, col: usize| {
            let r0 = r.floor() as usize;
            let fr = r - r0 as f64;
            let v = |rr: usize| xt.data()[(c * 20 + rr) * 9 + col];
            (1.0 - fr) * v(r0) + fr * v(r0 + 1)
        };
        for i in 0..5 {
            for j in 0..5 {
                let want = at(1, 2.25 + 1.125 * i as f64, 2 + j);
                assert!((p[25 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_inputs_give_mirrored_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[2, 3, 8, 5], &mut rng));
        let parts = [0, 1, 2].map(|_| g.constant(random(&[2, 3, 3, 3], &mut rng)));
        let s = similarity_maps(&mut g, x, x, &parts, &parts).unwrap();
        let v = g.value(s);
        assert_eq!(v.shape(), &[2, 18, 8, 5]);
        let plane = 3 * 8 * 5;
        for b in 0..2 {
            let base = b * 18 * 40;
            for k in 0..3 {
                let a = &v.data()[base + k * plane..base + (k + 1) * plane];
                let m = &v.data()[base + (k + 3) * plane..base + (k + 4) * plane];
                assert_eq!(a, m);
            }
        }
    }

    #[test]
    fn delta_parts_reproduce_opposing_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let x1t = random(&[1, 2, 6, 4], &mut rng);
        let x2t = random(&[1, 2, 6, 4], &mut rng);
        let (x1, x2) = (g.constant(x1t.clone()), g.constant(x2t.clone()));
        let delta = Tensor::from_fn(vec![1, 2, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let d = [0, 1, 2].map(|_| g.constant(delta.clone()));
        let s = similarity_maps(&mut g, x1, x2, &d, &d).unwrap();
        let v = g.value(s).data();
        for k in 0..3 {
            assert_eq!(&v[k * 48..(k + 1) * 48], x1t.data());
            assert_eq!(&v[(k + 3) * 48..(k + 4) * 48], x2t.data());
        }
    }

    #[test]
    fn similarity_entries_are_window_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, f) = (2, 9, 7, 4);
        let x1t = random(&[1, c, h, w], &mut rng);
        let x2t = random(&[1, c, h, w], &mut rng);
        let p2t = random(&[1, c, f, f], &mut rng);
        let mut g = Graph::<f64>::new();
        let (x1, x2) = (g.constant(x1t.clone()), g.constant(x2t));
        let p1 = [0, 1, 2].map(|_| g.constant(random(&[1, c, f, f], &mut rng)));
        let p2 = [0, 1, 2].map(|_| g.constant(p2t.clone()));
        let s = similarity_maps(&mut g, x1, x2, &p1, &p2).unwrap();
        let v = g.value(s).data();
        let top = (f - 1) / 2;
        for _ in 0..50 {
            let (ch, i, j) = (rng.random_range(0..c), rng.random_range(0..h), rng.random_range(0..w));
            let mut dot = 0.0;
            for u in 0..f {
                for q in 0..f {
                    let (r, col) = (i as isize + u as isize - top as isize, j as isize + q as isize - top as isize);
                    if r >= 0 && col >= 0 && (r as usize) < h && (col as usize) < w {
                        dot += p2t.data()[(ch * f + u) * f + q] * x1t.data()[(ch * h + r as usize) * w + col as usize];
                    }
                }
            }
            assert!((v[(ch * h + i) * w + j] - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_shapes() {
        let mut g = Graph::<f32>::new();
        let s2 = g.constant(Tensor::full(vec![1, 576, 40, 15], 0.5));
        let s3 = g.constant(Tensor::full(vec![1, 576, 20, 8], 0.5));
        let s4 = g.constant(Tensor::full(vec![1, 576, 10, 4], 0.5));
        let f = fuse_levels(&mut g, &[s2, s3], (10, 4)).unwrap();
        assert_eq!(g.shape(f), &[1, 1152, 10, 4]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.5));
        let f = fuse_levels(&mut g, &[s2, s3, s4], (10, 4)).unwrap();
        assert_eq!(g.shape(f), &[1, 1728, 10, 4]);
        let f = fuse_levels(&mut g, &[s2], (10, 4)).unwrap();
        assert_eq!(g.shape(f), &[1, 576, 10, 4]);
        let f = fuse_levels(&mut g, &[s3], (10, 4)).unwrap();
        assert_eq!(g.shape(f), &[1, 576, 10, 4]);
        let odd = g.constant(Tensor::zeros(vec![1, 576, 7, 4]));
        assert!(fuse_levels(&mut g, &[s2, odd], (10, 4)).is_err());
    }
}
