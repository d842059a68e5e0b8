use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Mode;
use crate::params::{Activation, Forward, Weights};
use crate::tensor::{finite_diff_check, Graph, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Tent-kernel interpolation over every pixel.
fn tent_sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let px = (x + 1.0) / 2.0 * (w as f64 - 1.0);
    let py = (y + 1.0) / 2.0 * (h as f64 - 1.0);
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k = (1.0 - (px - j as f64).abs()).max(0.0) * (1.0 - (py - i as f64).abs()).max(0.0);
            acc += k * plane[i * w + j];
        }
    }
    acc
}

#[test]
fn raw_zero_is_centred_half_scale() {
    assert_eq!(constrain_params([0.0; 6]), AffineParams::CENTER_HALF);
}

#[test]
fn full_scale_leaves_no_room_to_translate() {
    let p = constrain_params([1.0, 0.0, 0.9, 0.0, 1.0, -0.9]);
    assert_eq!((p.s_w, p.s_h), (1.0, 1.0));
    assert_eq!((p.t_w, p.t_h), (0.0, 0.0));
}

#[test]
fn scale_is_floored() {
    let p = constrain_params([-1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
    assert_eq!((p.s_w, p.s_h), (MIN_SCALE, MIN_SCALE));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn constrained_corners_stay_inside(raw in prop::array::uniform6(-1.0f64..1.0)) {
        let p = constrain_params(raw);
        prop_assert!(p.s_w >= MIN_SCALE && p.s_h >= MIN_SCALE);
        for (x, y) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            let (u, v) = p.map(x, y);
            prop_assert!(u.abs() <= 1.0 + 1e-12 && v.abs() <= 1.0 + 1e-12, "{p:?} maps corner to ({u}, {v})");
        }
    }
}

#[test]
fn grid_spans_scaled_and_shifted_window() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::from_f64(vec![1, 6], &[0.5, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap());
    let grid = g.affine_grid(p, 3, 5).unwrap();
    let v = g.value(grid).data();
    assert_eq!((v[0], v[1]), (-0.5, -0.5));
    assert_eq!((v[28], v[29]), (0.5, 0.5));

    let p = g.constant(Tensor::from_f64(vec![1, 6], &[0.5, 0.0, 0.3, 0.0, 1.0, 0.0]).unwrap());
    let grid = g.affine_grid(p, 2, 4).unwrap();
    let xs: Vec<f64> = g.value(grid).data().iter().step_by(2).copied().collect();
    assert!((xs[0] + 0.2).abs() < 1e-12 && (xs[3] - 0.8).abs() < 1e-12);
}

#[test]
fn identity_grid_reproduces_input_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w) in [(7, 5), (40, 15), (1, 4), (160, 60)] {
        let x32 = random(&[2, 3, h, w], &mut rng).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x32.clone());
        let p = g.constant(Tensor::new(vec![2, 6], [AffineParams::IDENTITY.to_array(); 2].concat().iter().map(|&v| v as f32).collect()).unwrap());
        let grid = g.affine_grid(p, h, w).unwrap();
        let y = g.bilinear_sample(xv, grid).unwrap();
        assert_eq!(g.value(y), &x32, "{h}x{w}");
    }
}

#[test]
fn constant_input_stays_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let raw: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let p = constrain_params(raw);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 2, 9, 6], 0.7));
        let pv = g.constant(Tensor::from_f64(vec![1, 6], &p.to_array()).unwrap());
        let grid = g.affine_grid(pv, 5, 4).unwrap();
        let y = g.bilinear_sample(x, grid).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}

#[test]
fn sampler_matches_tent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let (oh, ow) = (rng.random_range(1..6), rng.random_range(1..6));
        let x = random(&[1, 2, h, w], &mut rng);
        let grid = random(&[1, oh, ow, 2], &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let gv = g.constant(grid.clone());
        let y = g.bilinear_sample(xv, gv).unwrap();
        let yv = g.value(y).data();
        for c in 0..2 {
            let plane = &x.data()[c * h * w..(c + 1) * h * w];
            for k in 0..oh * ow {
                let (gx, gy) = (grid.data()[2 * k], grid.data()[2 * k + 1]);
                let want = tent_sample(plane, h, w, gx, gy);
                assert!((yv[c * oh * ow + k] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn grid_outside_unit_square_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    let grid = g.constant(Tensor::from_f64(vec![1, 1, 1, 2], &[1.01, 0.0]).unwrap());
    let err = g.bilinear_sample(x, grid).unwrap_err();
    assert!(err.to_string().contains("outside"), "{err}");
}

#[test]
fn sampler_gradient_wrt_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = random(&[2, 3, 4, 2], &mut rng);
    let wts = random(&[2, 2, 3, 4], &mut rng);
    let x = random(&[2, 2, 5, 6], &mut rng);
    let err = finite_diff_check(
        |g, x| {
            let gv = g.constant(grid.clone());
            let y = g.bilinear_sample(x, gv)?;
            let w = g.constant(wts.clone());
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn sampler_gradient_wrt_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (5, 6);
    let x = random(&[1, 2, h, w], &mut rng);
    // Pixel positions with fractional part in [0.2, 0.8]: away from kinks.
    let grid = Tensor::from_fn(vec![1, 3, 3, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h } as f64;
        let cell = rng.random_range(0..extent as usize - 1) as f64 + rng.random_range(0.2..0.8);
        cell / (extent - 1.0) * 2.0 - 1.0
    });
    let err = finite_diff_check(
        |g, gr| {
            let xv = g.constant(x.clone());
            let y = g.bilinear_sample(xv, gr)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        &grid,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn constraint_gradient_away_from_clamps() {
    let raw = Tensor::from_f64(vec![2, 6], &[0.2, 0.3, 0.1, -0.4, -0.1, -0.2, 0.6, -0.5, 0.05, 0.2, 0.0, 0.1]).unwrap();
    let coef = Tensor::from_f64(vec![2, 6], &[1.0, -2.0, 3.0, 0.5, 1.5, -1.0, 0.3, 0.7, -0.9, 1.1, 2.0, 0.4]).unwrap();
    let err = finite_diff_check(
        |g, r| {
            let p = g.constrain_affine(r)?;
            let c = g.constant(coef.clone());
            let y = g.mul(p, c)?;
            Ok(g.sum(y))
        },
        &raw,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn constraint_gradient_on_active_translation_bound() {
    // raw t beyond its bound: t = ±(1 - s - |r|) depends on raw s and raw r.
    let raw = Tensor::from_f64(vec![1, 6], &[0.2, 0.4, 0.9, -0.4, 0.1, -0.95]).unwrap();
    let err = finite_diff_check(
        |g, r| {
            let p = g.constrain_affine(r)?;
            let p2 = g.square(p);
            let y = g.add(p, p2)?;
            Ok(g.sum(y))
        },
        &raw,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grid_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random(&[2, 6], &mut rng);
    let wts = random(&[2, 3, 4, 2], &mut rng);
    let err = finite_diff_check(
        |g, p| {
            let grid = g.affine_grid(p, 3, 4)?;
            let w = g.constant(wts.clone());
            let y = g.mul(grid, w)?;
            Ok(g.sum(y))
        },
        &p,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn rotation_penalty_example() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::from_f64(vec![1, 6], &[0.5, 0.1, 0.0, -0.2, 0.5, 0.0]).unwrap());
    let y = g.rotation_l1_penalty(p, DEFAULT_ROTATION_WEIGHT).unwrap();
    assert!((g.value(y).item() - 0.003).abs() < 1e-15);
    g.backward(y).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[0.0, 0.01, 0.0, -0.01, 0.0, 0.0]);
}

#[test]
fn untrained_localization_yields_centred_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut w = Weights::<f64>::init(&localization_layers("loc", 3, 4, 6), &mut rng);
    let mut fwd = Forward::new(&mut w, Mode::Train, false);
    let x = fwd.graph.constant(random(&[2, 3, 8, 6], &mut rng));
    let raw = localization_forward(&mut fwd, "loc", x, Activation::Relu).unwrap();
    let p = fwd.graph.constrain_affine(raw).unwrap();
    let want: Vec<f64> = [AffineParams::CENTER_HALF.to_array(); 2].concat();
    assert_eq!(fwd.graph.value(p).data(), &want[..]);
}

#[test]
fn localization_to_sampler_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut w = Weights::<f64>::init(&localization_layers("loc", 3, 4, 6), &mut rng);
    let fc = w.param_mut("loc.fc.weight").unwrap();
    for v in fc.data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    let region = random(&[2, 3, 8, 6], &mut rng);
    let err = finite_diff_check(
        |g, x| {
            let mut wc = w.clone();
            let mut fwd = Forward::with_graph(std::mem::take(g), &mut wc, Mode::Train, false);
            let raw = localization_forward(&mut fwd, "loc", x, Activation::Tanh)?;
            let p = fwd.graph.constrain_affine(raw)?;
            let grid = fwd.graph.affine_grid(p, 4, 3)?;
            let s = fwd.graph.bilinear_sample(x, grid)?;
            let s = fwd.graph.square(s);
            let y = fwd.graph.sum(s);
            *g = fwd.into_graph();
            Ok(y)
        },
        &region,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}
