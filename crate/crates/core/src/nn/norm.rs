//! Batch normalization with running statistics.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Non-trainable half of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Weight of the old running value in each update.
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }
}

/// (N, C, spatial) view of an N×C or N×C×H×W tensor.
fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, c] => Some((n, c, 1)),
        [n, c, h, w] => Some((n, c, h * w)),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    /// Per-channel normalization of an N×C or N×C×H×W batch.
    ///
    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; infer mode reads only the running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = layout(&shape)
            .ok_or_else(|| Error::contract("batch_norm", format!("expected N×C[×H×W], got {shape:?}")))?;
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shape("batch_norm", &shape, self.shape(v)));
            }
        }
        if state.running_mean.shape() != [c] || state.running_var.shape() != [c] {
            return Err(Error::shape("batch_norm", &shape, state.running_mean.shape()));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::contract("batch_norm", "train mode needs a batch of at least 2"));
        }

        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let eps = T::from_f64(state.eps);
        let m = n * s;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match mode {
            Mode::Train => {
                for img in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(img * c + ch) * s..(img * c + ch + 1) * s];
                        mean[ch] += plane.iter().copied().sum::<T>();
                    }
                }
                let inv_m = T::from_f64(1.0 / m as f64);
                mean.iter_mut().for_each(|v| *v *= inv_m);
                for img in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(img * c + ch) * s..(img * c + ch + 1) * s];
                        let mu = mean[ch];
                        var[ch] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                }
                let unbias = T::from_f64(m as f64 / (m as f64 - 1.0).max(1.0));
                let mom = T::from_f64(state.momentum);
                let rm = state.running_mean.data_mut();
                for ch in 0..c {
                    var[ch] *= inv_m;
                    rm[ch] = mom * rm[ch] + (T::one() - mom) * mean[ch];
                }
                let rv = state.running_var.data_mut();
                for ch in 0..c {
                    rv[ch] = mom * rv[ch] + (T::one() - mom) * var[ch] * unbias;
                }
            }
            Mode::Infer => {
                mean.copy_from_slice(state.running_mean.data());
                var.copy_from_slice(state.running_var.data());
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let r = (img * c + ch) * s..(img * c + ch + 1) * s;
                let (mu, is, gm, bt) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xv[r]) {
                    *h = (v - mu) * is;
                    *o = gm * *h + bt;
                }
            }
        }
        let out = Tensor::new(shape, out)?;

        Ok(self.record("batch_norm", &[x, gamma, beta], out, move |ctx| {
            let g = ctx.grad;
            let gamma = ctx.inputs[1].data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for img in 0..n {
                for ch in 0..c {
                    let r = (img * c + ch) * s..(img * c + ch + 1) * s;
                    for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * h;
                    }
                }
            }
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let inv_m = T::from_f64(1.0 / m as f64);
                for img in 0..n {
                    for ch in 0..c {
                        let r = (img * c + ch) * s..(img * c + ch + 1) * s;
                        let k = gamma[ch] * inv_std[ch];
                        for ((d, &gv), &h) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                            *d = match mode {
                                Mode::Train => k * (gv - inv_m * (sum_g[ch] + h * sum_gx[ch])),
                                Mode::Infer => k * gv,
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, ctx.needs[1].then(|| sum_gx.clone()), ctx.needs[2].then(|| sum_g.clone())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], state: &mut BatchNormState<f64>, mode: Mode) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let c = gamma.len();
        let gm = g.constant(Tensor::from_f64(vec![c], gamma).unwrap());
        let bt = g.constant(Tensor::from_f64(vec![c], beta).unwrap());
        let y = g.batch_norm(xv, gm, bt, state, mode).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn normalized_batch_is_left_alone() {
        let x = Tensor::from_f64(vec![4, 1], &[-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = run(&x, &[1.0], &[0.0], &mut BatchNormState::new(1), Mode::Train);
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn output_moments_follow_gamma_and_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(vec![5, 3, 4, 2], |_| rng.random_range(-3.0..5.0));
        let (gamma, beta) = ([0.5, 2.0, -1.5], [0.1, -0.7, 3.0]);
        let y = run(&x, &gamma, &beta, &mut BatchNormState::new(3), Mode::Train);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|n| y.data()[(n * 3 + ch) * 8..(n * 3 + ch + 1) * 8].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - beta[ch]).abs() < 1e-5);
            // eps shrinks the variance by var / (var + eps); inputs have var ≈ 5
            assert!((var - gamma[ch] * gamma[ch]).abs() < 1e-5 * gamma[ch] * gamma[ch] + 1e-5);
        }
    }

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let x = Tensor::from_f64(vec![1, 2, 1, 2], &[0.3, -4.0, 2.5, 9.0]).unwrap();
        let mut st = BatchNormState::new(2);
        st.eps = 0.0;
        let y = run(&x, &[1.0, 1.0], &[0.0, 0.0], &mut st, Mode::Infer);
        assert_eq!(y, x);
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 2, 3, 3]));
        let gm = g.constant(Tensor::ones(vec![2]));
        let bt = g.constant(Tensor::zeros(vec![2]));
        assert!(g.batch_norm(x, gm, bt, &mut BatchNormState::new(2), Mode::Train).is_err());
    }

    #[test]
    fn running_statistics_update_with_momentum() {
        let x = Tensor::from_f64(vec![2, 1], &[1.0, 3.0]).unwrap();
        let mut st = BatchNormState::new(1);
        run(&x, &[1.0], &[0.0], &mut st, Mode::Train);
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance 2.0
        assert!((st.running_var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(vec![3, 2, 2, 3], |_| rng.random_range(-2.0..2.0));
        let gamma = Tensor::from_f64(vec![2], &[1.3, -0.6]).unwrap();
        let beta = Tensor::from_f64(vec![2], &[0.2, 0.4]).unwrap();
        let probe = Tensor::from_fn(vec![3, 2, 2, 3], |_| rng.random_range(-1.0..1.0));
        let loss = |g: &mut Graph<f64>, x: Var, gm: Var, bt: Var, mode: Mode| {
            let mut st = BatchNormState::new(2);
            st.running_mean = Tensor::from_f64(vec![2], &[0.1, -0.3]).unwrap();
            st.running_var = Tensor::from_f64(vec![2], &[0.8, 1.7]).unwrap();
            let y = g.batch_norm(x, gm, bt, &mut st, mode)?;
            let p = g.constant(probe.clone());
            let m = g.mul(y, p)?;
            Ok(g.sum(m))
        };
        for mode in [Mode::Train, Mode::Infer] {
            let e = finite_diff_check(
                |g, x| {
                    let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                    loss(g, x, gm, bt, mode)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "{mode:?} dx {e}");
            let e = finite_diff_check(
                |g, gm| {
                    let (xv, bt) = (g.constant(x.clone()), g.constant(beta.clone()));
                    loss(g, xv, gm, bt, mode)
                },
                &gamma,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "{mode:?} dgamma {e}");
            let e = finite_diff_check(
                |g, bt| {
                    let (xv, gm) = (g.constant(x.clone()), g.constant(gamma.clone()));
                    loss(g, xv, gm, bt, mode)
                },
                &beta,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "{mode:?} dbeta {e}");
        }
    }
}
