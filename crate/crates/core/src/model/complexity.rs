use crate::csn::StripeSpec;
use crate::params::{LayerKind, Weights};
use crate::tensor::Scalar;

use super::config::pooled;
use super::{architecture, Level, ModelConfig};

/// Trainable scalars held by `weights`.
pub fn count_params<T: Scalar>(weights: &Weights<T>) -> usize {
    weights.count_trainable()
}

/// Trainable scalars implied by the layer table of `cfg`.
pub fn count_params_closed_form(cfg: &ModelConfig) -> usize {
    architecture(cfg)
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv { out, inp, k } => out * inp * k * k + out,
            LayerKind::Dense { out, inp } => out * inp + out,
            LayerKind::BatchNorm { channels } => 2 * channels,
        })
        .sum()
}

fn conv(h: usize, w: usize, cin: usize, cout: usize, k: usize) -> u64 {
    2 * (h * w * cin * cout * k * k) as u64
}

/// Floating-point operations (two per multiply-add) of convolutions,
/// correlations and dense layers for one pair at inference. Pooling,
/// normalization, activations and sampling are not counted.
pub fn count_flops(cfg: &ModelConfig) -> u64 {
    let w = &cfg.widths;
    let t = w.trunk;
    let (h1, w1) = pooled(cfg.input_h, cfg.input_w, 0);
    let mut per_image = conv(h1, w1, 3, w.conv1, 5);
    let mut cin = w.conv1;
    for lv in Level::ALL.into_iter().filter(|&l| l <= cfg.deepest()) {
        let (h, ww) = pooled(cfg.input_h, cfg.input_w, lv.pools() - 1);
        per_image += conv(h, ww, cin, t, 3);
        cin = t;
    }
    let mut pair = 0;
    for &lv in &cfg.levels {
        let spec = StripeSpec::for_level(cfg, lv).expect("validated config");
        let (h, ww) = cfg.level_hw(lv);
        let f = spec.f;
        if cfg.use_stn {
            for sh in spec.heights() {
                per_image += conv(sh, ww, t, w.loc1, 3);
                let (h2, w2) = pooled(sh, ww, 1);
                per_image += conv(h2, w2, w.loc1, w.loc1, 3);
                let (h3, w3) = pooled(sh, ww, 2);
                per_image += conv(h3, w3, w.loc1, w.loc3, 1);
                per_image += 2 * (w.loc3 * 6) as u64;
            }
        }
        pair += 6 * 2 * (h * ww * t * f * f) as u64;
        if cfg.use_ranking_loss {
            per_image += 3 * conv(f, f, t, t, 3);
            let (ph, pw) = pooled(f, f, 1);
            per_image += conv(3 * ph, pw, t, t, 3);
        }
    }
    if cfg.use_ranking_loss {
        per_image += 2 * (t * cfg.levels.len() * w.embed) as u64;
    }
    let (fh, fw) = cfg.fused_hw();
    pair += conv(fh, fw, cfg.fused_channels(), w.head, 1);
    pair += conv(fh, fw, w.head, w.head, 3);
    let (ph, pw) = pooled(fh, fw, 1);
    pair += conv(ph, pw, w.head, w.head_out, 1);
    pair += 2 * (w.head_out * 2) as u64;
    2 * per_image + pair
}
