//! Procedural pedestrians: a layered sprite of head, torso, legs and an
//! optional bag, rendered under per-camera lighting with per-view jitter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::netpbm::write_ppm;

/// Generative parameters of one synthetic person.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Identity {
    pub id: u32,
    /// Degrees in [0, 360).
    pub torso_hue: f64,
    pub leg_hue: f64,
    /// 0 = light, 1 = dark.
    pub skin_tone: f64,
    pub has_bag: bool,
    pub bag_hue: f64,
    /// Relative body width in [0.8, 1.2].
    pub build: f64,
}

impl Identity {
    pub fn random(id: u32, rng: &mut impl Rng) -> Self {
        Identity {
            id,
            torso_hue: rng.random_range(0.0..360.0),
            leg_hue: rng.random_range(0.0..360.0),
            skin_tone: rng.random_range(0.0..1.0),
            has_bag: rng.random_bool(0.5),
            bag_hue: rng.random_range(0.0..360.0),
            build: rng.random_range(0.8..1.2),
        }
    }

    pub fn same_attributes(&self, o: &Identity) -> bool {
        self.torso_hue == o.torso_hue
            && self.leg_hue == o.leg_hue
            && self.skin_tone == o.skin_tone
            && self.has_bag == o.has_bag
            && (!self.has_bag || self.bag_hue == o.bag_hue)
            && self.build == o.build
    }

    fn manifest_line(&self) -> String {
        format!(
            "{} torso_hue={:.2} leg_hue={:.2} skin_tone={:.3} bag={} bag_hue={:.2} build={:.3}",
            self.id, self.torso_hue, self.leg_hue, self.skin_tone, self.has_bag as u8, self.bag_hue, self.build
        )
    }
}

/// Draws `n` identities. Every third identity copies the clothing, skin
/// and build of its predecessor and differs only in the bag, so colour
/// alone cannot separate the two.
pub fn generate_identities(n: usize, rng: &mut impl Rng) -> Vec<Identity> {
    let mut out: Vec<Identity> = Vec::with_capacity(n);
    for i in 0..n {
        let id = i as u32;
        let mut p = Identity::random(id, rng);
        if i % 3 == 2 {
            let prev = out[i - 1];
            p = Identity {
                id,
                has_bag: !prev.has_bag,
                bag_hue: if prev.has_bag { prev.bag_hue } else { p.bag_hue },
                ..prev
            };
        }
        while out.iter().any(|o| o.same_attributes(&p)) {
            p.build = rng.random_range(0.8..1.2);
        }
        out.push(p);
    }
    out
}

/// Pixel rectangle, half-open: rows `y0..y1`, columns `x0..x1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Where the parts of a rendered view landed.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub torso: Rect,
    pub bag: Option<Rect>,
    /// Colour the bag was painted with, before lighting.
    pub bag_rgb: [f64; 3],
    /// Combined lighting gain per channel.
    pub gain: [f64; 3],
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB triple; 0 for greys.
pub fn rgb_to_hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    60.0 * h
}

fn skin_rgb(tone: f64) -> [f64; 3] {
    let light = [0.95, 0.80, 0.70];
    let dark = [0.45, 0.30, 0.20];
    std::array::from_fn(|c| light[c] + tone * (dark[c] - light[c]))
}

/// Per-camera colour cast and background level.
fn camera_profile(camera: u32) -> ([f64; 3], f64) {
    match camera % 4 {
        0 => ([1.05, 1.0, 0.92], 0.55),
        1 => ([0.92, 1.0, 1.06], 0.40),
        2 => ([1.0, 1.04, 0.95], 0.48),
        _ => ([0.96, 0.97, 1.04], 0.62),
    }
}

/// Renders one 3×h×w view in [0, 1] of `person` seen by `camera`.
pub fn render_view(person: &Identity, camera: u32, seed: u64, h: usize, w: usize) -> Tensor<f32> {
    render_view_with_layout(person, camera, seed, h, w).0
}

pub fn render_view_with_layout(person: &Identity, camera: u32, seed: u64, h: usize, w: usize) -> (Tensor<f32>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((person.id as u64) << 32) ^ ((camera as u64) << 56));
    let (cam_gain, bg_level) = camera_profile(camera);
    let brightness = rng.random_range(0.8..1.2);
    let gain: [f64; 3] = cam_gain.map(|g| g * brightness);

    let (hf, wf) = (h as f64, w as f64);
    let mut img = vec![[0.0f64; 3]; h * w];
    let grad_dir: f64 = rng.random_range(-1.0..1.0);
    for y in 0..h {
        for x in 0..w {
            let shade = bg_level + 0.08 * grad_dir * (y as f64 / hf - 0.5);
            let n = rng.random_range(-0.08..0.08);
            img[y * w + x] = [shade + n, shade + n * 0.8, shade + n * 1.1];
        }
    }

    let scale = rng.random_range(0.8..1.0);
    let tall = 0.94 * hf * scale;
    let cx = wf / 2.0 + rng.random_range(-0.15..0.15) * wf;
    let top = (hf - tall) / 2.0 + rng.random_range(-0.02..0.02) * hf;
    let unit = wf / 60.0 * scale;

    let clip = |y0: f64, y1: f64, x0: f64, x1: f64| Rect {
        y0: y0.round().clamp(0.0, hf) as usize,
        y1: y1.round().clamp(0.0, hf) as usize,
        x0: x0.round().clamp(0.0, wf) as usize,
        x1: x1.round().clamp(0.0, wf) as usize,
    };
    let fill = |r: Rect, rgb: [f64; 3], img: &mut Vec<[f64; 3]>| {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                img[y * w + x] = rgb;
            }
        }
    };

    let torso_rgb = hsv_to_rgb(person.torso_hue, 0.75, 0.85);
    let leg_rgb = hsv_to_rgb(person.leg_hue, 0.7, 0.55);
    let skin = skin_rgb(person.skin_tone);

    let half_torso = 11.0 * person.build * unit;
    let torso = clip(top + 0.17 * tall, top + 0.52 * tall, cx - half_torso, cx + half_torso);
    let half_leg = 4.5 * person.build * unit;
    let gap = 1.2 * unit;
    let legs_y = (top + 0.52 * tall, top + 0.97 * tall);
    fill(clip(legs_y.0, legs_y.1, cx - gap - 2.0 * half_leg, cx - gap), leg_rgb, &mut img);
    fill(clip(legs_y.0, legs_y.1, cx + gap, cx + gap + 2.0 * half_leg), leg_rgb, &mut img);
    fill(torso, torso_rgb, &mut img);
    // Arms hang beside the torso in the torso colour, slightly darker.
    let arm_rgb = torso_rgb.map(|v| v * 0.85);
    let arm_w = 3.5 * unit;
    fill(clip(torso.y0 as f64 + 2.0, top + 0.48 * tall, torso.x0 as f64 - arm_w, torso.x0 as f64), arm_rgb, &mut img);
    fill(clip(torso.y0 as f64 + 2.0, top + 0.48 * tall, torso.x1 as f64, torso.x1 as f64 + arm_w), arm_rgb, &mut img);

    let head_r = 0.065 * tall;
    let head_cy = top + 0.09 * tall;
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - head_cy, (x as f64 + 0.5 - cx) * 1.3);
            if dy * dy + dx * dx <= head_r * head_r {
                img[y * w + x] = skin;
            }
        }
    }

    let bag_rgb = hsv_to_rgb(person.bag_hue, 0.9, 0.9);
    let bag = person.has_bag.then(|| {
        let (bw, bh) = (12.0 * unit, 0.12 * tall);
        let bx = rng.random_range(torso.x0 as f64 - 0.6 * bw..torso.x1 as f64 - 0.4 * bw);
        let by = top + rng.random_range(0.25..0.42) * tall;
        let r = clip(by, by + bh, bx, bx + bw);
        fill(r, bag_rgb, &mut img);
        r
    });

    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.iter().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = (px[c] * gain[c]).clamp(0.0, 1.0) as f32;
        }
    }
    let layout = Layout {
        torso,
        bag,
        bag_rgb,
        gain,
    };
    (Tensor::new(vec![3, h, w], data).expect("sized buffer"), layout)
}

/// Shape of a generated dataset.
#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub identities: usize,
    pub cameras: u32,
    pub views_per_camera: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identities: 30,
            cameras: 2,
            views_per_camera: 4,
            height: 160,
            width: 60,
            seed: 0,
        }
    }
}

/// One rendered image with its provenance.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u32,
    pub camera: u32,
    pub index: u32,
    pub image: Tensor<f32>,
}

fn view_seed(base: u64, camera: u32, index: u32) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((camera as u64) << 20) ^ index as u64
}

/// Renders every view of every identity in memory.
pub fn synthesize(spec: &SynthSpec) -> (Vec<Identity>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let people = generate_identities(spec.identities, &mut rng);
    let mut samples = Vec::new();
    for p in &people {
        for cam in 0..spec.cameras {
            for idx in 0..spec.views_per_camera {
                let image = render_view(p, cam, view_seed(spec.seed, cam, idx), spec.height, spec.width);
                samples.push(Sample {
                    id: p.id,
                    camera: cam,
                    index: idx,
                    image,
                });
            }
        }
    }
    (people, samples)
}

/// Writes `root/<id>/<camera>_<index>.ppm` for every view plus
/// `root/manifest.txt` with one attribute line per identity.
pub fn write_dataset(spec: &SynthSpec, root: &Path) -> Result<usize> {
    if spec.identities == 0 || spec.cameras == 0 || spec.views_per_camera == 0 {
        return Err(Error::contract("gen-data", "identities, cameras and views must be positive"));
    }
    let (people, samples) = synthesize(spec);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in &samples {
        let dir = root.join(s.id.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_ppm(&dir.join(format!("{}_{}.ppm", s.camera, s.index)), &s.image)?;
    }
    let mut manifest = String::new();
    for p in &people {
        writeln!(manifest, "{}", p.manifest_line()).expect("write to string");
    }
    let path = root.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_rgb(img: &Tensor<f32>, r: Rect, shrink: usize) -> [f64; 3] {
        let [_, h, w] = *img.shape() else { unreachable!() };
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for y in r.y0 + shrink..r.y1 - shrink {
            for x in r.x0 + shrink..r.x1 - shrink {
                for c in 0..3 {
                    acc[c] += img.data()[(c * h + y) * w + x] as f64;
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    }

    fn hue_gap(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(360.0);
        d.min(360.0 - d)
    }

    #[test]
    fn hsv_round_trip_hue() {
        for h in [0.0, 30.0, 95.0, 180.0, 250.0, 359.0] {
            assert!(hue_gap(rgb_to_hue(hsv_to_rgb(h, 0.7, 0.8)), h) < 1e-9);
        }
    }

    #[test]
    fn views_differ_but_keep_torso_hue() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in generate_identities(12, &mut rng) {
            let (a, la) = render_view_with_layout(&p, 0, 1, 160, 60);
            let (b, lb) = render_view_with_layout(&p, 0, 2, 160, 60);
            assert!(a.max_abs_diff(&b) > 0.0);
            // Bags may cover part of the torso; sample around them.
            let rect = |l: &Layout| Rect { y1: l.torso.y0 + 8, ..l.torso };
            let ha = rgb_to_hue(mean_rgb(&a, rect(&la), 1));
            let hb = rgb_to_hue(mean_rgb(&b, rect(&lb), 1));
            assert!(hue_gap(ha, hb) < 15.0, "{ha} vs {hb}");
            assert!(hue_gap(ha, p.torso_hue) < 15.0, "{ha} vs {}", p.torso_hue);
        }
    }

    #[test]
    fn bag_pixels_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let people = generate_identities(20, &mut rng);
        let mut seen = 0;
        for p in people.iter().filter(|p| p.has_bag) {
            let (img, l) = render_view_with_layout(p, 1, 9, 160, 60);
            let r = l.bag.unwrap();
            let want: [f64; 3] = std::array::from_fn(|c| (l.bag_rgb[c] * l.gain[c]).min(1.0));
            let plane = 160 * 60;
            let hits = (0..plane)
                .filter(|&i| (0..3).all(|c| (img.data()[c * plane + i] as f64 - want[c]).abs() < 2e-3))
                .count();
            // The bag is drawn last, so its whole rectangle carries its colour.
            assert!(hits >= r.area(), "{hits} < {}", r.area());
            seen += 1;
        }
        assert!(seen > 0);
    }

    #[test]
    fn output_contract() {
        let p = Identity::random(0, &mut ChaCha8Rng::seed_from_u64(5));
        for cam in 0..4 {
            let img = render_view(&p, cam, 7, 160, 60);
            assert_eq!(img.shape(), &[3, 160, 60]);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(render_view(&p, 0, 7, 160, 60), render_view(&p, 0, 7, 160, 60));
    }

    #[test]
    fn identities_are_distinct_and_twins_differ_only_in_bag() {
        let people = generate_identities(30, &mut ChaCha8Rng::seed_from_u64(6));
        for (i, a) in people.iter().enumerate() {
            for b in &people[i + 1..] {
                assert!(!a.same_attributes(b));
            }
        }
        let (a, b) = (people[1], people[2]);
        assert_eq!((a.torso_hue, a.leg_hue, a.build), (b.torso_hue, b.leg_hue, b.build));
        assert_ne!(a.has_bag, b.has_bag);
    }
}
