use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::netpbm::read_ppm;
use super::synth::Sample;

/// Files that were not loaded, with the reason.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

fn parse_name(name: &str) -> Option<(u32, u32)> {
    let stem = name.strip_suffix(".ppm")?;
    let (cam, idx) = stem.split_once('_')?;
    Some((cam.parse().ok()?, idx.parse().ok()?))
}

/// Reads `root/<id>/<camera>_<index>.ppm`. Entries that do not follow the
/// layout are skipped and reported; a file that follows it but cannot be
/// read is an error.
pub fn load_dataset(root: &Path) -> Result<(Vec<Sample>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(root, e))?;
    dirs.sort_by_key(|e| e.file_name());
    for entry in dirs {
        let path = entry.path();
        if !path.is_dir() {
            if path.file_name().is_some_and(|n| n != "manifest.txt") {
                report.skipped.push((path, "not an identity directory".into()));
            }
            continue;
        }
        let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u32>().ok()) else {
            report.skipped.push((path, "identity directory name is not an integer".into()));
            continue;
        };
        let mut files: Vec<_> = fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&path, e))?;
        files.sort_by_key(|e| e.file_name());
        for f in files {
            let fp = f.path();
            let Some((camera, index)) = fp.file_name().and_then(|n| n.to_str()).and_then(parse_name) else {
                log::warn!("skipping {}: name is not <camera>_<index>.ppm", fp.display());
                report.skipped.push((fp, "name is not <camera>_<index>.ppm".into()));
                continue;
            };
            let image = read_ppm(&fp)?;
            samples.push(Sample {
                id,
                camera,
                index,
                image,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            msg: "no images found".into(),
        });
    }
    report.loaded = samples.len();
    Ok((samples, report))
}

/// Identity-disjoint train/val/test lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Seeded shuffle of identities into splits of the given sizes.
/// Identities with fewer than two images always go to train, and count
/// towards neither val nor test.
pub fn split_by_identity(samples: &[Sample], n_val: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.id).or_default() += 1;
    }
    let (mut eligible, mut train): (Vec<u32>, Vec<u32>) = counts.keys().copied().partition(|id| counts[id] >= 2);
    if n_val + n_test > eligible.len() {
        return Err(Error::contract(
            "split_by_identity",
            format!("{} val + {} test identities requested, {} eligible", n_val, n_test, eligible.len()),
        ));
    }
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = eligible[..n_test].to_vec();
    let val = eligible[n_test..n_test + n_val].to_vec();
    train.extend_from_slice(&eligible[n_test + n_val..]);
    let sorted = |mut v: Vec<u32>| {
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train: sorted(train),
        val: sorted(val),
        test: sorted(test),
    })
}

/// Per-channel mean and standard deviation over `samples`.
pub fn channel_stats<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0.0;
    for s in samples {
        let plane = s.image.numel() / 3;
        for c in 0..3 {
            for &v in &s.image.data()[c * plane..(c + 1) * plane] {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        n += plane as f64;
    }
    let mean = sum.map(|s| s / n.max(1.0));
    let std = std::array::from_fn(|c| (sq[c] / n.max(1.0) - mean[c] * mean[c]).max(1e-12).sqrt());
    (mean, std)
}
