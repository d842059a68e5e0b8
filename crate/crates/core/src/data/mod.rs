//! Synthetic pedestrians, on-disk datasets, pair sampling and
//! augmentation.

mod dataset;
mod netpbm;
mod pairs;
mod synth;

pub use dataset::{channel_stats, load_dataset, split_by_identity, DatasetSplit, LoadReport};
pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use pairs::{
    assemble_batch, augment, flip_horizontal, make_pairs, standardize, PairBatch, PairIndex, PositivePolicy,
};
pub use synth::{
    generate_identities, hsv_to_rgb, render_view, render_view_with_layout, rgb_to_hue, synthesize, write_dataset,
    Identity, Layout, Rect, Sample, SynthSpec,
};
