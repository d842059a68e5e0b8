//! Single-shot CMC evaluation, score matrices and ablation runs.

mod ablation;
mod cmc;
mod protocol;
mod score;

pub use ablation::{fit, run_ablation, standard_grid, write_csv, AblationCell, AblationRow, Experiment, Fit, CSV_HEADER};
pub use cmc::{cmc, match_ranks, CmcCurve};
pub use protocol::{evaluate_single_shot, single_shot_trials, Trial};
pub use score::{embed_all, pair_similarity_maps, score_matrix, score_pairs, EmbeddingCache, PairScore, ScoreMatrix};
