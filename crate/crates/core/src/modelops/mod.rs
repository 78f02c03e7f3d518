//! Operations on trained models: per-epoch snapshots, averaging the newest
//! `k` of them, and majority-vote ensembles.

mod average;
mod dump;
mod ensemble;
mod snapshot;
mod vote;

pub use average::{average, average_any, average_ring};
pub use dump::{align_dumps, read_dump, write_dump, AlignedDumps, PredictionRecord};
pub use ensemble::{accuracy, ensemble_eval, evaluate, EnsembleReport, Evaluation, Predictor, EVAL_CHUNK};
pub use snapshot::{snapshot_file_name, SnapshotRing};
pub use vote::{majority_vote, PredictionMatrix};
