//! Deterministic synthetic VQA data: scenes of colored shapes, detector-like
//! region features and object tags, and templated questions with exact answers.
//!
//! Colors are visible only in region features; tags name shapes and are noisy,
//! so answering needs both modalities.

mod dataset;
mod question;
mod scene;
mod vocab;

pub use dataset::{
    answer_histogram, generate_example, load_split_file, projection_for, DataConfig, Dataset, Example, Manifest, Split,
    SplitEntry, DATASET_FORMAT_VERSION, MANIFEST_FILE,
};
pub use question::{answer_for, pose_question, Posed, Template, MAX_RESAMPLES};
pub use scene::{featurize, generate_scene, round_sig9, AttributeProjection, BoundingBox, Canvas, Scene, SceneObject};
pub use vocab::{token_id, token_str, Answer, Color, Shape, VOCABULARY};
