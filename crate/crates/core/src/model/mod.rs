//! The cross-modal fusion model: `[CLS] Q [SEP] O [SEP] I` through a
//! Transformer encoder, answered from the `[CLS]` hidden state.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{peek_step, AnyCheckpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, BOX_DIMS, CLS_ID, FULL_VISUAL_DIMS, IMAGE_SEGMENT, PAD_ID, SEP_ID, TEXT_SEGMENT};
pub use forward::{
    assemble_sequence, classify, classify_graph, embed_batch, encode, encode_graph, forward, forward_batch,
    logits_many, perturb_text, project_region, BatchForward, EncoderOutput, FusionInput, ParamVars, RegionFeature,
    SpanMap,
};
pub use params::{param_count, param_specs, ModelParams, ParamSpec};

#[cfg(test)]
mod tests;
