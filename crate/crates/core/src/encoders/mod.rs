//! Vision and text encoders: identically structured pre-norm transformer
//! stacks that can be executed over any contiguous block range.

mod checkpoint;
mod config;
mod model;
mod tokenizer;

pub use checkpoint::CHECKPOINT_KIND;
pub use config::{EncoderConfig, Side};
pub use model::{
    build_embed_image, build_embed_text, build_layer, build_layers, build_project, is_embedding, layer_of, layer_param,
    patchify, LayerActivations, LayerRange, ModelState, LOG_TAU, TAU_INIT, TAU_MAX, TAU_MIN,
};
pub use tokenizer::{encode_class_names, CharTokenizer, TokenSequence, CLS_PLACEHOLDER, EOT, UNK};
