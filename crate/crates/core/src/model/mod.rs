//! Decoder-only Transformer with a pluggable token-mixing sublayer.
//!
//! Every layer is two pre-LN residual sublayers, `x + f(layer_norm(x))`: first
//! a token mixer (causal self-attention, SHE or iSHE), then a position-wise
//! ReLU feed-forward network. No biases, no dropout and no final
//! normalization; the head is a softmax regression over the vocabulary.

mod checkpoint;
mod config;
mod forward;
mod params;
mod weights;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{ModelConfig, Sublayer1};
pub use forward::{
    adjustment_nodes, argmax, attention_nodes, core_trace, embed, extraction_with,
    extractor_adjustment, extractor_extraction, extractor_nodes, ffn_forward, ffn_nodes,
    layer_forward, lm_head, mhsa_forward, predict_next, predict_probs, residual, sublayer_apply,
    transformer_core_forward, BoundLayer, BoundMixer, BoundModel, CoreNodes, CoreTrace,
};
pub use params::{count_params, ParamCounts};
pub use weights::{AttentionWeights, CoreWeights, ExtractorWeights, LayerWeights, MixerWeights};
