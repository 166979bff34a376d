//! Decoder-only language model with lip-conditioned adaptation prompts.

mod checkpoint;
mod model;
mod tokenizer;

pub use checkpoint::{
    check_shapes, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};
pub use model::{
    adapter_forward, adapter_prefixes, argmax, base_forward, ce_loss, decays, decoder_graph, generate, init_adapter,
    init_base, is_trainable, loss_graph, token_logprobs, LayerShapes, ModelConfig,
};
pub use tokenizer::{split_tokens, TokenizedSample, Tokenizer, BOS, EOS, PAD, UNK};
