//! Unified autoregressive text-and-image generation at desk scale.
//!
//! Text bytes, image codebook entries and control tokens share one id space
//! ([`vocab`]). Images are tokenized with a patch-level VQ codec ([`imgcodec`]) and laid out
//! in raster order inside system-prompted sequences ([`seqbuild`]). A decoder-only
//! transformer ([`model`]) predicts the next token; inference runs over a static
//! pre-allocated KV cache ([`kvcache`]) with autoregressive or speculative Jacobi decoding
//! ([`decode`]), optionally on 4-bit group-quantized weights ([`quant`]).

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod imgcodec;
pub mod kvcache;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod seqbuild;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
