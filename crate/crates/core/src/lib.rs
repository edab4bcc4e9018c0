//! Hyperschedule-driven discrete diffusion for sequence generation.
//!
//! The crate is organised bottom-up:
//!
//! * [`vocab`], [`rng`], [`corpus`], [`ngram`]: token types, counter-based
//!   random streams, synthetic Markov corpora with known entropy rate, and an
//!   add-k n-gram judge.
//! * [`hyperschedule`]: per-position noise-level matrices (Quench, Flat,
//!   Block, Slide) and their settled/active/worthless partition.
//! * [`process`]: noise schedules, token generators, closed-form evolution
//!   operators and forward corruption for the γ and ε hybrid processes.
//! * [`masks`]: inference and efficient-training attention layouts plus
//!   KV-cache cost accounting.
//! * [`denoiser`]: a small transformer with hand-written backward pass.
//! * [`loss`]: settled cross-entropy, HDCE and the combined objective.
//! * [`sampler`]: the original and adaptive-correction samplers, with
//!   KV-cached windowed decoding.
//! * [`eval`]: Monte-Carlo perplexity bound, judge perplexity and entropy.
//! * [`train`]: the corrupt → forward → loss → update loop shared by the CLI.

pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod hyperschedule;
pub mod loss;
pub mod masks;
pub mod ngram;
pub mod process;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
