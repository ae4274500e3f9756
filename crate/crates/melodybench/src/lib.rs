//! Desk-scale workbench for symbolic melody generation.
//!
//! The crate covers the full loop: parsing monophonic Kern notation,
//! normalizing tonality, building a token corpus, training three sequence
//! architectures (LSTM, causal Transformer decoder, Transformer-encoder /
//! LSTM-decoder hybrid) on a built-in reverse-mode autodiff engine,
//! temperature-sampled generation, and a 17-metric musical quality suite with
//! an ablation harness.
//!
//! Start from the runnable programs in `examples/`, or the `melodybench`
//! binary for the staged pipeline.

pub mod rng;
pub mod tensor;

pub use rng::Rng;
