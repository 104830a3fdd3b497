//! A mixed-attention transformer encoder that pairs bottlenecked self-attention with
//! span-aware dynamic convolution, built on a small reverse-mode autodiff tape.
//!
//! The layering goes bottom-up:
//!
//! * [`tensor`] — dense f64 tensors, the [`tensor::Tape`] recording forward ops, and
//!   the primitive ops (matmul, softmax, layer norm, …) with their gradients.
//! * [`conv`] — depthwise, per-position, and dynamic convolutions over sequences.
//! * [`reference`] — deliberately naive loop implementations of every op, kept free
//!   of the tape machinery so the fast paths can be tested against them.
//! * [`gradcheck`] — central finite-difference checking for any scalar loss built on
//!   a tape.
//!
//! Everything is CPU-only, single-threaded, and deterministic: given the same seed,
//! training runs reproduce byte-identical checkpoints and metrics.

pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod conv;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod reference;
pub mod tensor;
pub mod vocab;
