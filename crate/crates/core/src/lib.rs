//! Text-conditioned editing of layered latent codes by semantic modulation.
//!
//! A stack of modulation blocks turns a latent code `w` (an `L×D` matrix)
//! and a text embedding `e_t` into an offset `Δw`. Each block aligns the
//! incoming offset to the text with cross attention over layer positions and
//! channels, then injects the text through a normalization-modulation step.
//! Everything runs on a small reverse-mode tape and is trained against a
//! synthetic world whose per-layer semantics are known.

pub mod alignment;
pub mod autograd;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod injection;
pub mod losses;
pub mod optim;
pub mod runner;
pub mod stack;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use stack::{interpolate, ModulationModel, StackConfig, Variant};
pub use tensor::Tensor;
pub use trainer::{train, TrainConfig};
pub use world::{Prompt, SynthWorld, WorldConfig};
