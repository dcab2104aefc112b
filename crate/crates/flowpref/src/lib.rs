//! A desk-scale laboratory for preference optimization of rectified-flow
//! models on synthetic micro-videos.
//!
//! The crate builds a complete, CPU-sized study pipeline:
//!
//! 1. [`world`] renders ground-truth micro-videos (a Gaussian bump moving
//!    over a 1-D grid) with controllable motion strength, injects localized
//!    artifacts, and measures motion.
//! 2. [`net`] + [`graph`] + [`optim`] provide the toy velocity-prediction
//!    MLP, a tensor-level reverse-mode autodiff tape, and AdamW.
//! 3. [`flow`] implements rectified-flow noising, the logit-normal noise
//!    level sampler, the flow-matching loss, Euler ODE sampling, and both
//!    paired-generation recipes (independent noise and guided partial
//!    noise).
//! 4. [`preference`] turns pairs into labels: oracle annotators (global,
//!    biased, and per-segment), Bradley-Terry sampling, label perturbation,
//!    majority voting, filtering, and a line-oriented label exchange format.
//! 5. [`dpo`] trains against a frozen reference model with the global-label
//!    loss or the segment-masked dense loss.
//! 6. [`dominance`] measures per-position losing-minus-winning loss maps
//!    over corrupted/uncorrupted regions across a severity ladder.
//! 7. [`harness`] wires everything into reproducible, manifest-hashed runs
//!    behind the `flowpref` CLI.
//!
//! Every run is a pure function of its config and seed: re-running a
//! pipeline reproduces every artifact hash.

pub mod checkpoint;
pub mod dominance;
pub mod dpo;
pub mod error;
pub mod flow;
pub mod graph;
pub mod harness;
pub mod net;
pub mod optim;
pub mod preference;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
