//! Audio-visual generalised zero-shot learning at desk scale.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode automatic
//! differentiation, the AVCA cross-attention model, its triplet and
//! reconstruction objectives, binary feature/embedding file formats with a
//! synthetic dataset generator, and the two-stage GZSL training and
//! evaluation protocol (calibrated stacking, S/U/HM/ZSL reporting).

pub mod dataio;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod protocol;
