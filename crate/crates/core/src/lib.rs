//! Word-highlighting clip filtering for video moment retrieval and
//! highlight detection.
//!
//! The pipeline pools caption tokens per clip, enhances query, visual and
//! caption features ([`fem`]), filters clips by their similarity to the
//! top-ranked query words ([`rfm`]) and scores cross-modal alignment
//! ([`loss`]). Everything runs on a small reverse-mode autodiff [`tape`].

pub mod error;
pub mod fem;
pub mod fixtures;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod rfm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
