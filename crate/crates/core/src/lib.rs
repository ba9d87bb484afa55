//! Learnable-query cross-attention projector with causal cross-attention
//! masks (CCAM), plus the machinery to check it: an analytic backward pass
//! with a finite-difference oracle, a continuous-signal quadrature reference
//! for frame-count consistency, and a synthetic temporal-order task.

pub mod cli;
pub mod consistency;
pub mod digest;
pub mod error;
pub mod gradcheck;
pub mod masks;
pub mod numkernel;
pub mod projector;
pub mod rng;

pub use error::{Error, Result};
pub use masks::{FrameMask, MaskRule};
pub use numkernel::{Matrix, TokenMask};
