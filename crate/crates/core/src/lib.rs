//! Sequence classifier over byte streams built from holographic feature
//! binding and FFT-domain global convolution, trained with hand-derived
//! gradients. No autodiff, no BLAS: every kernel in here is checked against
//! a slow oracle or finite differences in the test suites.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod hrr;
pub mod layer;
pub mod model;
pub mod numerics;
pub mod telemetry;
pub mod train;

pub use error::{CheckpointError, HgError, Result};
