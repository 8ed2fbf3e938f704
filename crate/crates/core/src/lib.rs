//! Discretization-agnostic compressed-sensing MRI reconstruction.

pub mod autodiff;
pub mod basis;
pub mod classical;
pub mod conv;
pub mod disco;
pub mod grid;
pub mod kspace;
pub mod mask;
pub mod rng;
pub mod tensor_io;
pub mod metrics;
pub mod phantom;
pub mod model;
pub mod eval;
pub mod superres;
pub mod gradsuite;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
