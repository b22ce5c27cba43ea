//! Matryoshka-style multimodal token pyramids at desk scale.
//!
//! * [`token_pyramid`]: nested coarse-to-fine visual token scales and the
//!   training-free sampling baselines.
//! * [`toy_lmm`]: a small autoregressive multimodal transformer with exact
//!   gradients.
//! * [`training`]: the scale-averaged objective and its ablation modes.
//! * [`scale_analysis`]: oracle scale selection, accuracy curves, token budgets.
//! * [`roofline`]: analytic prefill FLOPs, latency and memory.
//! * [`harness`]: synthetic task, configuration, experiment runs.

pub mod error;
pub mod par;
pub mod real;
pub mod roofline;
pub mod scale_analysis;
pub mod tensor_file;
pub mod token_pyramid;
pub mod toy_lmm;
pub mod training;
pub mod harness;

pub use error::{M3Error, Result};
pub use par::Exec;
