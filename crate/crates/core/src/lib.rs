//! Multi-model chest X-ray report generation.
//!
//! A radiograph is normalized and cut into three horizontal lung segments,
//! one small convolutional classifier per abnormality scores its routed
//! segment, the three binary labels are concatenated into a result code and
//! the code selects sentences from a master text to form the report.
//!
//! Besides inference the crate carries the training machinery, a
//! one-factor-at-a-time tuner, dataset construction helpers, strict
//! multi-label evaluation and the closed-form error propagation analysis.

pub mod bundle;
pub mod classifier;
pub mod dataset;
pub mod evaluation;
pub mod exec;
pub mod imaging;
pub mod neuralnet;
pub mod optimizer;
pub mod pipeline;
pub mod reportgen;
mod rng;

pub use classifier::Abnormality;
pub use exec::ExecMode;
pub use imaging::{GrayImage, ImageFormat, Segment};
pub use reportgen::{MasterText, ResultCode};
