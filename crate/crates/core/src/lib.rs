pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod dynconv;
pub mod error;
pub mod experiment;
pub mod extractors;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use tensor::{Parameters, Tape, Tensor, Var};
pub use types::{BatchMode, Modality, Subtype};
