//! Cross-subject EEG decoding with dual-branch spatio-temporal masks and
//! task/subject feature disentanglement.

pub mod config;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod stap;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use config::PtsmConfig;
pub use error::{DatasetError, Error, Result};
pub use tensor::{Tape, Tensor, Var};
