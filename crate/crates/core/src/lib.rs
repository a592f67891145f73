pub mod error;
pub mod grpo;
pub mod harness;
pub mod linalg;
pub mod msvq;
pub mod policy;
pub mod pretrain;
pub mod rewards;
pub mod sampler;

pub use error::{Error, Result};
