pub mod autograd;
pub mod captioner;
pub mod data;
pub mod error;
pub mod features;
pub mod metrics;
pub mod preproc;
pub mod synthdata;
pub mod trainer;
pub mod viewadv;

pub use error::{Error, Result};
