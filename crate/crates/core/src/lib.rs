//! Near-field MIMO beam training: wavenumber-domain sensing followed by
//! online neural beam training (single and multi-beam), plus the oracle and
//! baseline methods it is compared against.

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod geometry_channel;
pub mod linalg;
pub mod metrics;
pub mod online_nn;
pub mod sensing;
pub mod stt_training;
pub mod wavenumber;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec, C64};
