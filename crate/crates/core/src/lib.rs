//! Latent topic model with Markovian topic transitions for time-stamped
//! event sequences, fitted by forward-backward variational EM.

pub mod analyze;
pub mod bundle;
pub mod cli;
pub mod error;
pub mod estep;
pub mod fb;
pub mod fit;
pub mod ingest;
pub mod model;
pub mod mstep;
pub mod params_io;
pub mod seeds;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
pub use model::{EventSequence, LatentPath, ModelParams, Timing, VariationalState};
