pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod losses;
pub mod rl;
pub mod metrics;
pub mod par;
pub mod sampler;
pub mod scenarios;
pub mod schedule;
pub mod simcol;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
