pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod exec;
pub mod knowledge;
pub mod matching;
pub mod metrics;
pub mod mrc;
pub mod numerics;
pub mod optim;
pub mod pivot;
pub mod seeding;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
