pub mod diffcore;
pub mod error;

pub use error::{Error, Result};
pub mod params;
pub mod datapipe;
pub mod metrics;
pub mod embedlayer;
pub mod seqmod;
pub mod crossnet;
pub mod predhead;
pub mod model;
pub mod trainer;
pub mod cli;
