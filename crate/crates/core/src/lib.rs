pub mod acceptance;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gan;
pub mod gansfer;
pub mod grid;
pub mod io;
pub mod morphology;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod segmenter;
pub mod synth;

pub use error::{Error, Result};
