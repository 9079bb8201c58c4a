//! File formats, experiments and the command-line interface built on
//! [`lipsam_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod table;
pub mod wav;
pub mod weights;

pub use error::{AppError, AppResult};
