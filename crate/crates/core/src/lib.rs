pub mod error;
pub mod io;
pub mod numerics;

pub use error::{Error, Result};
pub mod fields;
pub mod geom;
pub mod image;
pub mod renderer;
pub mod compositor;
pub mod scenes;
pub mod critic;
pub mod pipeline;
pub mod inversion;
pub mod config;
pub mod workflow;
pub mod cli;
#[cfg(feature = "server")]
pub mod server;
