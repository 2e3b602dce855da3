//! Joint feature matching and multi-homography fitting.

pub mod cli;
pub mod efm;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gap;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod lsgap;
pub mod oracle;
pub mod par;
pub mod scene;

pub use error::{Error, Result};
