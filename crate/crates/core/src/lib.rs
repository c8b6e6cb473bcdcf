pub mod cli;
pub mod compiler;
pub mod dpmm;
pub mod entropy;
pub mod error;
pub mod factorgraph;
pub mod fixtures;
pub mod gates;
pub mod lowprec;
pub mod mrf;
pub mod pgm;
pub mod selftest;
pub mod spiking;
pub mod transition;

pub use error::{Error, Result};
