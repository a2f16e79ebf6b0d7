//! Flag-qubit color-code simulation and recurrent neural-network decoding.

pub mod circuit;
pub mod code;
pub mod data;
pub mod error;
pub mod gf2;
pub mod harness;
pub mod net;
pub mod par;
pub mod sim;

pub use error::{Error, Result};
