//! Document-grounded conversation modeling with an incremental transformer
//! encoder and a two-pass deliberation decoder.
//!
//! The crate is self-contained: a small f64 autodiff tape ([`tensor`]),
//! transformer building blocks ([`nn`]), the model variants ([`model`]),
//! corpus handling ([`data`]), training ([`train`]) and decoding plus
//! evaluation ([`decode`]).

pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
