//! The incremental encoder, the two-pass decoder, and its single-pass
//! ablations, plus the parameter registry they draw from.

mod forward;
mod params;

pub use forward::{argmax_rows, ContextState, Encoded, ExampleForward, Forward, SaStack};
pub use params::{param_specs, ModelConfig, ParamKind, Parameters, Variant};
