//! Beam-search inference, reply generation, evaluation metrics, and the
//! interactive session state.

mod beam;
mod compare;
mod metrics;
mod respond;

pub use beam::{beam_search, BeamHypothesis};
pub use compare::{compare_variants, CompareReport, VariantRow};
pub use metrics::{bleu, perplexity, space_tokens, PplReport};
pub use respond::{
    evaluate, respond, ChatSession, EvalReport, Response, DEFAULT_BEAM, DEFAULT_MAX_LEN,
};
