//! Memory-augmented conversational image retrieval.
//!
//! A dialogue is encoded one round at a time into a fixed set of memory
//! tokens. Weakened rounds are recalled from a per-session key/value
//! repository, and the previous round's top-k images refine the query
//! before ranking the corpus.

pub mod cost;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod params;
pub mod recall;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, RoundResult, Session, SessionState};
