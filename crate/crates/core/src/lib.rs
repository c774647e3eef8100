//! Machine-human chatting handoff: a difficulty-assisted matching inference
//! network that labels each dialogue utterance as normal or transferable,
//! the golden-transfer-within-tolerance metric family, and the data,
//! training and evaluation pipeline around them.

pub mod corpus;
pub mod error;
pub mod featurize;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
