//! Translate English protocol requirements into CPSA protocol definitions
//! with a chat-completion model, then extract, repair, validate and score
//! what the model produced.

pub mod corpus;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod prompt;
pub mod sexpr;
pub mod validate;
