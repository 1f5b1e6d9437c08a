//! Core of the avatar forge: the API schema, snippet validator, agent roles,
//! renderer adapters, similarity scoring and the auto-verification loop.

pub mod agents;
pub mod codebank;
pub mod pipeline;
pub mod render;
pub mod schema;
pub mod similarity;
pub mod validator;
