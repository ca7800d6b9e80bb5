//! Relation extraction that recalls entity pairs from a language model, grounds
//! them against a training-set pair index, and classifies with the matching
//! training examples as in-context demonstrations.

pub mod corpus;
pub mod evaluation;
pub mod lm_backend;
pub mod objectives;
pub mod pair_index;
pub mod pipeline;
pub mod prompting;
pub mod rng;
pub mod tuning_emitter;
