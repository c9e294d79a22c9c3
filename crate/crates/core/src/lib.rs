//! Length-controlled text generation on top of any streaming text generator.
//!
//! The crate counts length units outside the model, splices running-count
//! markers such as `[150 words]` into the generation at a decaying interval,
//! enforces the final length locally, and orchestrates a plan → draft →
//! rewrite pipeline around that decoder. An evaluation harness measures
//! length error and decomposes it into identifying, counting, planning and
//! aligning components.

pub mod backend;
pub mod bench;
pub mod decode;
pub mod marker;
pub mod metrics;
pub mod pipeline;
pub mod probes;
pub mod prompts;
pub mod schedule;
pub mod segmenter;
