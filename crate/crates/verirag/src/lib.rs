//! Retrieval-augmented answering with a verification loop.
//!
//! The engine retrieves references for a question, generates a cited
//! answer, asks a verifier model to score that answer into a structured
//! report, and — when the revision gate fires — re-retrieves with the
//! verifier's revised query and regenerates against the original question.
//! Around that core sit a training-data synthesis pipeline (split, sample,
//! manufacture negatives, annotate, audit, emit multi-task records) and an
//! evaluation harness (substring accuracy, rank aggregation, high-quality
//! rates, reference-quality deltas, judge-based ranking).
//!
//! Everything runs in two modes: *live*, over HTTP backends and a web
//! search endpoint, and *hermetic*, where a scripted backend and an offline
//! lexical retriever serve every call and a denying transport proves that
//! nothing touched a network.
//!
//! Start with [`pipeline::Engine`] for answering, [`synthesis`] for data
//! generation, and [`eval`] for scoring. The `examples/` directory holds a
//! runnable walkthrough of each capability.

pub mod backend;
pub mod cli;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod synthesis;
pub mod types;
pub mod verify;
