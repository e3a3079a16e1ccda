//! Multi-source multi-hop question answering at desk scale.
//!
//! The pipeline: generate a synthetic knowledge world and task set,
//! render per-source text corpora, train a small fused-retrieval
//! reasoner on the tasks, and evaluate it with beam search over
//! reasoning trajectories. Everything is seeded and deterministic so
//! experiment reports are byte-reproducible.

pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod model;
pub mod reasoner;
pub mod seed;
pub mod sources;
pub mod training;
pub mod world;
