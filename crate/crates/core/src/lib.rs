//! Secondary-crash identification from crash narratives: spatiotemporal and
//! keyword screening, pluggable classifiers (TF-IDF logistic regression,
//! prompted local LLMs, remote services), ensemble review routing, and an
//! evaluation harness.

pub mod backend;
pub mod corpus;
pub mod ensemble;
pub mod evalkit;
pub mod kwfilter;
pub mod llm;
pub mod logreg;
pub mod pipeline;
pub mod stfilter;
pub mod store;
pub mod textfeat;
