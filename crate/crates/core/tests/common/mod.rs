//! Shared test helpers: independent oracles, random corpora and stub HTTP
//! servers standing in for model endpoints.

#![allow(dead_code)]

pub mod oracles;
pub mod stub;
pub mod world;
