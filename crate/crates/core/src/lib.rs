//! Emotion-prompt retrieval with controllable intensity and a desk-scale
//! conditional flow-matching mel synthesizer.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`embedding_store`]: utterance records, intensity levels, the EMDB file format.
//! - [`retrieval`]: cosine scan and K-means cluster retrieval, EMIX index files.
//! - [`synthbench`]: synthetic emotion databases and the retrieval benchmark.
//! - [`flow_matching`]: vector-field network, L1 flow-matching training, Euler sampling.
//! - [`pipeline`]: staged inference from reference embedding to mel frames.
//! - [`cli`]: the `emorag` command line.

pub mod cli;
pub mod embedding_store;
pub mod flow_matching;
pub mod io;
pub mod pipeline;
pub mod retrieval;
pub mod synthbench;
