//! Cross-architecture function embeddings for binaries represented as
//! graphs of control-flow graphs.

pub mod config;
pub mod evalpred;
pub mod gog;
pub mod hgnn;
pub mod ingest;
pub mod json;
pub mod siamese;
pub mod tensor;
pub mod synth;
