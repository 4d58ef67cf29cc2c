//! Toy vision-language backdoor laboratory: a projector-only model, poisoned
//! fine-tuning, and weight- and embedding-space diagnostics of the result.

pub mod config;
pub mod data;
pub mod embed_lens;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod store;
pub mod tensor;
pub mod train;
pub mod weight_lens;

pub use tensor::Tensor;
